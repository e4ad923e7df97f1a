"""Expert usage, cross-slot agreement and LID frame accuracy of a trained checkpoint per chunk spec.

    python scripts/routing_report.py runs/<run>/final.ckpt data/corpus
"""

import argparse
import json

from scmoe import experiment as ex
from scmoe.data import read_corpus
from scmoe.encoder import ChunkSpec


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--split", default="test")
    p.add_argument("--specs", nargs="+", default=["-1,-1", "16,8", "4,2", "1,0"])
    args = p.parse_args()

    model, meta = ex.load_model(args.checkpoint)
    utts = read_corpus(args.corpus).split(args.split)
    for text in args.specs:
        c, l = (int(v) for v in text.split(","))
        stats = ex.inspect_routing(model, utts, ChunkSpec(c, l))
        print(json.dumps({"chunk": [c, l], "step": meta.get("step"), **stats}, sort_keys=True))


if __name__ == "__main__":
    main()
