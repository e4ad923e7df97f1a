"""Average the model weights of several checkpoints (e.g. the last few periodic ones).

    python scripts/average_checkpoints.py out.ckpt runs/<run>/step-*.ckpt
"""

import argparse

from scmoe import checkpoint as ckpt


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("output")
    p.add_argument("inputs", nargs="+")
    args = p.parse_args()
    config, arrays, meta = ckpt.average(args.inputs)
    ckpt.save(args.output, config, arrays, meta)
    print(f"averaged {len(args.inputs)} checkpoints into {args.output}")


if __name__ == "__main__":
    main()
