"""Train the desk config on a synthetic corpus and report loss, MER and router LID accuracy.

    python scripts/learnability.py --steps 600 --confusability 0.3
"""

import argparse
import json
import time

import numpy as np

from scmoe import experiment as ex
from scmoe.data import SynthLanguageSpec, generate_corpus
from scmoe.encoder import ChunkSpec
from scmoe.model import ModelConfig


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--confusability", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--switch-prob", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--baseline", action="store_true", help="dense model with the same depth")
    args = p.parse_args()

    spec = SynthLanguageSpec(confusability=args.confusability, noise=args.noise)
    corpus = generate_corpus(spec, 800, 0, 100, args.switch_prob, args.seed)
    cfg = ModelConfig(input_dim=spec.feature_dim, vocab_size=spec.vocab_size)
    if args.baseline:
        cfg = cfg.baseline()
    optim = ex.OptimConfig(steps=0, batch_size=16)
    state = ex.new_state(cfg, optim, args.seed)
    t0 = time.perf_counter()
    for stop in range(args.eval_every, args.steps + args.eval_every, args.eval_every):
        optim.steps = min(stop, args.steps)
        ex.train(state, corpus, optim)
        row = {"step": state.opt.step_count, "seconds": round(time.perf_counter() - t0, 1),
               "loss_ratio": float(np.mean([r["total"] for r in state.history[-20:]]) / state.history[0]["total"])}
        for spec_ in (ChunkSpec(-1, -1), ChunkSpec(16, 8)):
            rep = ex.evaluate(state.model, corpus, "test", spec_, args.beam)
            key = "full" if spec_.is_full else "stream"
            row[key] = {k: rep[k] for k in ("man", "eng", "mixed", "lid_frame_accuracy") if k in rep}
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
