"""SC-MoE against the dense baseline at equal activated parameters, over several seeds.

    python scripts/moe_vs_baseline.py --confusability 0.7 --steps 600 --seeds 0 1 2
"""

import argparse
import json

import numpy as np

from scmoe import experiment as ex
from scmoe.data import SynthLanguageSpec, generate_corpus
from scmoe.model import ModelConfig, build_model, count_parameters


def run(cfg, corpus, steps, seed, beam):
    optim = ex.OptimConfig(steps=steps, batch_size=16)
    state = ex.train(ex.new_state(cfg, optim, seed), corpus, optim)
    return ex.evaluate(state.model, corpus, "test", beam=beam)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--confusability", type=float, default=0.7)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--beam", type=int, default=10)
    args = p.parse_args()

    spec = SynthLanguageSpec(confusability=args.confusability, noise=args.noise)
    sc_cfg = ModelConfig(input_dim=spec.feature_dim, vocab_size=spec.vocab_size)
    base_cfg = sc_cfg.baseline()
    sc_n, base_n = count_parameters(build_model(sc_cfg)), count_parameters(build_model(base_cfg))
    print(json.dumps({"sc_total": sc_n.total, "sc_activated": sc_n.activated, "routers": sc_n.router,
                      "baseline_total": base_n.total}))
    rows = []
    for seed in args.seeds:
        corpus = generate_corpus(spec, 800, 0, 100, 0.3, seed)
        row = {"seed": seed}
        for name, cfg in (("sc", sc_cfg), ("baseline", base_cfg)):
            rep = run(cfg, corpus, args.steps, seed, args.beam)
            row[name] = {k: rep[k] for k in ("man", "eng", "mixed")}
        rows.append(row)
        print(json.dumps(row), flush=True)
    print(json.dumps({"mean_mer": {k: float(np.mean([r[k]["mixed"] for r in rows])) for k in ("sc", "baseline")}}))


if __name__ == "__main__":
    main()
