"""Training loop, evaluation and routing inspection shared by the CLI and scripts."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import numerics as nx
from .data import Corpus, Utterance, compute_metrics
from .encoder import FULL_CONTEXT, ChunkSpec, encoder_forward
from .model import (DECODE_WEIGHTS, TRAIN_WEIGHTS, Adam, Batch, LossWeights, ModelConfig, SCMoE, build_model,
                    decode_batch, total_loss, train_step)
from .routing import ENCODER_EXPERTS, routing_stats

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup: int = 200
    clip_norm: float = 5.0


@dataclass
class TrainState:
    model: SCMoE
    opt: Adam
    rng: np.random.Generator
    best_dev: float = math.inf
    history: list[dict] = field(default_factory=list)


def parse_chunk_policy(policy) -> ChunkSpec | None:
    """"dynamic" -> None (sampled per step); "full" or [c, l] -> fixed spec."""
    if policy == "dynamic":
        return None
    if policy == "full":
        return FULL_CONTEXT
    c, l = policy
    return ChunkSpec(int(c), int(l))


def new_state(config: ModelConfig, optim: OptimConfig, seed: int) -> TrainState:
    model = build_model(config, seed)
    opt = Adam(model.parameters(), optim.peak_lr, optim.warmup, clip_norm=optim.clip_norm)
    return TrainState(model, opt, np.random.default_rng([seed, 1]))


def save_state(state: TrainState, path: Path, extra_meta: dict | None = None) -> None:
    arrays = ckpt.model_arrays(state.model)
    arrays.update(state.opt.state_arrays())
    meta = {"step": state.opt.step_count, "rng": state.rng.bit_generator.state,
            "best_dev": state.best_dev if math.isfinite(state.best_dev) else None, **(extra_meta or {})}
    ckpt.save(path, asdict(state.model.config), arrays, meta)


def load_model(path: str | Path) -> tuple[SCMoE, dict]:
    config, arrays, meta = ckpt.load(path)
    model = build_model(ModelConfig(**config))
    ckpt.load_into(model, arrays)
    return model.eval(), meta


def init_from_checkpoint(model: SCMoE, path: str | Path) -> list[str]:
    """Copy every parameter whose name and shape also exist in ``path`` (typically a dense baseline).

    With a baseline of the same width this fills the front-end, the first m
    encoder blocks, the first k decoder layers and the output heads; expert
    and router weights keep their fresh initialization.
    """
    _, arrays, _ = ckpt.load(path)
    own = dict(model.named_parameters())
    shared = {k: v for k, v in arrays.items() if k in own and own[k].shape == v.shape}
    if not shared:
        raise ckpt.CheckpointError(f"{path}: no parameter matches the model")
    return ckpt.load_into(model, shared, strict=False)


def load_state(path: str | Path, optim: OptimConfig, expect: ModelConfig | None = None) -> TrainState:
    config, arrays, meta = ckpt.load(path)
    cfg = ModelConfig(**config)
    if expect is not None and asdict(expect) != asdict(cfg):
        raise ckpt.CheckpointError("checkpoint model config differs from the run config")
    model = build_model(cfg)
    ckpt.load_into(model, arrays)
    opt = Adam(model.parameters(), optim.peak_lr, optim.warmup, clip_norm=optim.clip_norm)
    opt.load_state_arrays(arrays, int(meta["step"]))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    best = meta.get("best_dev")
    return TrainState(model, opt, rng, math.inf if best is None else best)


def dev_loss(model: SCMoE, utts: list[Utterance], w: LossWeights, batch_size: int = 32) -> float:
    model.eval()
    total, n = 0.0, 0
    with nx.no_grad():
        for i in range(0, len(utts), batch_size):
            chunk = utts[i:i + batch_size]
            total += total_loss(model, Batch.from_utterances(chunk), w).total.item() * len(chunk)
            n += len(chunk)
    return total / max(n, 1)


def train(state: TrainState, corpus: Corpus, optim: OptimConfig, w: LossWeights = TRAIN_WEIGHTS,
          chunk_policy="dynamic", eval_every: int = 0, checkpoint_every: int = 0,
          run_dir: Path | None = None, on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Run until ``optim.steps`` optimizer steps have been taken (resumes from ``state``)."""
    fixed = parse_chunk_policy(chunk_policy)
    n = len(corpus.train)
    bs = min(optim.batch_size, n)
    while state.opt.step_count < optim.steps:
        idx = state.rng.choice(n, bs, replace=False)
        batch = Batch.from_utterances([corpus.train[i] for i in idx])
        rec = train_step(state.model, batch, state.opt, state.rng, w, fixed)
        step = rec["step"]
        if eval_every and corpus.dev and (step % eval_every == 0 or step == optim.steps):
            rec["dev_loss"] = dev_loss(state.model, corpus.dev, w)
            if rec["dev_loss"] < state.best_dev:
                state.best_dev = rec["dev_loss"]
                if run_dir is not None:
                    save_state(state, run_dir / "best.ckpt")
        state.history.append(rec)
        if on_step is not None:
            on_step(rec)
        if run_dir is not None and checkpoint_every and step % checkpoint_every == 0:
            save_state(state, run_dir / f"step-{step:06d}.ckpt")
    if run_dir is not None:
        save_state(state, run_dir / "final.ckpt")
    return state


def evaluate(model: SCMoE, corpus: Corpus, split: str = "test", spec: ChunkSpec = FULL_CONTEXT, beam: int = 10,
             w: LossWeights = DECODE_WEIGHTS) -> dict:
    """Attention-rescoring decode of a split; error rates, LID frame accuracy, routing stats."""
    utts = corpus.split(split)
    results = decode_batch(model, utts, spec, beam, w)
    routing = [np.stack(r.enc_indices) if r.enc_indices else np.zeros((0, 0), dtype=np.int64) for r in results]
    report = compute_metrics([u.tokens for u in utts], [r.tokens for r in results], corpus.vocab,
                             routing if model.config.h else None, [u.frame_langs for u in utts])
    report["split"] = split
    report["chunk"] = spec.as_list()
    if model.config.h:
        per_layer = [[r[l] for r in routing] for l in range(routing[0].shape[0])]
        report["routing"] = routing_stats(per_layer, ENCODER_EXPERTS).as_dict()
    report["hypotheses"] = {u.id: r.tokens for u, r in zip(utts, results)}
    return report


def inspect_routing(model: SCMoE, utts: list[Utterance], spec: ChunkSpec = FULL_CONTEXT) -> dict:
    """Per-slot expert usage, cross-slot agreement and per-slot LID frame accuracy."""
    from .data import lid_frame_accuracy

    model.eval()
    per_slot: list[list[np.ndarray]] = []
    with nx.no_grad():
        for i in range(0, len(utts), 32):
            b = Batch.from_utterances(utts[i:i + 32])
            enc = encoder_forward(model.encoder, b.feats, spec, b.lengths)
            if not per_slot:
                per_slot = [[] for _ in enc.indices]
            for s, idx in enumerate(enc.indices):
                per_slot[s].extend(idx[j, :n] for j, n in enumerate(enc.lengths))
    if not per_slot:
        return {"slots": 0}
    stats = routing_stats(per_slot, ENCODER_EXPERTS).as_dict()
    stats["slots"] = len(per_slot)
    stats["lid_frame_accuracy"] = [lid_frame_accuracy(slot, [u.frame_langs for u in utts])["lid_frame_accuracy"]
                                   for slot in per_slot]
    return stats


def write_jsonl(path: Path, rec: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(rec, sort_keys=True) + "\n")
