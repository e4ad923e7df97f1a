"""Streaming top-1 MoE layer with language routers.

Encoder experts are ordered Mandarin=0, English=1, blank=2; the decoder MoE
has only the two language experts. A router is a single linear map from the
previous block's output to expert logits; the selected expert's output is
scaled by its softmax gate value, which is how the router receives gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nx
from .layers import FeedForward, Module, param
from .numerics import ShapeError, Tensor

MANDARIN, ENGLISH, BLANK_EXPERT = 0, 1, 2
ENCODER_EXPERTS = 3
DECODER_EXPERTS = 2


class RouterSharing(str, Enum):
    R1 = "R1"  # one router for every sMoE layer, evaluated once
    R2 = "R2"  # one router per sMoE layer
    R3 = "R3"  # one router per SC block, shared by its two sMoE layers


class Router(Module):
    def __init__(self, d_model: int, n_experts: int, rng: np.random.Generator, init_scale: float = 1.0):
        if n_experts < 2:
            raise ValueError("a router needs at least two experts")
        bound = init_scale / np.sqrt(d_model)
        self.weight = param(rng.uniform(-bound, bound, (d_model, n_experts)))
        self.bias = param(np.zeros(n_experts))

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    def __call__(self, h: Tensor) -> Tensor:
        return nx.linear(h, self.weight, self.bias, rowwise=True)


def route_probs(router: Router, h: Tensor) -> tuple[Tensor, Tensor]:
    """Gate probabilities and raw logits for every frame of ``h`` ([..., D])."""
    if h.shape[-1] != router.weight.shape[0]:
        raise ShapeError("route_probs", h.shape, router.weight.shape)
    logits = router(h)
    return nx.softmax(logits, axis=-1), logits


def select_expert(p) -> np.ndarray:
    """Top-1 expert per frame; ties go to the lowest index."""
    data = p.data if isinstance(p, Tensor) else np.asarray(p)
    return np.argmax(data, axis=-1)


class StreamingMoELayer(Module):
    """Expert FFNs plus a (possibly shared) router reference.

    ``expert_rows`` counts frames pushed through any expert since the last
    ``reset_counters``; with top-1 routing it grows by exactly one per frame.
    """

    def __init__(self, d_model: int, d_ff: int, n_experts: int, router: Router,
                 rng: np.random.Generator, dropout: float = 0.1):
        if router.n_experts != n_experts:
            raise ValueError(f"router has {router.n_experts} outputs for {n_experts} experts")
        self.experts = [FeedForward(d_model, d_ff, rng, dropout, rowwise=True) for _ in range(n_experts)]
        self.router = router
        self._expert_rows = 0

    @property
    def expert_rows(self) -> int:
        return self._expert_rows

    def reset_counters(self) -> None:
        self._expert_rows = 0


@dataclass
class MoEOutput:
    out: Tensor
    indices: np.ndarray  # [...] selected expert per frame
    logits: Tensor  # [..., E] router logits
    probs: Tensor


def smoe_forward(layer: StreamingMoELayer, x_expert: Tensor, h_router: Tensor | None = None,
                 rng: np.random.Generator | None = None, valid: np.ndarray | None = None,
                 route: tuple[Tensor, Tensor] | None = None) -> MoEOutput:
    """out[t] = p_i(t) * Expert_i(x_expert[t]) with i(t) = argmax p(t).

    The router sees ``h_router`` (the previous block's output), not the expert
    input. ``route`` passes precomputed (probs, logits) from a shared router.
    Frames with ``valid`` False are skipped and produce zeros.
    """
    if route is None:
        if h_router is None:
            raise ValueError("need h_router or a precomputed route")
        if h_router.shape[:-1] != x_expert.shape[:-1]:
            raise ShapeError("smoe_forward", x_expert.shape, h_router.shape)
        route = route_probs(layer.router, h_router)
    probs, logits = route
    if probs.shape[:-1] != x_expert.shape[:-1]:
        raise ShapeError("smoe_forward", x_expert.shape, probs.shape)
    lead, D = x_expert.shape[:-1], x_expert.shape[-1]
    n = int(np.prod(lead)) if lead else 1
    flat_x = x_expert.reshape(n, D)
    flat_p = probs.reshape(n, probs.shape[-1])
    idx = select_expert(flat_p)
    live = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool).reshape(n)

    parts = []
    for e, expert in enumerate(layer.experts):
        rows = np.nonzero((idx == e) & live)[0]
        if len(rows) == 0:
            continue
        y = expert(flat_x[rows], rng)
        gate = flat_p[rows, np.full(len(rows), e)].reshape(len(rows), 1)
        parts.append((rows, y * gate))
        layer._expert_rows += len(rows)
    if parts:
        out = nx.scatter_rows(n, parts)
    else:
        out = Tensor(np.zeros((n, D)))
    return MoEOutput(out.reshape(lead + (D,)), idx.reshape(lead), logits, probs)


def dense_moe_reference(layer: StreamingMoELayer, x_expert: Tensor, h_router: Tensor) -> Tensor:
    """Evaluate every expert on every frame, then keep the routed one (test oracle)."""
    probs, _ = route_probs(layer.router, h_router)
    idx = select_expert(probs)
    outs = np.stack([expert(x_expert).data for expert in layer.experts], axis=-2)  # [..., E, D]
    chosen = np.take_along_axis(outs, idx[..., None, None], axis=-2)[..., 0, :]
    gate = np.take_along_axis(probs.data, idx[..., None], axis=-1)
    return Tensor(chosen * gate)


@dataclass
class RoutingStats:
    counts: np.ndarray  # [layers, E]
    agreement: np.ndarray  # [layers, layers]

    def as_dict(self) -> dict:
        total = self.counts.sum(axis=1, keepdims=True)
        frac = np.divide(self.counts, total, out=np.zeros(self.counts.shape), where=total > 0)
        return {
            "counts": self.counts.tolist(),
            "fractions": np.round(frac, 6).tolist(),
            "agreement": np.round(self.agreement, 6).tolist(),
        }


def routing_stats(indices_per_layer, n_experts: int) -> RoutingStats:
    """Per-layer expert counts and pairwise same-expert agreement.

    ``indices_per_layer[l]`` holds the selected experts of layer ``l`` over
    the same frames (any nesting; it is flattened).
    """
    flat = [np.concatenate([np.ravel(a) for a in layer]) if isinstance(layer, (list, tuple))
            else np.ravel(layer) for layer in indices_per_layer]
    L = len(flat)
    counts = np.zeros((L, n_experts), dtype=np.int64)
    for i, a in enumerate(flat):
        counts[i] = np.bincount(a.astype(np.int64), minlength=n_experts)[:n_experts]
    agreement = np.ones((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            if len(flat[i]) != len(flat[j]):
                raise ValueError("layers cover different frame counts")
            agreement[i, j] = agreement[j, i] = float(np.mean(flat[i] == flat[j])) if len(flat[i]) else 1.0
    return RoutingStats(counts, agreement)


def build_encoder_routers(mode: RouterSharing | str, n_blocks: int, d_model: int,
                          rng: np.random.Generator) -> list[tuple[Router, Router]]:
    """(router for FFN slot 1, router for FFN slot 2) per SC block."""
    mode = RouterSharing(mode)
    if mode is RouterSharing.R1:
        shared = Router(d_model, ENCODER_EXPERTS, rng)
        return [(shared, shared) for _ in range(n_blocks)]
    if mode is RouterSharing.R3:
        out = []
        for _ in range(n_blocks):
            r = Router(d_model, ENCODER_EXPERTS, rng)
            out.append((r, r))
        return out
    return [(Router(d_model, ENCODER_EXPERTS, rng), Router(d_model, ENCODER_EXPERTS, rng))
            for _ in range(n_blocks)]
