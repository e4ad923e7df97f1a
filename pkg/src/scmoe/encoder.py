"""Conformer and Switch Conformer encoder with chunk-based streaming masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param, sinusoidal_positions
from .numerics import Tensor
from .routing import (ENCODER_EXPERTS, Router, RouterSharing, StreamingMoELayer, build_encoder_routers,
                      route_probs, smoe_forward)


@dataclass(frozen=True)
class ChunkSpec:
    """Attention visibility: ``chunk_size`` frames per chunk, ``num_left_chunks`` of history.

    -1 means full context / unlimited history.
    """

    chunk_size: int = -1
    num_left_chunks: int = -1

    def __post_init__(self):
        if self.chunk_size == 0 or self.chunk_size < -1:
            raise ValueError(f"chunk_size must be >= 1 or -1, got {self.chunk_size}")
        if self.num_left_chunks < -1:
            raise ValueError(f"num_left_chunks must be >= 0 or -1, got {self.num_left_chunks}")

    @property
    def is_full(self) -> bool:
        return self.chunk_size == -1

    def as_list(self) -> list[int]:
        return [self.chunk_size, self.num_left_chunks]


FULL_CONTEXT = ChunkSpec(-1, -1)
STREAMING_16_8 = ChunkSpec(16, 8)


def make_chunk_mask(T: int, spec: ChunkSpec) -> np.ndarray:
    """Boolean [T, T]; row t marks the frames frame t may attend to."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if spec.is_full:
        return np.ones((T, T), dtype=bool)
    chunk = np.arange(T) // spec.chunk_size
    q, k = chunk[:, None], chunk[None, :]
    mask = k <= q
    if spec.num_left_chunks >= 0:
        mask &= k >= q - spec.num_left_chunks
    return mask


def sample_dynamic_chunk(rng: np.random.Generator, max_chunk: int = 16, max_left: int = 8) -> ChunkSpec:
    """Half the time full context, else chunk in [1, max_chunk] and left chunks in {0..max_left, unlimited}."""
    if rng.random() < 0.5:
        return FULL_CONTEXT
    chunk = int(rng.integers(1, max_chunk + 1))
    left = int(rng.integers(0, max_left + 2))
    return ChunkSpec(chunk, -1 if left == max_left + 1 else left)


class ConvModule(Module):
    """Pointwise conv + GLU, causal depthwise conv, layer norm, swish, pointwise conv."""

    def __init__(self, d_model: int, kernel: int, rng: np.random.Generator):
        self.pw1 = Linear(d_model, 2 * d_model, rng)
        bound = 1.0 / math.sqrt(kernel)
        self.dw_kernel = param(rng.uniform(-bound, bound, (kernel, d_model)))
        self.dw_bias = param(np.zeros(d_model))
        self.norm = LayerNorm(d_model)
        self.pw2 = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = nx.glu(self.pw1(x), axis=-1)
        h = nx.depthwise_conv1d(h, self.dw_kernel, self.dw_bias, causal=True)
        h = nx.swish(self.norm(h))
        return self.pw2(h)


class _ConformerBase(Module):
    def _init_common(self, d_model: int, heads: int, kernel: int, rng, dropout: float):
        self.norm_ffn1 = LayerNorm(d_model)
        self.norm_mha = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng, dropout)
        self.norm_conv = LayerNorm(d_model)
        self.conv = ConvModule(d_model, kernel, rng)
        self.norm_ffn2 = LayerNorm(d_model)
        self.norm_final = LayerNorm(d_model)
        self._dropout = dropout

    def _drop(self, x: Tensor, rng) -> Tensor:
        return nx.dropout(x, self._dropout, rng, self.training)

    def _middle(self, x: Tensor, mask, rng) -> Tensor:
        h = self.norm_mha(x)
        x = x + self._drop(self.attn(h, h, h, mask, rng), rng)
        x = x + self._drop(self.conv(self.norm_conv(x)), rng)
        return x


class ConformerLayer(_ConformerBase):
    """Macaron FFN / self-attention / causal conv / macaron FFN / layer norm."""

    def __init__(self, d_model: int, d_ff: int, heads: int, kernel: int, rng: np.random.Generator,
                 dropout: float = 0.1):
        self.ffn1 = FeedForward(d_model, d_ff, rng, dropout)
        self._init_common(d_model, heads, kernel, rng, dropout)
        self.ffn2 = FeedForward(d_model, d_ff, rng, dropout)


class SwitchConformerLayer(_ConformerBase):
    """Conformer layer whose two FFNs are streaming MoE layers."""

    def __init__(self, d_model: int, d_ff: int, heads: int, kernel: int, routers: tuple[Router, Router],
                 rng: np.random.Generator, dropout: float = 0.1):
        self.smoe1 = StreamingMoELayer(d_model, d_ff, ENCODER_EXPERTS, routers[0], rng, dropout)
        self._init_common(d_model, heads, kernel, rng, dropout)
        self.smoe2 = StreamingMoELayer(d_model, d_ff, ENCODER_EXPERTS, routers[1], rng, dropout)

    @property
    def shares_router(self) -> bool:
        return self.smoe1.router is self.smoe2.router


def conformer_layer_forward(layer: ConformerLayer, x: Tensor, mask, rng=None) -> Tensor:
    x = x + 0.5 * layer._drop(layer.ffn1(layer.norm_ffn1(x), rng), rng)
    x = layer._middle(x, mask, rng)
    x = x + 0.5 * layer._drop(layer.ffn2(layer.norm_ffn2(x), rng), rng)
    return layer.norm_final(x)


@dataclass
class SCLayerOutput:
    out: Tensor
    router_logits: list[Tensor]  # one per distinct router evaluation in this block
    indices: tuple[np.ndarray, np.ndarray]  # per sMoE slot


def sc_layer_forward(layer: SwitchConformerLayer, x: Tensor, prev_block_out: Tensor, mask, rng=None,
                     valid: np.ndarray | None = None,
                     route: tuple[Tensor, Tensor] | None = None) -> SCLayerOutput:
    """Switch Conformer block. Both sMoE slots route on ``prev_block_out``.

    With a shared router (R3) the routing is computed once and reused, so both
    slots select the same expert per frame. ``route`` injects a decision made
    elsewhere (R1).
    """
    logits_out = []
    if route is None:
        route1 = route_probs(layer.smoe1.router, prev_block_out)
        logits_out.append(route1[1])
        if layer.shares_router:
            route2 = route1
        else:
            route2 = route_probs(layer.smoe2.router, prev_block_out)
            logits_out.append(route2[1])
    else:
        route1 = route2 = route
    m1 = smoe_forward(layer.smoe1, layer.norm_ffn1(x), rng=rng, valid=valid, route=route1)
    x = x + 0.5 * layer._drop(m1.out, rng)
    x = layer._middle(x, mask, rng)
    m2 = smoe_forward(layer.smoe2, layer.norm_ffn2(x), rng=rng, valid=valid, route=route2)
    x = x + 0.5 * layer._drop(m2.out, rng)
    return SCLayerOutput(layer.norm_final(x), logits_out, (m1.indices, m2.indices))


def subsampled_length(T: int, rate: int) -> int:
    """Frames after the front-end: T for rate 1; two kernel-3 stride-2 convs for rate 4."""
    if rate == 1:
        return T
    t1 = (T - 3) // 2 + 1
    return (t1 - 3) // 2 + 1


class Subsampling(Module):
    """Input projection, optionally preceded by two strided time convolutions (x4)."""

    def __init__(self, d_in: int, d_model: int, rate: int, rng: np.random.Generator):
        if rate not in (1, 4):
            raise ValueError("subsampling rate must be 1 or 4")
        self._rate = rate
        if rate == 4:
            self.conv1 = Linear(3 * d_in, d_model, rng)
            self.conv2 = Linear(3 * d_model, d_model, rng)
        self.proj = Linear(d_in if rate == 1 else d_model, d_model, rng)

    @staticmethod
    def _strided(x: Tensor, conv: Linear) -> Tensor:
        T = x.shape[-2]
        T_out = (T - 3) // 2 + 1
        idx = 2 * np.arange(T_out)[:, None] + np.arange(3)[None, :]
        win = x[:, idx]  # [B, T_out, 3, F]
        B, _, _, F = win.shape
        return nx.swish(conv(win.reshape(B, T_out, 3 * F)))

    def __call__(self, x: Tensor) -> Tensor:
        if self._rate == 4:
            x = self._strided(self._strided(x, self.conv1), self.conv2)
        return self.proj(x)


@dataclass
class EncoderOutput:
    features: Tensor  # [B, T', D]
    lengths: np.ndarray  # [B]
    router_logits: list[Tensor] = field(default_factory=list)  # [B, T', 3] per router evaluation
    router_inputs: list[Tensor] = field(default_factory=list)  # h_re for each grid
    indices: list[np.ndarray] = field(default_factory=list)  # [B, T'] per sMoE slot, block order

    @property
    def valid(self) -> np.ndarray:
        T = self.features.shape[1]
        return np.arange(T)[None, :] < self.lengths[:, None]


class Encoder(Module):
    def __init__(self, d_in: int, d_model: int, d_ff: int, heads: int, kernel: int, n_standard: int,
                 n_switch: int, rng: np.random.Generator, dropout: float = 0.1, subsampling: int = 1,
                 router_sharing: RouterSharing | str = RouterSharing.R3):
        self.embed = Subsampling(d_in, d_model, subsampling, rng)
        self.standard = [ConformerLayer(d_model, d_ff, heads, kernel, rng, dropout) for _ in range(n_standard)]
        routers = build_encoder_routers(router_sharing, n_switch, d_model, rng)
        self.switch = [SwitchConformerLayer(d_model, d_ff, heads, kernel, r, rng, dropout) for r in routers]
        self._sharing = RouterSharing(router_sharing)
        self._d_model = d_model
        self._dropout = dropout
        self._subsampling = subsampling

    @property
    def subsampling(self) -> int:
        return self._subsampling

    @property
    def sharing(self) -> RouterSharing:
        return self._sharing


def encoder_forward(encoder: Encoder, x, spec: ChunkSpec = FULL_CONTEXT, lengths=None,
                    rng: np.random.Generator | None = None) -> EncoderOutput:
    """Run the front-end, m conformer blocks, then h Switch Conformer blocks.

    ``x`` is [T, F] or [B, T, F] with per-utterance ``lengths``. Frame t of the
    output sees input frames from its own chunk and the allowed left chunks
    only, plus the causal conv context, so streaming recomputation over a
    growing prefix reproduces the full-utterance result.
    """
    x = nx.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    B, T_in, _ = x.shape
    lengths = np.full(B, T_in) if lengths is None else np.asarray(lengths)
    rate = encoder.subsampling
    T = subsampled_length(T_in, rate)
    out_lengths = np.array([subsampled_length(int(n), rate) for n in lengths])
    if T < 1 or (out_lengths < 1).any():
        raise ValueError(f"input too short for x{rate} subsampling: {T_in} frames")

    valid = np.arange(T)[None, :] < out_lengths[:, None]
    mask = make_chunk_mask(T, spec)[None] & valid[:, None, :]
    # padding queries may have no valid key in view; let them see themselves
    mask |= ~valid[:, :, None] & np.eye(T, dtype=bool)[None]

    h = encoder.embed(x)
    d = encoder._d_model
    h = h * math.sqrt(d) + Tensor(sinusoidal_positions(T, d))
    h = nx.dropout(h, encoder._dropout, rng, encoder.training)

    for layer in encoder.standard:
        h = conformer_layer_forward(layer, h, mask, rng)

    out = EncoderOutput(h, out_lengths)
    shared_route = None
    for layer in encoder.switch:
        if encoder.sharing is RouterSharing.R1:
            if shared_route is None:
                shared_route = route_probs(layer.smoe1.router, h)
                out.router_logits.append(shared_route[1])
                out.router_inputs.append(h)
            res = sc_layer_forward(layer, h, h, mask, rng, valid=valid, route=shared_route)
        else:
            res = sc_layer_forward(layer, h, h, mask, rng, valid=valid)
            out.router_logits.extend(res.router_logits)
            out.router_inputs.extend([h] * len(res.router_logits))
        out.indices.extend(res.indices)
        h = res.out
    out.features = h
    return out
