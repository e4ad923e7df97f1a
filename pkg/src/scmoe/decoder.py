"""Transformer and Switch Transformer decoder layers (used as L2R and R2L decoders)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, param, sinusoidal_positions
from .numerics import Tensor
from .routing import DECODER_EXPERTS, MoEOutput, Router, StreamingMoELayer, smoe_forward


class TransformerDecoderLayer(Module):
    """Pre-norm self-attention, cross-attention and FFN with residuals."""

    def __init__(self, d_model: int, d_ff: int, heads: int, rng: np.random.Generator, dropout: float = 0.1):
        self.norm_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dropout)
        self.norm_src = LayerNorm(d_model)
        self.src_attn = MultiHeadAttention(d_model, heads, rng, dropout)
        self.norm_ffn = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng, dropout)
        self._dropout = dropout

    def _drop(self, x, rng):
        return nx.dropout(x, self._dropout, rng, self.training)

    def _attend(self, x, memory, self_mask, src_mask, rng):
        h = self.norm_self(x)
        x = x + self._drop(self.self_attn(h, h, h, self_mask, rng), rng)
        h = self.norm_src(x)
        return x + self._drop(self.src_attn(h, memory, memory, src_mask, rng), rng)

    def __call__(self, x, memory, self_mask, src_mask, rng=None) -> Tensor:
        x = self._attend(x, memory, self_mask, src_mask, rng)
        return x + self._drop(self.ffn(self.norm_ffn(x), rng), rng)


class SwitchTransformerDecoderLayer(TransformerDecoderLayer):
    """Decoder layer whose FFN is a 2-expert (Mandarin/English) MoE with its own router."""

    def __init__(self, d_model: int, d_ff: int, heads: int, rng: np.random.Generator, dropout: float = 0.1):
        super().__init__(d_model, d_ff, heads, rng, dropout)
        del self.ffn
        self.smoe = StreamingMoELayer(d_model, d_ff, DECODER_EXPERTS, Router(d_model, DECODER_EXPERTS, rng),
                                      rng, dropout)


def st_decoder_layer_forward(layer: SwitchTransformerDecoderLayer, x: Tensor, memory: Tensor, self_mask,
                             src_mask, rng=None, valid=None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Returns (output, router logits [.., U, 2], selected expert per position).

    The router reads the layer input ``x``; the experts read the normalized
    output of the cross-attention sub-layer.
    """
    h_router = x
    x = layer._attend(x, memory, self_mask, src_mask, rng)
    moe: MoEOutput = smoe_forward(layer.smoe, layer.norm_ffn(x), h_router, rng, valid=valid)
    return x + layer._drop(moe.out, rng), moe.logits, moe.indices


@dataclass
class DecoderOutput:
    logits: Tensor  # [B, U, V]
    router_logits: list[Tensor] = field(default_factory=list)  # [B, U, 2] per ST layer
    indices: list[np.ndarray] = field(default_factory=list)


class Decoder(Module):
    def __init__(self, vocab_size: int, d_model: int, d_ff: int, heads: int, n_standard: int, n_switch: int,
                 rng: np.random.Generator, dropout: float = 0.1):
        self.embed = param(rng.normal(0.0, 1.0 / math.sqrt(d_model), (vocab_size, d_model)))
        self.standard = [TransformerDecoderLayer(d_model, d_ff, heads, rng, dropout) for _ in range(n_standard)]
        self.switch = [SwitchTransformerDecoderLayer(d_model, d_ff, heads, rng, dropout) for _ in range(n_switch)]
        self.norm = LayerNorm(d_model)
        self.out = Linear(d_model, vocab_size, rng)
        self._d_model = d_model
        self._dropout = dropout


def causal_mask(U: int) -> np.ndarray:
    return np.tril(np.ones((U, U), dtype=bool))


def decoder_forward(decoder: Decoder, tokens, memory: Tensor, memory_valid: np.ndarray,
                    token_lengths=None, rng=None) -> DecoderOutput:
    """Teacher-forced pass over ``tokens`` ([U] or [B, U] ints, sos-prefixed).

    Direction is a property of the inputs: the R2L decoder is fed the reversed
    sequence. Positions past ``token_lengths`` are padding and only ever
    attended to by later padding positions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    B, U = tokens.shape
    if U == 0:
        raise ValueError("decoder input is empty")
    if memory.ndim == 2:
        memory = memory.reshape(1, *memory.shape)
    memory_valid = np.asarray(memory_valid, dtype=bool).reshape(memory.shape[0], memory.shape[1])
    if token_lengths is None:
        token_lengths = np.full(B, U)
    valid = np.arange(U)[None, :] < np.asarray(token_lengths)[:, None]

    d = decoder._d_model
    x = decoder.embed[tokens] * math.sqrt(d) + Tensor(sinusoidal_positions(U, d))
    x = nx.dropout(x, decoder._dropout, rng, decoder.training)
    self_mask = causal_mask(U)[None]
    src_mask = memory_valid[:, None, :]
    for layer in decoder.standard:
        x = layer(x, memory, self_mask, src_mask, rng)
    out = DecoderOutput(logits=None)
    for layer in decoder.switch:
        x, logits, idx = st_decoder_layer_forward(layer, x, memory, self_mask, src_mask, rng, valid)
        out.router_logits.append(logits)
        out.indices.append(idx)
    out.logits = decoder.out(decoder.norm(x))
    return out
