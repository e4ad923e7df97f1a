import math

import numpy as np
import pytest

from scmoe import numerics as nx
from scmoe.decoder import (Decoder, SwitchTransformerDecoderLayer, causal_mask, decoder_forward,
                           st_decoder_layer_forward)
from scmoe.layers import sinusoidal_positions
from scmoe.numerics import Tensor
from scmoe.routing import route_probs

V, D, FF, H = 9, 8, 12, 2


def make_decoder(seed=0, k=1, g=1):
    return Decoder(V, D, FF, H, k, g, np.random.default_rng(seed), dropout=0.0).eval()


def memory(rng, T=5):
    return Tensor(rng.normal(size=(T, D))), np.ones(T, dtype=bool)


def test_shapes_and_grid_count(rng):
    dec = make_decoder(g=2)
    mem, valid = memory(rng)
    out = decoder_forward(dec, [8, 1, 2, 3], mem, valid)
    assert out.logits.shape == (1, 4, V)
    assert len(out.router_logits) == 2 and out.router_logits[0].shape == (1, 4, 2)


def test_empty_input_rejected(rng):
    mem, valid = memory(rng)
    with pytest.raises(ValueError):
        decoder_forward(make_decoder(), np.zeros((1, 0), dtype=int), mem, valid)


def test_self_attention_causality(rng):
    dec = make_decoder(g=1)
    mem, valid = memory(rng)
    toks = np.array([8, 1, 2, 3, 4, 5])
    base = decoder_forward(dec, toks, mem, valid).logits.data
    for u in range(len(toks) - 1):
        t2 = toks.copy()
        t2[u + 1:] = (t2[u + 1:] + 3) % 8 + 1
        moved = decoder_forward(dec, t2, mem, valid).logits.data
        np.testing.assert_array_equal(moved[0, : u + 1], base[0, : u + 1])


def test_r2l_palindrome_matches_l2r(rng):
    l2r, r2l = make_decoder(seed=3), make_decoder(seed=3)
    mem, valid = memory(rng)
    y = [1, 4, 2, 4, 1]
    a = decoder_forward(l2r, [8] + y, mem, valid).logits.data
    b = decoder_forward(r2l, [8] + y[::-1], mem, valid).logits.data
    np.testing.assert_array_equal(a, b)


def _st_setup(rng):
    layer = SwitchTransformerDecoderLayer(D, FF, H, rng, dropout=0.0)
    x = Tensor(rng.normal(size=(1, 4, D)))
    mem = Tensor(rng.normal(size=(1, 5, D)))
    return layer, x, mem, causal_mask(4)[None], np.ones((1, 1, 5), dtype=bool)


def _expert_path(layer, x, mem, sm, src, expert, gate):
    h = layer._attend(x, mem, sm, src, None)
    return h.data + gate * layer.smoe.experts[expert](layer.norm_ffn(h)).data


def test_st_saturated_router_uses_selected_expert(rng):
    layer, x, mem, sm, src = _st_setup(rng)
    layer.smoe.router.weight.data[...] = 0.0
    layer.smoe.router.bias.data[...] = [0.0, 40.0]
    out, logits, idx = st_decoder_layer_forward(layer, x, mem, sm, src)
    assert (idx == 1).all()
    assert np.abs(out.data - _expert_path(layer, x, mem, sm, src, 1, 1.0)).max() < 1e-6


def test_st_zero_router_is_half_expert0(rng):
    layer, x, mem, sm, src = _st_setup(rng)
    layer.smoe.router.weight.data[...] = 0.0
    out, _, idx = st_decoder_layer_forward(layer, x, mem, sm, src)
    assert (idx == 0).all()
    np.testing.assert_allclose(out.data, _expert_path(layer, x, mem, sm, src, 0, 0.5), rtol=1e-13)


def test_st_dense_oracle_and_router_reads_layer_input(rng):
    layer, x, mem, sm, src = _st_setup(rng)
    layer.smoe.router.weight.data *= 10
    layer.smoe.reset_counters()
    out, logits, idx = st_decoder_layer_forward(layer, x, mem, sm, src)
    assert layer.smoe.expert_rows == 4  # one expert per position
    h = layer._attend(x, mem, sm, src, None)
    z = layer.norm_ffn(h).data
    probs = route_probs(layer.smoe.router, x)[0].data
    np.testing.assert_array_equal(logits.data, layer.smoe.router(x).data)
    dense = np.stack([e(Tensor(z)).data for e in layer.smoe.experts], axis=-2)
    sel = np.take_along_axis(dense, idx[..., None, None], axis=-2)[..., 0, :]
    gate = np.take_along_axis(probs, idx[..., None], axis=-1)
    np.testing.assert_array_equal(out.data, h.data + sel * gate)


def test_g0_is_plain_transformer_decoder(rng):
    dec = make_decoder(k=2, g=0)
    mem, valid = memory(rng)
    toks = np.array([[8, 3, 1, 6]])
    out = decoder_forward(dec, toks, mem, valid)
    x = dec.embed[toks] * math.sqrt(D) + Tensor(sinusoidal_positions(4, D))
    for layer in dec.standard:
        x = layer(x, mem.reshape(1, 5, D), causal_mask(4)[None], valid[None, None, :])
    np.testing.assert_array_equal(out.logits.data, dec.out(dec.norm(x)).data)
    assert out.router_logits == []


def test_padded_batch_matches_single(rng):
    dec = make_decoder()
    mem = Tensor(rng.normal(size=(2, 6, D)))
    mvalid = np.array([[True] * 6, [True] * 4 + [False] * 2])
    toks = np.array([[8, 1, 2, 3], [8, 5, 8, 8]])
    out = decoder_forward(dec, toks, mem, mvalid, token_lengths=[4, 2])
    single = decoder_forward(dec, [8, 5], Tensor(mem.data[1, :4]), np.ones(4, dtype=bool))
    np.testing.assert_allclose(out.logits.data[1, :2], single.logits.data[0], atol=1e-12)


def test_decoder_grad(rng):
    dec = make_decoder()
    mem, valid = memory(rng, T=3)
    w = rng.normal(size=(1, 3, V))
    f = lambda *_: nx.tsum(decoder_forward(dec, [8, 2, 5], mem, valid).logits * w)
    report = nx.grad_check(f, dec.parameters() + [mem], max_elements=3, rng=rng)
    assert report.passed, report
