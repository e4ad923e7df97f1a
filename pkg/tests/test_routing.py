import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scmoe import numerics as nx
from scmoe.numerics import ShapeError, Tensor, grad_check
from scmoe.routing import (BLANK_EXPERT, ENCODER_EXPERTS, Router, RouterSharing, StreamingMoELayer,
                           build_encoder_routers, dense_moe_reference, route_probs, routing_stats,
                           select_expert, smoe_forward)

D, F = 6, 10


def make_layer(rng, n_experts=3, dropout=0.0):
    return StreamingMoELayer(D, F, n_experts, Router(D, n_experts, rng), rng, dropout)


def test_zero_router_gives_uniform_probs(rng):
    r = Router(D, 3, rng)
    r.weight.data[...] = 0.0
    p, logits = route_probs(r, Tensor(rng.normal(size=(5, D))))
    np.testing.assert_allclose(p.data, 1 / 3, rtol=1e-15)
    assert logits.shape == (5, 3)


def test_saturated_bias_router(rng):
    r = Router(D, 3, rng)
    r.weight.data[...] = 0.0
    r.bias.data[...] = [10.0, 0.0, 0.0]
    p, _ = route_probs(r, Tensor(rng.normal(size=(4, D))))
    assert (p.data[:, 0] > 0.9999).all()


def test_route_probs_direct_evaluation(rng):
    r = Router(D, 3, rng)
    r.bias.data[...] = rng.normal(size=3)
    h = rng.normal(size=(7, D))
    z = h @ r.weight.data + r.bias.data
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    got_p, got_z = route_probs(r, Tensor(h))
    np.testing.assert_allclose(got_z.data, z, rtol=1e-13)
    np.testing.assert_allclose(got_p.data, p, rtol=1e-13)
    with pytest.raises(ShapeError):
        route_probs(r, Tensor(np.ones((2, D + 1))))


def test_select_expert_examples():
    assert select_expert(np.array([0.2, 0.7, 0.1])) == 1
    assert select_expert(np.array([1 / 3, 1 / 3, 1 / 3])) == 0


@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(-100, 100), st.floats(0.01, 50))
def test_argmax_invariant_under_shift_and_scale(logits, c, s):
    z = np.array(logits)
    base = select_expert(nx.softmax(Tensor(z)))
    assert select_expert(nx.softmax(Tensor(z + c))) == base
    assert select_expert(z * s) == select_expert(z)


def test_smoe_saturated_router_equals_expert0(rng):
    layer = make_layer(rng)
    layer.router.weight.data[...] = 0.0
    layer.router.bias.data[...] = [30.0, 0.0, 0.0]
    x, h = Tensor(rng.normal(size=(5, D))), Tensor(rng.normal(size=(5, D)))
    out = smoe_forward(layer, x, h)
    assert (out.indices == 0).all()
    assert np.abs(out.out.data - layer.experts[0](x).data).max() < 1e-6


def test_smoe_zero_router_is_third_of_expert0(rng):
    layer = make_layer(rng)
    layer.router.weight.data[...] = 0.0
    x = Tensor(rng.normal(size=(4, D)))
    out = smoe_forward(layer, x, Tensor(rng.normal(size=(4, D))))
    np.testing.assert_allclose(out.out.data, layer.experts[0](x).data / 3, rtol=1e-14)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_smoe_matches_dense_oracle_bitwise(seed, T):
    rng = np.random.default_rng(seed)
    layer = make_layer(rng)
    layer.router.weight.data *= 8.0  # spread the routing over all experts
    x, h = Tensor(rng.normal(size=(T, D))), Tensor(rng.normal(size=(T, D)))
    out = smoe_forward(layer, x, h)
    np.testing.assert_array_equal(out.out.data, dense_moe_reference(layer, x, h).data)


def test_router_reads_h_not_x(rng):
    layer = make_layer(rng)
    layer.router.weight.data *= 8.0
    x, h = Tensor(rng.normal(size=(9, D))), Tensor(rng.normal(size=(9, D)))
    a = smoe_forward(layer, x, h).indices
    b = smoe_forward(layer, Tensor(rng.normal(size=(9, D))), h).indices
    np.testing.assert_array_equal(a, b)


def test_expert_counter_counts_frames_once(rng):
    layer = make_layer(rng)
    for T in (1, 5, 13):
        layer.reset_counters()
        smoe_forward(layer, Tensor(rng.normal(size=(T, D))), Tensor(rng.normal(size=(T, D))))
        assert layer.expert_rows == T
    layer.reset_counters()
    valid = np.array([True, True, False, False])
    out = smoe_forward(layer, Tensor(rng.normal(size=(4, D))), Tensor(rng.normal(size=(4, D))), valid=valid)
    assert layer.expert_rows == 2
    np.testing.assert_array_equal(out.out.data[2:], 0.0)


def test_smoe_time_axis_mismatch(rng):
    layer = make_layer(rng)
    with pytest.raises(ShapeError):
        smoe_forward(layer, Tensor(np.ones((3, D))), Tensor(np.ones((4, D))))


def test_smoe_grad_includes_router_path(rng):
    layer = make_layer(rng)
    layer.router.weight.data *= 4.0
    x, h = Tensor(rng.normal(size=(6, D))), Tensor(rng.normal(size=(6, D)))
    probs = route_probs(layer.router, h)[0].data
    top2 = np.sort(probs, axis=1)[:, -2:]
    assert (top2[:, 1] - top2[:, 0] > 1e-3).all()  # no near-ties
    w = rng.normal(size=(6, D))
    params = [x, h, layer.router.weight, layer.router.bias] + layer.experts[0].parameters()
    report = grad_check(lambda *_: nx.tsum(smoe_forward(layer, x, h).out * w), params)
    assert report.passed, report
    # gate multiplier: the router bias receives a non-zero gradient
    layer.zero_grad()
    nx.backward(nx.tsum(smoe_forward(layer, x, h).out * w))
    assert np.abs(layer.router.bias.grad).sum() > 0


def test_decoder_sized_layer(rng):
    layer = make_layer(rng, n_experts=2)
    assert len(layer.experts) == 2
    with pytest.raises(ValueError):
        StreamingMoELayer(D, F, 3, Router(D, 2, rng), rng)
    with pytest.raises(ValueError):
        Router(D, 1, rng)


# ---------------------------------------------------------------- sharing and statistics

def test_router_sharing_topologies(rng):
    r1 = build_encoder_routers("R1", 3, D, rng)
    assert len({id(r) for pair in r1 for r in pair}) == 1
    r2 = build_encoder_routers(RouterSharing.R2, 3, D, rng)
    assert len({id(r) for pair in r2 for r in pair}) == 6
    r3 = build_encoder_routers("R3", 3, D, rng)
    assert all(a is b for a, b in r3) and len({id(a) for a, _ in r3}) == 3
    with pytest.raises(ValueError):
        build_encoder_routers("R4", 1, D, rng)


def test_routing_stats_examples():
    s = routing_stats([np.full(7, BLANK_EXPERT)], ENCODER_EXPERTS)
    assert s.counts.tolist() == [[0, 0, 7]]
    same = [np.array([0, 1, 2, 1]), np.array([0, 1, 2, 1])]
    np.testing.assert_array_equal(routing_stats(same, 3).agreement, np.ones((2, 2)))
    mixed = routing_stats([np.array([0, 1, 2, 1]), np.array([0, 0, 2, 2])], 3)
    assert mixed.agreement[0, 1] == 0.5
    assert mixed.counts.sum(axis=1).tolist() == [4, 4]
    d = mixed.as_dict()
    assert d["fractions"][1] == [0.5, 0.0, 0.5]
    with pytest.raises(ValueError):
        routing_stats([np.zeros(3), np.zeros(4)], 3)
