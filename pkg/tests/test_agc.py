import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptvig import agc
from adaptvig import tensor as T
from adaptvig.layers import ConvBlock
from adaptvig.tensor import Tensor
from oracles import agc_loop


def test_gate_closed_forms():
    d = Tensor(np.array([0.0, 1.0, 2.0]).reshape(1, 1, 1, 3))
    g1 = agc.gate_map(d, agc.GatingParams(1.0)).data.ravel()
    assert g1[0] == 1.0
    assert g1[1] == pytest.approx(math.exp(-1 / (1 + 1e-6)), abs=1e-15)
    g2 = agc.gate_map(d, agc.GatingParams(0.5)).data.ravel()
    assert g2[2] == pytest.approx(math.exp(-2 / (0.5 + 1e-6)), abs=1e-15)


def test_gate_rejects_negative_distance():
    with pytest.raises(ValueError):
        agc.gate_map(Tensor(np.full((1, 1, 1, 1), -0.1)), agc.GatingParams(1.0))


def test_gate_uses_absolute_temperature():
    d = Tensor(np.full((1, 1, 1, 1), 0.7))
    a = agc.gate_map(d, agc.GatingParams(-2.0)).data
    b = agc.gate_map(d, agc.GatingParams(2.0)).data
    np.testing.assert_array_equal(a, b)


def test_sigmoid_gate_is_one_at_zero():
    d = Tensor(np.zeros((1, 1, 2, 2)))
    np.testing.assert_allclose(agc.gate_map(d, agc.GatingParams(1.0), "sigmoid").data, 1.0, atol=1e-15)


@settings(max_examples=100, deadline=None)
# d / t stays below 500 so exp does not underflow to 0
@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 10))
def test_gate_bounds_monotone(d1, d2, t):
    p = agc.GatingParams(t)
    g = agc.gate_map(Tensor(np.array([d1, d2]).reshape(1, 1, 1, 2)), p).data.ravel()
    assert np.all(g > 0) and np.all(g <= 1)
    if d1 <= d2:
        assert g[0] >= g[1]


@pytest.mark.parametrize(
    "h,w,k,count,gated",
    [(14, 14, 2, 8, [2, 4, 8]), (7, 7, 2, 6, [2, 4]), (2, 2, 1, 4, [2])],
)
def test_scaffold_examples(h, w, k, count, gated):
    shifts = agc.scaffold_shifts(h, w, k)
    assert len(shifts) == count == agc.shift_count(h, w)
    assert shifts[0] == agc.Shift("height", k, False)
    assert shifts[1] == agc.Shift("width", k, False)
    assert [s.offset for s in shifts if s.gated and s.axis == "height"] == gated
    assert [s.offset for s in shifts if s.gated and s.axis == "width"] == gated


def test_scaffold_order_height_before_width():
    axes = [s.axis for s in agc.scaffold_shifts(8, 16, 3) if s.gated]
    assert axes == ["height"] * 3 + ["width"] * 4


@pytest.mark.parametrize("k", [0, 7, 8])
def test_scaffold_rejects_k(k):
    with pytest.raises(ValueError):
        agc.scaffold_shifts(7, 9, k)


def test_config_validation():
    with pytest.raises(ValueError):
        agc.AGCConfig(1, "relu")
    with pytest.raises(ValueError):
        agc.AGCConfig(1, distance_kind="L3")
    with pytest.raises(ValueError):
        agc.AGCConfig(0)


@pytest.mark.parametrize("gate,dist", [("exp_decay", "L1"), ("sigmoid", "L1"), ("exp_decay", "L2"), ("sigmoid", "L2")])
@pytest.mark.parametrize("k", [1, 2])
def test_aggregate_matches_loop(k, gate, dist):
    rng = np.random.default_rng(k)
    x = rng.standard_normal((2, 3, 5, 8))
    t = 0.8
    got = agc.agc_aggregate(Tensor(x), agc.AGCConfig(k, gate, dist), agc.GatingParams(t)).data
    np.testing.assert_allclose(got, agc_loop(x, k, t, gate=gate, dist=dist), rtol=0, atol=1e-12)


def test_aggregate_is_nonnegative_and_zero_for_constant():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)))
    assert np.all(agc.agc_aggregate(x, agc.AGCConfig(1), agc.GatingParams(1.0)).data >= 0)
    c = Tensor(np.full((2, 3, 8, 8), 0.37))
    assert np.all(agc.agc_aggregate(c, agc.AGCConfig(2), agc.GatingParams(1.0)).data == 0)


def test_step_counter():
    stats = {}
    agc.agc_aggregate(Tensor(np.zeros((1, 1, 16, 8))), agc.AGCConfig(1), agc.GatingParams(1.0), stats)
    assert stats["steps"] == 2 + 4 + 3


def test_temperature_gradient_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d, t = rng.uniform(0, 4), rng.uniform(0.2, 3)
        p = agc.GatingParams(t)
        g = agc.gate_map(Tensor(np.full((1, 1, 1, 1), d)), p)
        T.backward(T.total(g))
        te = t + p.eps
        assert p.T.grad.item() == pytest.approx(math.exp(-d / te) * d / te**2, rel=1e-12, abs=1e-15)


def test_temperature_gradient_sign_at_negative_t():
    p = agc.GatingParams(-1.0)
    T.backward(T.total(agc.gate_map(Tensor(np.full((1, 1, 1, 1), 1.0)), p)))
    assert p.T.grad.item() < 0


def test_agc_forward_checks_projection():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 4, 4, 4)))
    good = ConvBlock.init(rng, 8, 4)
    assert agc.agc_forward(x, agc.AGCConfig(1), agc.GatingParams(1.0), good).shape == (1, 4, 4, 4)
    with pytest.raises(ValueError):
        agc.agc_forward(x, agc.AGCConfig(1), agc.GatingParams(1.0), ConvBlock.init(rng, 4, 4))


class TestHeatmap:
    def test_self_gate_is_one(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 5, 5))
        hm = agc.gate_heatmap(x, (2, 3), 1.0)
        assert hm[2, 3] == 1.0 and np.all(hm <= 1.0)

    def test_two_regions(self):
        x = np.zeros((1, 2, 4, 4))
        x[:, :, :, 2:] = 1.0
        hm = agc.gate_heatmap(x, (0, 0), 1.0)
        assert sorted(np.unique(hm)) == pytest.approx([math.exp(-2 / (1 + 1e-6)), 1.0])

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            agc.gate_heatmap(np.zeros((1, 1, 3, 3)), (3, 0), 1.0)
