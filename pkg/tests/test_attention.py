import numpy as np
import pytest

from adaptvig import attention as A
from adaptvig import tensor as T
from adaptvig.tensor import Tensor
from oracles import attention_direct


@pytest.fixture
def setup():
    rng = np.random.default_rng(0)
    c = 4
    p = A.AttentionParams.init(rng, c)
    for conv in (p.wq, p.wk, p.wv):
        conv.weight.data[...] = rng.standard_normal(conv.weight.shape)
        conv.bias.data[...] = rng.standard_normal(conv.bias.shape)
    x = rng.standard_normal((2, c, 3, 5))
    return p, x


def test_matches_direct_formula(setup):
    p, x = setup
    q, k, v = A.qkv_project(Tensor(x), p)
    got = T.from_tokens(A.attend(q, k, v, p.d_k, p.q_norm, p.k_norm), 3, 5).data
    w = lambda conv: conv.weight.data[:, :, 0, 0]
    ref, probs = attention_direct(x, w(p.wq), p.wq.bias.data, w(p.wk), p.wk.bias.data, w(p.wv), p.wv.bias.data)
    np.testing.assert_allclose(got, ref, atol=1e-12)
    np.testing.assert_allclose(A.attention_weights(q, k, p.d_k).data, probs, atol=1e-12)


def test_output_is_convex_combination(setup):
    p, x = setup
    q, k, v = A.qkv_project(Tensor(x), p)
    out = A.attend(q, k, v, p.d_k).data
    probs = A.attention_weights(q, k, p.d_k).data
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)
    lo, hi = v.data.min(axis=1, keepdims=True), v.data.max(axis=1, keepdims=True)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_single_token_returns_values():
    rng = np.random.default_rng(1)
    p = A.AttentionParams.init(rng, 3)
    x = Tensor(rng.standard_normal((2, 3, 1, 1)))
    q, k, v = A.qkv_project(x, p)
    np.testing.assert_allclose(A.attend(q, k, v, p.d_k).data, v.data, atol=1e-15)


def test_mix_shape_and_fusion(setup):
    p, x = setup
    assert A.attention_mix(Tensor(x), p).shape == x.shape


def test_key_norm_has_no_shift():
    p = A.AttentionParams.init(np.random.default_rng(0), 4)
    assert p.k_norm.shift is None and p.q_norm.shift is not None


def test_shape_errors():
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((1, 4, 3)))
    with pytest.raises(ValueError):
        A.attend(q, Tensor(rng.standard_normal((1, 5, 3))), q, 3)
    p = A.AttentionParams.init(rng, 4)
    with pytest.raises(ValueError):
        A.attention_mix(Tensor(rng.standard_normal((1, 3, 2, 2))), p)
