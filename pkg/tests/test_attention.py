"""Attention variants: reference-oracle equality, SKA losslessness, masks, cache."""

import numpy as np
import pytest

from rodimus.attention import (
    AttentionParams,
    KVWindowCache,
    MaskSpec,
    attend,
    attention_forward,
    cache_floats_per_token,
    ska_equivalence_construct,
    ska_forward,
)
from rodimus.errors import ConfigError, DomainError
from rodimus.rng import Rng
from rodimus.tensor import Tensor


def softmax_np(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    e = np.where(np.isneginf(z), 0.0, e)
    return e / e.sum(axis=-1, keepdims=True)


def reference_attention(q, k, v, visible):
    """Per-position loop oracle: softmax over visible history, weighted sum."""
    T, d_h = q.shape
    out = np.zeros_like(v)
    for t in range(T):
        idx = [i for i in range(T) if visible(t, i)]
        logits = np.array([q[t] @ k[i] for i in idx]) / np.sqrt(d_h)
        w = softmax_np(logits)
        out[t] = sum(wi * v[i] for wi, i in zip(w, idx))
    return out


def test_attend_matches_reference_causal_and_window():
    rng = Rng(21, 0)
    T, d_h = 10, 5
    q, k, v = rng.normal((T, d_h)), rng.normal((T, d_h)), rng.normal((T, d_h))
    got = attend(Tensor(q), Tensor(k), Tensor(v), MaskSpec("causal")).data
    np.testing.assert_allclose(got, reference_attention(q, k, v, lambda t, i: i <= t), rtol=1e-10, atol=1e-12)
    w = 3
    got = attend(Tensor(q), Tensor(k), Tensor(v), MaskSpec("sliding_window", w)).data
    oracle = reference_attention(q, k, v, lambda t, i: t - w < i <= t)
    np.testing.assert_allclose(got, oracle, rtol=1e-10, atol=1e-12)


def test_mask_validation():
    with pytest.raises(ConfigError):
        MaskSpec("banded")
    with pytest.raises(ConfigError):
        MaskSpec("sliding_window")
    with pytest.raises(ConfigError):
        MaskSpec("sliding_window", 0)


def test_mask_additive_pattern():
    m = MaskSpec("sliding_window", 2).additive(4)
    visible = m == 0.0
    expected = np.array(
        [
            [1, 0, 0, 0],
            [1, 1, 0, 0],
            [0, 1, 1, 0],
            [0, 0, 1, 1],
        ],
        dtype=bool,
    )
    np.testing.assert_array_equal(visible, expected)


def test_gqa_and_mqa_head_sharing():
    rng = Rng(22, 0)
    d, h, d_h, T = 8, 4, 2, 6
    x = rng.normal((T, d))
    # g_kv = h degenerates to per-head kv == MHA with the same weights
    gqa = AttentionParams.init("gqa", d, h, d_h, rng, g_kv=h)
    mha = AttentionParams.init("mha", d, h, d_h, rng)
    mha.w_q, mha.w_k, mha.w_v, mha.w_o = gqa.w_q, gqa.w_k, gqa.w_v, gqa.w_o
    got = attention_forward(Tensor(x), gqa, MaskSpec("causal")).data
    want = attention_forward(Tensor(x), mha, MaskSpec("causal")).data
    np.testing.assert_allclose(got, want, atol=1e-12)
    with pytest.raises(ConfigError):
        AttentionParams.init("gqa", d, h, d_h, rng, g_kv=3)


def test_ska_single_head_equals_mha():
    rng = Rng(23, 0)
    d, d_h, T = 6, 3, 5
    x = rng.normal((T, d))
    ska = AttentionParams.init("ska", d, 1, d_h, rng)
    mha = AttentionParams.init("mha", d, 1, d_h, rng)
    mha.w_q = ska.w_q
    mha.w_k = Tensor(ska.w_k.data[None, :, :])
    mha.w_v = ska.w_v
    mha.w_o = ska.w_o
    got = ska_forward(Tensor(x), ska, MaskSpec("causal")).data
    want = attention_forward(Tensor(x), mha, MaskSpec("causal")).data
    np.testing.assert_allclose(got, want, atol=1e-12)
    with pytest.raises(ConfigError):
        ska_forward(Tensor(x), mha, MaskSpec("causal"))


def test_ska_equivalence_construct_logits_match():
    rng = Rng(24, 0)
    d, h, T = 10, 3, 8
    x = rng.normal((T, d))
    wk_tilde = rng.normal((d, d)) + 2.0 * np.eye(d)
    worst = 0.0
    for head in range(h):
        w_q = rng.normal((d, d))
        w_k = rng.normal((d, d))
        wq_new = ska_equivalence_construct(w_q, w_k, wk_tilde)
        base = (x @ w_q) @ (x @ w_k).T
        rebased = (x @ wq_new) @ (x @ wk_tilde).T
        worst = max(worst, np.abs(base - rebased).max())
    assert worst <= 1e-8


def test_ska_equivalence_condition_guard():
    w = np.eye(4)
    w[0, 0] = 1e12  # condition number 1e12
    with pytest.raises(DomainError):
        ska_equivalence_construct(np.eye(4), np.eye(4), w, cond_bound=1e6, allow_pinv=False)
    # pinv fallback allowed by default
    out = ska_equivalence_construct(np.eye(4), np.eye(4), w, cond_bound=1e6)
    assert np.all(np.isfinite(out))


def test_window_cache_eviction_and_floats():
    cache = KVWindowCache(3)
    for t in range(5):
        cache.step(Tensor(np.full(2, float(t))), Tensor(np.full((2, 2), float(t))))
    assert len(cache) == 3
    np.testing.assert_array_equal(cache.keys().data[..., 0], [2.0, 3.0, 4.0])
    assert cache.float_count() == 3 * (2 + 4)
    with pytest.raises(ConfigError):
        KVWindowCache(0)


def test_cache_floats_per_token_closed_form_and_ordering():
    h, d_h, g_kv = 8, 16, 2
    mha = cache_floats_per_token("mha", h, d_h)
    gqa = cache_floats_per_token("gqa", h, d_h, g_kv)
    ska = cache_floats_per_token("ska", h, d_h)
    assert mha == 2 * h * d_h
    assert gqa == 2 * g_kv * d_h
    assert ska == (1 + h) * d_h
    assert gqa < ska < mha
