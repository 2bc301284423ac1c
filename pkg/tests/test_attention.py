from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmla.attention import (ATTENTION, MLA, AbsorbedMlaWeights, AttentionGeometry, KvCache, MhaWeights, absorb,
                            cache_footprint, cache_scalars_per_token, format_percent, init_mha_weights,
                            mha_forward, mla_forward_absorbed, mla_forward_naive, rope_apply)
from xmla.errors import CacheError, ContractError, GeometryError, UnsupportedError
from xmla.tensor import GradTape, Tensor
from xmla.upcycle import FixedRanks, random_init_attention

from conftest import GQA_GEO, SMALL_GEO, check_grads

LLAMA_1B = dict(d=2048, n_h=32, n_kv=8, d_h=64, d_qk=32, d_r=32, r_q=2048)


# -- independent oracles -------------------------------------------------------------
def rope_oracle(vec, pos, base=10000.0):
    """Rotate consecutive pairs of one head vector, written with scalar trig."""
    out = np.empty_like(vec)
    n = len(vec)
    for i in range(n // 2):
        ang = pos * base ** (-2.0 * i / n)
        a, b = vec[2 * i], vec[2 * i + 1]
        out[2 * i] = a * np.cos(ang) - b * np.sin(ang)
        out[2 * i + 1] = a * np.sin(ang) + b * np.cos(ang)
    return out


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def mha_oracle(h, w, geo):
    """Token-by-token causal GQA with per-head loops."""
    l = h.shape[0]
    out = np.zeros((l, geo.n_h * geo.d_h))
    group = geo.n_h // geo.n_kv
    for t in range(l):
        for i in range(geo.n_h):
            j = i // group
            qs, ks = slice(i * geo.d_h, (i + 1) * geo.d_h), slice(j * geo.d_h, (j + 1) * geo.d_h)
            q = rope_oracle(h[t] @ w.w_q.data[:, qs], t)
            scores = np.array([q @ rope_oracle(h[s] @ w.w_k.data[:, ks], s) for s in range(t + 1)])
            p = softmax(scores / np.sqrt(geo.d_h))
            out[t, qs] = sum(p[s] * (h[s] @ w.w_v.data[:, ks]) for s in range(t + 1))
    return out @ w.w_o.data


def mla_oracle(h, w, geo):
    """Unfused MLA: explicit latents, per-head keys/values, shared RoPE key."""
    l = h.shape[0]
    c_q = h @ w.w_dq.data
    c_kv = h @ w.w_dkv.data
    out = np.zeros((l, geo.n_h * geo.d_h))
    for t in range(l):
        for i in range(geo.n_h):
            qc = c_q[t] @ w.w_uq.data[:, i * geo.d_qk:(i + 1) * geo.d_qk]
            qr = rope_oracle(c_q[t] @ w.w_qr.data[:, i * geo.d_r:(i + 1) * geo.d_r], t)
            scores = []
            for s in range(t + 1):
                kc = c_kv[s] @ w.w_uk.data[:, i * geo.d_qk:(i + 1) * geo.d_qk]
                kr = rope_oracle(h[s] @ w.w_kr.data, s)
                scores.append(qc @ kc + qr @ kr)
            p = softmax(np.array(scores) / np.sqrt(geo.d_qk + geo.d_r))
            vs = slice(i * geo.d_h, (i + 1) * geo.d_h)
            out[t, vs] = sum(p[s] * (c_kv[s] @ w.w_uv.data[:, vs]) for s in range(t + 1))
    return out @ w.w_o.data


def mla_weights(geo, seed, ln=False):
    w = random_init_attention(geo, FixedRanks(geo.r_q, geo.r_kv), seed, enable_ln=ln)
    if ln:
        rng = np.random.default_rng(seed + 100)
        for name in ("ln_q_gain", "ln_q_bias", "ln_kv_gain", "ln_kv_bias"):
            t = getattr(w, name)
            t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    return w


# -- geometry ------------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    dict(n_kv=3), dict(d_qk=2), dict(d_r=10, d_qk=10), dict(r_q=17), dict(r_kv=17), dict(d=0), dict(n_h=2.0),
])
def test_geometry_validation(bad):
    base = SMALL_GEO.to_dict()
    base.update(bad)
    with pytest.raises(GeometryError):
        AttentionGeometry(**base)


def test_geometry_dict_roundtrip():
    assert AttentionGeometry.from_dict(SMALL_GEO.to_dict()) == SMALL_GEO
    with pytest.raises(GeometryError):
        AttentionGeometry.from_dict({**SMALL_GEO.to_dict(), "extra": 1})


# -- RoPE ------------------------------------------------------------------------
def test_rope_position_zero_identity(rng):
    x = rng.standard_normal((1, 8))
    np.testing.assert_array_equal(rope_apply(Tensor(x), [0], 4).data, x)


def test_rope_unit_rotation():
    for p in (0, 1, 5, 37):
        out = rope_apply(Tensor([[1.0, 0.0]]), [p], 2).data[0]
        np.testing.assert_allclose(out, [np.cos(p), np.sin(p)], atol=1e-15)


def test_rope_matches_scalar_oracle(rng):
    x = rng.standard_normal((5, 12))
    pos = [0, 3, 4, 10, 200]
    out = rope_apply(Tensor(x), pos, 6).data
    for t in range(5):
        for hd in range(2):
            np.testing.assert_allclose(out[t, hd * 6:(hd + 1) * 6], rope_oracle(x[t, hd * 6:(hd + 1) * 6], pos[t]),
                                       atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100000), st.integers(0, 2 ** 31 - 1))
def test_rope_isometry(pos, seed):
    x = np.random.default_rng(seed).standard_normal((1, 16)) * 10
    out = rope_apply(Tensor(x), [pos], 8).data
    np.testing.assert_allclose(np.hypot(out[0, ::2], out[0, 1::2]), np.hypot(x[0, ::2], x[0, 1::2]),
                               rtol=0, atol=1e-12 * 10)


def test_rope_gradient(rng):
    assert check_grads(lambda x: (rope_apply(x, [1, 4, 9], 4) * np.arange(24.0).reshape(3, 8)).sum(),
                       [rng.standard_normal((3, 8))]) <= 1e-6


def test_rope_odd_width():
    with pytest.raises(GeometryError):
        rope_apply(Tensor(np.ones((1, 3))), [0], 3)


# -- MHA/GQA ---------------------------------------------------------------------
def test_mha_single_token(gqa_weights, rng):
    h = rng.standard_normal((1, GQA_GEO.d))
    out, _ = mha_forward(Tensor(h), gqa_weights, GQA_GEO)
    v = h @ gqa_weights.w_v.data
    v_full = np.repeat(v.reshape(GQA_GEO.n_kv, GQA_GEO.d_h), GQA_GEO.group, axis=0).reshape(1, -1)
    np.testing.assert_allclose(out.data, v_full @ gqa_weights.w_o.data, atol=1e-12)


@pytest.mark.parametrize("geo", [GQA_GEO, SMALL_GEO])
def test_mha_matches_oracle(geo):
    w = init_mha_weights(geo, np.random.default_rng(3))
    h = np.random.default_rng(4).standard_normal((3, geo.d))
    out, _ = mha_forward(Tensor(h), w, geo)
    assert np.abs(out.data - mha_oracle(h, w, geo)).max() <= 1e-10


def test_gqa_degenerates_to_mha(rng):
    geo = SMALL_GEO  # n_kv == n_h
    w = init_mha_weights(geo, rng)
    h = rng.standard_normal((5, geo.d))
    out, _ = mha_forward(Tensor(h), w, geo)
    # plain MHA: no head repetition at all
    from xmla import tensor as T
    from xmla.attention import _attend, _merge_heads, _split_heads, causal_mask
    pos = np.arange(5)
    q = _split_heads(rope_apply(Tensor(h @ w.w_q.data), pos, geo.d_h), geo.n_h)
    k = _split_heads(rope_apply(Tensor(h @ w.w_k.data), pos, geo.d_h), geo.n_h)
    v = _split_heads(Tensor(h @ w.w_v.data), geo.n_h)
    s = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1 / np.sqrt(geo.d_h))
    ref = _merge_heads(_attend(s, v, causal_mask(5, 0))).data @ w.w_o.data
    np.testing.assert_array_equal(out.data, ref)


# -- MLA ---------------------------------------------------------------------------
def test_mla_naive_matches_unfused_oracle():
    geo = SMALL_GEO
    w = mla_weights(geo, 0)
    h = np.random.default_rng(1).standard_normal((4, geo.d))
    out, _ = mla_forward_naive(Tensor(h), w, geo)
    assert np.abs(out.data - mla_oracle(h, w, geo)).max() <= 1e-10


def test_mla_single_token(rng):
    geo = SMALL_GEO
    w = mla_weights(geo, 2)
    h = rng.standard_normal((1, geo.d))
    out, _ = mla_forward_naive(Tensor(h), w, geo)
    np.testing.assert_allclose(out.data, (h @ w.w_dkv.data @ w.w_uv.data) @ w.w_o.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_absorbed_equals_naive(seed):
    geo = [SMALL_GEO, GQA_GEO.with_ranks(10, 7)][seed % 2]
    w = mla_weights(geo, seed)
    h = np.random.default_rng(seed).standard_normal((2, 5, geo.d))
    a, _ = mla_forward_naive(Tensor(h), w, geo)
    b, _ = mla_forward_absorbed(Tensor(h), absorb(w, geo), geo)
    assert np.abs(a.data - b.data).max() <= 1e-10 * max(1.0, np.abs(a.data).max())


def test_absorbed_single_precision():
    geo = SMALL_GEO
    w = mla_weights(geo, 9)
    h = np.random.default_rng(9).standard_normal((6, geo.d))
    a, _ = mla_forward_naive(Tensor(h), w, geo)
    w32 = type(w)(**{k: (None if v is None else v.astype(np.float32)) for k, v in w.__dict__.items()})
    aw32 = AbsorbedMlaWeights(**{k: (None if v is None else v.astype(np.float32))
                                 for k, v in absorb(w, geo).__dict__.items()})
    b, _ = mla_forward_absorbed(Tensor(h.astype(np.float32)), aw32, geo)
    assert b.dtype == np.float32
    assert np.linalg.norm(a.data - b.data) / np.linalg.norm(a.data) <= 1e-5
    c, _ = mla_forward_naive(Tensor(h.astype(np.float32)), w32, geo)
    assert np.linalg.norm(a.data - c.data) / np.linalg.norm(a.data) <= 1e-5


def test_absorbed_full_rank_orthogonal(rng):
    geo = AttentionGeometry(d=16, n_h=2, n_kv=2, d_h=8, d_qk=4, d_r=4, r_q=16, r_kv=16)
    w = mla_weights(geo, 4)
    q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    w.w_dkv.data = q
    h = rng.standard_normal((4, geo.d))
    a, _ = mla_forward_naive(Tensor(h), w, geo)
    b, _ = mla_forward_absorbed(Tensor(h), absorb(w, geo), geo)
    assert np.abs(a.data - b.data).max() <= 1e-10


def test_absorb_contracts():
    geo = SMALL_GEO
    w = mla_weights(geo, 6, ln=True)
    with pytest.raises(UnsupportedError):
        absorb(w, geo)
    aw = absorb(mla_weights(geo, 6), geo)
    with pytest.raises(ContractError):
        absorb(aw, geo)
    with pytest.raises(ContractError):
        mla_forward_absorbed(Tensor(np.ones((1, geo.d))), mla_weights(geo, 6), geo)


# -- causality and caches ----------------------------------------------------------
@pytest.mark.parametrize("kind", [ATTENTION, MLA, "absorbed"])
def test_causality_exact(kind, rng):
    geo = GQA_GEO
    if kind == ATTENTION:
        w, fwd = init_mha_weights(geo, rng), mha_forward
    elif kind == MLA:
        w, fwd = mla_weights(geo, 1), mla_forward_naive
    else:
        w, fwd = absorb(mla_weights(geo, 1), geo), mla_forward_absorbed
    h = rng.standard_normal((6, geo.d))
    a, _ = fwd(Tensor(h), w, geo)
    h2 = h.copy()
    h2[4:] += rng.standard_normal((2, geo.d))
    b, _ = fwd(Tensor(h2), w, geo)
    np.testing.assert_array_equal(a.data[:4], b.data[:4])
    assert np.abs(a.data[4:] - b.data[4:]).max() > 0


@pytest.mark.parametrize("kind", [ATTENTION, MLA, "absorbed"])
def test_incremental_equals_full(kind, rng):
    geo = GQA_GEO
    if kind == ATTENTION:
        w, fwd, ck = init_mha_weights(geo, rng), mha_forward, KvCache.full
    elif kind == MLA:
        w, fwd, ck = mla_weights(geo, 2), mla_forward_naive, KvCache.latent
    else:
        w, fwd, ck = absorb(mla_weights(geo, 2), geo), mla_forward_absorbed, KvCache.latent
    h = rng.standard_normal((7, geo.d))
    full, _ = fwd(Tensor(h), w, geo)
    cache = ck()
    per_tok = 2 * geo.n_kv * geo.d_h if kind == ATTENTION else geo.r_kv + geo.d_r
    parts = []
    for chunk in (h[:3], h[3:4], h[4:5], h[5:]):
        before = cache.scalars()
        out, cache = fwd(Tensor(chunk), w, geo, cache)
        assert cache.scalars() - before == per_tok * len(chunk)
        parts.append(out.data)
    assert cache.length == 7 and cache.per_token == per_tok
    assert np.abs(np.concatenate(parts) - full.data).max() <= 1e-12


def test_cache_kind_checks(gqa_weights):
    h = Tensor(np.ones((1, GQA_GEO.d)))
    with pytest.raises(CacheError):
        mha_forward(h, gqa_weights, GQA_GEO, KvCache.latent())
    with pytest.raises(CacheError):
        KvCache.latent().k
    with pytest.raises(CacheError):
        KvCache("bogus")
    c = KvCache.full()
    c.append(np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(CacheError):
        c.append(np.zeros((1, 5)), np.zeros((1, 4)))


def test_non_causal_sees_future(gqa_weights, rng):
    h = rng.standard_normal((3, GQA_GEO.d))
    a, _ = mha_forward(Tensor(h), gqa_weights, GQA_GEO, causal=False)
    h2 = h.copy()
    h2[2] += 1.0
    b, _ = mha_forward(Tensor(h2), gqa_weights, GQA_GEO, causal=False)
    assert np.abs(a.data[0] - b.data[0]).max() > 0


def test_batched_matches_unbatched(rng):
    geo = GQA_GEO
    w = mla_weights(geo, 3)
    h = rng.standard_normal((3, 4, geo.d))
    out, _ = mla_forward_naive(Tensor(h), w, geo)
    for b in range(3):
        single, _ = mla_forward_naive(Tensor(h[b]), w, geo)
        np.testing.assert_allclose(out.data[b], single.data, atol=1e-13)


# -- gradients through whole blocks ----------------------------------------------
def _block_loss(fwd, w, geo, h, names):
    def build(*ts):
        for n, t in zip(names, ts[1:]):
            setattr(w, n, t)
        out, _ = fwd(ts[0], w, geo)
        return (out * np.cos(np.arange(out.data.size)).reshape(out.shape)).sum()
    return build, [h] + [getattr(w, n).data.copy() for n in names]


def test_mha_block_gradients(rng):
    w = init_mha_weights(GQA_GEO, rng)
    build, inputs = _block_loss(mha_forward, w, GQA_GEO, rng.standard_normal((4, GQA_GEO.d)),
                                ["w_q", "w_k", "w_v", "w_o"])
    assert check_grads(build, inputs) <= 1e-6


def test_mla_block_gradients_with_ln(rng):
    geo = SMALL_GEO
    w = mla_weights(geo, 8, ln=True)
    names = ["w_dq", "w_uq", "w_qr", "w_dkv", "w_uk", "w_uv", "w_kr", "w_o",
             "ln_q_gain", "ln_q_bias", "ln_kv_gain", "ln_kv_bias"]
    build, inputs = _block_loss(mla_forward_naive, w, geo, rng.standard_normal((3, geo.d)), names)
    assert check_grads(build, inputs) <= 1e-4


# -- cache accounting ----------------------------------------------------------------
@pytest.mark.parametrize("r_kv,pct", [(512, "53.1250"), (256, "28.1250"), (128, "15.6250"), (64, "9.3750"),
                                      (48, "7.8125")])
def test_llama_footprints(r_kv, pct):
    geo = AttentionGeometry(**LLAMA_1B, r_kv=r_kv)
    fp = cache_footprint(geo, MLA, 1000, n_layers=16)
    assert format_percent(fp.percent) == pct
    assert fp.ratio == Fraction(r_kv + 32, 1024)
    assert fp.scalars == 16 * 1000 * (r_kv + 32) and fp.baseline == 16 * 1000 * 1024


def test_hybrid_footprint_and_breakeven():
    geo = AttentionGeometry(**LLAMA_1B, r_kv=512)
    kinds = [MLA if i in {1, 3, 5, 7, 8, 10, 12, 14} else ATTENTION for i in range(16)]
    assert format_percent(cache_footprint(geo, kinds, 7).percent) == "76.5625"
    even = AttentionGeometry(**LLAMA_1B, r_kv=992)
    assert cache_footprint(even, MLA, 5, 4).ratio == 1
    assert cache_scalars_per_token(geo, ATTENTION) == 1024


def test_format_percent_round_half_even():
    assert format_percent(Fraction(1, 8), 0) == "0"
    assert format_percent(Fraction(5, 2), 0) == "2"
    assert format_percent(Fraction(7, 2), 0) == "4"
    assert format_percent(Fraction(1, 3)) == "0.3333"
    assert format_percent(Fraction(-1, 3), 2) == "-0.33"


def test_footprint_errors():
    with pytest.raises(GeometryError):
        cache_footprint(SMALL_GEO, [MLA, ATTENTION], 3, n_layers=3)
    with pytest.raises(GeometryError):
        cache_scalars_per_token(SMALL_GEO, "rnn")


def test_mha_weights_check():
    w = MhaWeights(Tensor(np.ones((16, 32))), Tensor(np.ones((16, 16))), Tensor(np.ones((16, 16))),
                   Tensor(np.ones((32, 16))))
    w.check(GQA_GEO)
    with pytest.raises(Exception):
        w.check(SMALL_GEO)
