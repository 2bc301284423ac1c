"""MHA/GQA and multi-head latent attention with decoupled RoPE and KV caches.

Tensors carry optional leading batch dimensions: hidden states are
``(..., l, d)`` and caches store ``(..., L, width)`` arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import CacheError, ContractError, DimensionError, GeometryError, UnsupportedError
from .tensor import Tensor

ATTENTION = "attention"
MLA = "mla"
LAYER_KINDS = (ATTENTION, MLA)

MASK_VALUE = -1e30
DEFAULT_THETA = 10000.0


@dataclass(frozen=True)
class AttentionGeometry:
    """Shape parameters shared by the MHA donor and its MLA counterpart."""

    d: int
    n_h: int
    n_kv: int
    d_h: int
    d_qk: int
    d_r: int
    r_q: int
    r_kv: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise GeometryError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_h % self.n_kv:
            raise GeometryError(f"n_h={self.n_h} is not a multiple of n_kv={self.n_kv}")
        if self.d_qk != self.d_r:
            raise GeometryError(f"d_qk ({self.d_qk}) must equal d_r ({self.d_r})")
        if self.d_r > self.d_h:
            raise GeometryError(f"d_r ({self.d_r}) must not exceed d_h ({self.d_h})")
        if self.r_q > self.max_r_q:
            raise GeometryError(f"r_q={self.r_q} exceeds min(d, n_h*d_h)={self.max_r_q}")
        if self.r_kv > self.max_r_kv:
            raise GeometryError(f"r_kv={self.r_kv} exceeds min(d, 2*n_h*d_h)={self.max_r_kv}")

    @property
    def max_r_q(self) -> int:
        return min(self.d, self.n_h * self.d_h)

    @property
    def max_r_kv(self) -> int:
        return min(self.d, 2 * self.n_h * self.d_h)

    @property
    def group(self) -> int:
        return self.n_h // self.n_kv

    def with_ranks(self, r_q: int, r_kv: int) -> "AttentionGeometry":
        return replace(self, r_q=int(r_q), r_kv=int(r_kv))

    def as_mha(self) -> "AttentionGeometry":
        return replace(self, n_kv=self.n_h)

    def to_dict(self) -> dict:
        return {f.name: int(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionGeometry":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise GeometryError(f"unknown geometry keys: {sorted(unknown)}")
        missing = names - set(d)
        if missing:
            raise GeometryError(f"missing geometry keys: {sorted(missing)}")
        return cls(**{k: d[k] for k in names})


def _expect(t: Tensor, shape: tuple, name: str) -> None:
    if tuple(t.shape) != tuple(shape):
        raise DimensionError(f"{name} has shape {t.shape}, expected {shape}")


@dataclass
class MhaWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def check(self, geo: AttentionGeometry) -> None:
        _expect(self.w_q, (geo.d, geo.n_h * geo.d_h), "w_q")
        _expect(self.w_k, (geo.d, geo.n_kv * geo.d_h), "w_k")
        _expect(self.w_v, (geo.d, geo.n_kv * geo.d_h), "w_v")
        _expect(self.w_o, (geo.n_h * geo.d_h, geo.d), "w_o")

    def params(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class MlaWeights:
    w_dq: Tensor
    w_uq: Tensor
    w_qr: Tensor
    w_dkv: Tensor
    w_uk: Tensor
    w_uv: Tensor
    w_kr: Tensor
    w_o: Tensor
    ln_q_gain: Optional[Tensor] = None
    ln_q_bias: Optional[Tensor] = None
    ln_kv_gain: Optional[Tensor] = None
    ln_kv_bias: Optional[Tensor] = None

    @property
    def has_ln(self) -> bool:
        return self.ln_kv_gain is not None

    def check(self, geo: AttentionGeometry) -> None:
        d, nh = geo.d, geo.n_h
        _expect(self.w_dq, (d, geo.r_q), "w_dq")
        _expect(self.w_uq, (geo.r_q, nh * geo.d_qk), "w_uq")
        _expect(self.w_qr, (geo.r_q, nh * geo.d_r), "w_qr")
        _expect(self.w_dkv, (d, geo.r_kv), "w_dkv")
        _expect(self.w_uk, (geo.r_kv, nh * geo.d_qk), "w_uk")
        _expect(self.w_uv, (geo.r_kv, nh * geo.d_h), "w_uv")
        _expect(self.w_kr, (d, geo.d_r), "w_kr")
        _expect(self.w_o, (nh * geo.d_h, d), "w_o")
        ln = [self.ln_q_gain, self.ln_q_bias, self.ln_kv_gain, self.ln_kv_bias]
        if any(t is None for t in ln) and not all(t is None for t in ln):
            raise GeometryError("intermediate LayerNorm parameters must be all present or all absent")
        if self.has_ln:
            _expect(self.ln_q_gain, (geo.r_q,), "ln_q_gain")
            _expect(self.ln_q_bias, (geo.r_q,), "ln_q_bias")
            _expect(self.ln_kv_gain, (geo.r_kv,), "ln_kv_gain")
            _expect(self.ln_kv_bias, (geo.r_kv,), "ln_kv_bias")

    def params(self) -> dict[str, Tensor]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: v for k, v in out.items() if v is not None}


@dataclass
class AbsorbedMlaWeights:
    """MLA weights with the key/value up-projections folded away.

    ``w_q_abs`` maps hidden states straight to the per-head latent query
    (d x n_h*r_kv) and ``w_qr_path`` to the RoPE query (d x n_h*d_r).
    """

    w_q_abs: Tensor
    w_qr_path: Tensor
    w_kr: Tensor
    w_dkv: Tensor
    w_o_abs: Tensor


class KvCache:
    """Append-only per-layer cache.

    ``kind == "full"`` stores post-RoPE keys and values (n_kv*d_h wide each);
    ``kind == "latent"`` stores C^KV (r_kv wide) and the shared RoPE key (d_r).
    """

    FULL = "full"
    LATENT = "latent"

    def __init__(self, kind: str):
        if kind not in (self.FULL, self.LATENT):
            raise CacheError(f"unknown cache kind {kind!r}")
        self.kind = kind
        self.first: Optional[np.ndarray] = None
        self.second: Optional[np.ndarray] = None

    @classmethod
    def full(cls) -> "KvCache":
        return cls(cls.FULL)

    @classmethod
    def latent(cls) -> "KvCache":
        return cls(cls.LATENT)

    @classmethod
    def for_kind(cls, layer_kind: str) -> "KvCache":
        return cls.latent() if layer_kind == MLA else cls.full()

    @property
    def length(self) -> int:
        return 0 if self.first is None else self.first.shape[-2]

    def __len__(self) -> int:
        return self.length

    @property
    def per_token(self) -> int:
        if self.first is None:
            return 0
        return self.first.shape[-1] + self.second.shape[-1]

    def scalars(self) -> int:
        """Scalars held for one sequence (leading batch dims excluded)."""
        return self.length * self.per_token

    def append(self, first: np.ndarray, second: np.ndarray) -> None:
        if first.shape[:-1] != second.shape[:-1]:
            raise CacheError(f"cache halves disagree: {first.shape} vs {second.shape}")
        if self.first is None:
            self.first, self.second = first.copy(), second.copy()
            return
        if first.shape[-1] != self.first.shape[-1] or second.shape[-1] != self.second.shape[-1]:
            raise CacheError("cache width changed within a session")
        self.first = np.concatenate([self.first, first], axis=-2)
        self.second = np.concatenate([self.second, second], axis=-2)

    @property
    def k(self):
        self._want(self.FULL)
        return self.first

    @property
    def v(self):
        self._want(self.FULL)
        return self.second

    @property
    def c_kv(self):
        self._want(self.LATENT)
        return self.first

    @property
    def k_r(self):
        self._want(self.LATENT)
        return self.second

    def _want(self, kind: str) -> None:
        if self.kind != kind:
            raise CacheError(f"expected a {kind} cache, got {self.kind}")

    def copy(self) -> "KvCache":
        out = KvCache(self.kind)
        if self.first is not None:
            out.first, out.second = self.first.copy(), self.second.copy()
        return out


# -- RoPE -------------------------------------------------------------------
def rope_angles(positions, head_dim: int, theta_base: float = DEFAULT_THETA) -> np.ndarray:
    if head_dim % 2:
        raise GeometryError(f"RoPE head width must be even, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = theta_base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return pos[:, None] * inv_freq[None, :]


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, head_dim: int) -> np.ndarray:
    shape = x.shape
    xr = x.reshape(shape[:-1] + (shape[-1] // head_dim, head_dim // 2, 2))
    x0, x1 = xr[..., 0], xr[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1)
    return out.reshape(shape)


def rope_apply(x: Tensor, positions, head_dim: int, theta_base: float = DEFAULT_THETA) -> Tensor:
    """Rotate consecutive pairs of each ``head_dim``-wide head by pos * base^(-2i/head_dim)."""
    if head_dim % 2:
        raise GeometryError(f"RoPE head width must be even, got {head_dim}")
    if x.shape[-1] % head_dim:
        raise DimensionError(f"last dim {x.shape[-1]} is not a multiple of head width {head_dim}")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2],):
        raise DimensionError(f"{positions.shape[0] if positions.ndim else 0} positions for {x.shape[-2]} tokens")
    ang = rope_angles(positions, head_dim, theta_base)[:, None, :]  # l, 1, head_dim/2
    cos, sin = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)
    out = _rotate(x.data, cos, sin, head_dim)
    return T.custom_op(out, (x,), lambda g: (_rotate(g, cos, -sin, head_dim),))


# -- helpers ----------------------------------------------------------------
def _split_heads(x: Tensor, n: int) -> Tensor:
    """(..., l, n*w) -> (..., n, l, w)"""
    w = x.shape[-1] // n
    return T.swapaxes(T.reshape(x, x.shape[:-1] + (n, w)), -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., n, l, w) -> (..., l, n*w)"""
    y = T.swapaxes(x, -2, -3)
    return T.reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def causal_mask(l_new: int, start: int) -> np.ndarray:
    """True where key position j lies in the future of query start+i."""
    q = np.arange(l_new)[:, None] + start
    k = np.arange(start + l_new)[None, :]
    return k > q


def _attend(scores: Tensor, values: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    if mask is not None and mask.any():
        scores = T.masked_fill(scores, mask, MASK_VALUE)
    return T.matmul(T.softmax_rows(scores), values)


def _with_past(past: Optional[np.ndarray], new: Tensor) -> Tensor:
    if past is None:
        return new
    return T.concat([Tensor(past.astype(new.dtype, copy=False)), new], axis=-2)


def _start(cache: Optional[KvCache], kind: str) -> int:
    if cache is None:
        return 0
    if cache.kind != kind:
        raise CacheError(f"layer needs a {kind} cache, got {cache.kind}")
    return cache.length


# -- forwards ---------------------------------------------------------------
def mha_forward(h: Tensor, w: MhaWeights, geo: AttentionGeometry, cache: Optional[KvCache] = None,
                causal: bool = True, theta_base: float = DEFAULT_THETA):
    """Grouped-query attention (plain MHA when n_kv == n_h). Returns (output, cache)."""
    start = _start(cache, KvCache.FULL)
    l_new = h.shape[-2]
    pos = np.arange(start, start + l_new)
    q = rope_apply(T.matmul(h, w.w_q), pos, geo.d_h, theta_base)
    k_new = rope_apply(T.matmul(h, w.w_k), pos, geo.d_h, theta_base)
    v_new = T.matmul(h, w.w_v)
    past_k = past_v = None
    if cache is not None:
        past_k, past_v = cache.first, cache.second
        cache.append(k_new.data, v_new.data)
    k = T.repeat_interleave(_split_heads(_with_past(past_k, k_new), geo.n_kv), geo.group, axis=-3)
    v = T.repeat_interleave(_split_heads(_with_past(past_v, v_new), geo.n_kv), geo.group, axis=-3)
    scores = T.scale(T.matmul(_split_heads(q, geo.n_h), T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(geo.d_h))
    mask = causal_mask(l_new, start) if causal else None
    out = _merge_heads(_attend(scores, v, mask))
    return T.matmul(out, w.w_o), cache


def _ln(x: Tensor, gain: Optional[Tensor], bias: Optional[Tensor]) -> Tensor:
    return x if gain is None else T.layer_norm(x, gain, bias)


def mla_forward_naive(h: Tensor, w: MlaWeights, geo: AttentionGeometry, cache: Optional[KvCache] = None,
                      causal: bool = True, theta_base: float = DEFAULT_THETA):
    """MLA that reconstructs per-head keys/values from the latent cache."""
    start = _start(cache, KvCache.LATENT)
    l_new = h.shape[-2]
    pos = np.arange(start, start + l_new)
    c_q = _ln(T.matmul(h, w.w_dq), w.ln_q_gain, w.ln_q_bias)
    q_c = _split_heads(T.matmul(c_q, w.w_uq), geo.n_h)
    q_r = _split_heads(rope_apply(T.matmul(c_q, w.w_qr), pos, geo.d_r, theta_base), geo.n_h)
    c_kv_new = _ln(T.matmul(h, w.w_dkv), w.ln_kv_gain, w.ln_kv_bias)
    k_r_new = rope_apply(T.matmul(h, w.w_kr), pos, geo.d_r, theta_base)
    past_c = past_r = None
    if cache is not None:
        past_c, past_r = cache.first, cache.second
        cache.append(c_kv_new.data, k_r_new.data)
    c_kv = _with_past(past_c, c_kv_new)
    k_r = _with_past(past_r, k_r_new)
    k_c = _split_heads(T.matmul(c_kv, w.w_uk), geo.n_h)
    v_c = _split_heads(T.matmul(c_kv, w.w_uv), geo.n_h)
    k_r_heads = T.broadcast_to(T.reshape(k_r, k_r.shape[:-2] + (1,) + k_r.shape[-2:]),
                               k_c.shape[:-1] + (geo.d_r,))
    q = T.concat([q_c, q_r], axis=-1)
    k = T.concat([k_c, k_r_heads], axis=-1)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(geo.d_qk + geo.d_r))
    mask = causal_mask(l_new, start) if causal else None
    out = _merge_heads(_attend(scores, v_c, mask))
    return T.matmul(out, w.w_o), cache


def absorb(w: MlaWeights, geo: AttentionGeometry) -> AbsorbedMlaWeights:
    """Fold W^UK into the query path and W^UV into the output projection."""
    if isinstance(w, AbsorbedMlaWeights):
        raise ContractError("weights are already absorbed")
    if w.has_ln:
        raise UnsupportedError("cannot absorb with LayerNorm between the down- and up-projections")
    w.check(geo)
    nh, r_kv = geo.n_h, geo.r_kv
    uq = w.w_uq.data.reshape(geo.r_q, nh, geo.d_qk)
    uk = w.w_uk.data.reshape(r_kv, nh, geo.d_qk)
    # per head: W^UQ_i (r_q x d_qk) @ W^UK_i^T (d_qk x r_kv)
    q_lat = np.einsum("qhe,khe->qhk", uq, uk).reshape(geo.r_q, nh * r_kv)
    uv = w.w_uv.data.reshape(r_kv, nh, geo.d_h)
    wo = w.w_o.data.reshape(nh, geo.d_h, geo.d)
    o_abs = np.einsum("khe,hed->hkd", uv, wo).reshape(nh * r_kv, geo.d)
    return AbsorbedMlaWeights(
        w_q_abs=Tensor(w.w_dq.data @ q_lat), w_qr_path=Tensor(w.w_dq.data @ w.w_qr.data),
        w_kr=Tensor(w.w_kr.data), w_dkv=Tensor(w.w_dkv.data), w_o_abs=Tensor(o_abs))


def mla_forward_absorbed(h: Tensor, aw: AbsorbedMlaWeights, geo: AttentionGeometry,
                         cache: Optional[KvCache] = None, causal: bool = True,
                         theta_base: float = DEFAULT_THETA):
    """MLA decoding that touches only the latent cache (C^KV, K^R)."""
    if not isinstance(aw, AbsorbedMlaWeights):
        raise ContractError("mla_forward_absorbed needs absorb()-ed weights")
    start = _start(cache, KvCache.LATENT)
    l_new = h.shape[-2]
    pos = np.arange(start, start + l_new)
    q_lat = _split_heads(T.matmul(h, aw.w_q_abs), geo.n_h)  # ..., n_h, l, r_kv
    q_r = _split_heads(rope_apply(T.matmul(h, aw.w_qr_path), pos, geo.d_r, theta_base), geo.n_h)
    c_kv_new = T.matmul(h, aw.w_dkv)
    k_r_new = rope_apply(T.matmul(h, aw.w_kr), pos, geo.d_r, theta_base)
    past_c = past_r = None
    if cache is not None:
        past_c, past_r = cache.first, cache.second
        cache.append(c_kv_new.data, k_r_new.data)
    c_kv = _with_past(past_c, c_kv_new)
    k_r = _with_past(past_r, k_r_new)

    def heads(x):  # (..., L, w) -> (..., 1, L, w) so it broadcasts over heads
        return T.reshape(x, x.shape[:-2] + (1,) + x.shape[-2:])

    scores = T.add(T.matmul(q_lat, T.swapaxes(heads(c_kv), -1, -2)),
                   T.matmul(q_r, T.swapaxes(heads(k_r), -1, -2)))
    scores = T.scale(scores, 1.0 / math.sqrt(geo.d_qk + geo.d_r))
    mask = causal_mask(l_new, start) if causal else None
    if mask is not None and mask.any():
        scores = T.masked_fill(scores, mask, MASK_VALUE)
    o_lat = T.matmul(T.softmax_rows(scores), heads(c_kv))  # ..., n_h, l, r_kv
    return T.matmul(_merge_heads(o_lat), aw.w_o_abs), cache


# -- cache accounting -------------------------------------------------------
def cache_scalars_per_token(geo: AttentionGeometry, kind: str) -> int:
    if kind == ATTENTION:
        return 2 * geo.n_kv * geo.d_h
    if kind == MLA:
        return geo.r_kv + geo.d_r
    raise GeometryError(f"unknown attention kind {kind!r}")


@dataclass(frozen=True)
class CacheFootprint:
    scalars: int  # total cached scalars across layers for l tokens
    baseline: int  # same for the all-GQA donor
    ratio: Fraction  # per-token ratio, exact

    @property
    def percent(self) -> Fraction:
        return self.ratio * 100


def cache_footprint(geo: Union[AttentionGeometry, Sequence[AttentionGeometry]],
                    kind: Union[str, Sequence[str]], l: int, n_layers: Optional[int] = None) -> CacheFootprint:
    """KV-cache scalars for ``l`` tokens and their exact ratio to the GQA baseline.

    ``kind`` is either one family for every layer or a per-layer kind map;
    ``geo`` may likewise be per-layer (heterogeneous MLA ranks).
    """
    if l < 0:
        raise ValueError("sequence length must be nonnegative")
    if isinstance(kind, str):
        if n_layers is None:
            n_layers = len(geo) if isinstance(geo, (list, tuple)) else 1
        kinds = [kind] * n_layers
    else:
        kinds = list(kind)
        if n_layers is not None and n_layers != len(kinds):
            raise GeometryError(f"kind map has {len(kinds)} entries for {n_layers} layers")
    geos = list(geo) if isinstance(geo, (list, tuple)) else [geo] * len(kinds)
    if len(geos) != len(kinds):
        raise GeometryError(f"{len(geos)} geometries for {len(kinds)} layers")
    per_tok = sum(cache_scalars_per_token(g, k) for g, k in zip(geos, kinds))
    base_tok = sum(cache_scalars_per_token(g, ATTENTION) for g in geos)
    return CacheFootprint(per_tok * l, base_tok * l, Fraction(per_tok, base_tok))


def format_percent(value: Fraction, places: int = 4) -> str:
    """Render an exact rational percentage with round-half-even, no float drift."""
    scaled = value * 10 ** places
    q, rem = divmod(scaled.numerator, scaled.denominator)
    twice = 2 * rem
    if twice > scaled.denominator or (twice == scaled.denominator and q % 2):
        q += 1
    sign = "-" if q < 0 else ""
    q = abs(q)
    whole, frac = divmod(q, 10 ** places)
    return f"{sign}{whole}.{frac:0{places}d}" if places else f"{sign}{whole}"


# -- initialisation -----------------------------------------------------------
def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64) -> Tensor:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype))


def init_mha_weights(geo: AttentionGeometry, rng: np.random.Generator, dtype=np.float64) -> MhaWeights:
    d, nh, nkv, dh = geo.d, geo.n_h, geo.n_kv, geo.d_h
    return MhaWeights(glorot(rng, d, nh * dh, dtype), glorot(rng, d, nkv * dh, dtype),
                      glorot(rng, d, nkv * dh, dtype), glorot(rng, nh * dh, d, dtype))
