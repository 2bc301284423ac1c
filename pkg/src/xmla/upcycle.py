"""SVD-based conversion of MHA/GQA attention weights into MLA weights."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .attention import AttentionGeometry, MhaWeights, MlaWeights, cache_scalars_per_token, MLA
from .errors import ConfigError, GeometryError, RankError, SpectrumError, UnsupportedError
from .linalg import SvdResult, relative_frobenius_error, svd_full
from .tensor import Tensor


@dataclass(frozen=True)
class FixedRanks:
    r_q: int
    r_kv: int

    def __str__(self) -> str:
        return f"fixed:{self.r_q},{self.r_kv}"


@dataclass(frozen=True)
class DynamicRanks:
    delta_q: float
    delta_kv: float
    align: int = 8

    def __post_init__(self):
        for name in ("delta_q", "delta_kv"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.align < 1:
            raise ConfigError("align must be >= 1")

    def __str__(self) -> str:
        return f"dynamic:{self.delta_q:g},{self.delta_kv:g}"


RankSpec = Union[FixedRanks, DynamicRanks]

_SPEC_RE = re.compile(r"^(fixed|dynamic):([^,]+),([^,]+)$")


def parse_rank_spec(text: str) -> RankSpec:
    """Parse ``fixed:rq,rkv`` or ``dynamic:dq,dkv``."""
    m = _SPEC_RE.match(text.strip())
    if not m:
        raise ConfigError(f"malformed rank spec {text!r}; expected fixed:rq,rkv or dynamic:dq,dkv")
    kind, a, b = m.groups()
    try:
        if kind == "fixed":
            return FixedRanks(int(a), int(b))
        return DynamicRanks(float(a), float(b))
    except ValueError as exc:
        raise ConfigError(f"malformed rank spec {text!r}: {exc}") from None


def spec_to_dict(spec: RankSpec) -> dict:
    if isinstance(spec, FixedRanks):
        return {"kind": "fixed", "r_q": spec.r_q, "r_kv": spec.r_kv}
    return {"kind": "dynamic", "delta_q": spec.delta_q, "delta_kv": spec.delta_kv, "align": spec.align}


def expand_gqa_to_mha(w: MhaWeights, geo: AttentionGeometry) -> MhaWeights:
    """Repeat each KV head's columns n_h/n_kv times so every query head owns a copy."""
    if geo.n_h % geo.n_kv:
        raise GeometryError(f"n_h={geo.n_h} is not a multiple of n_kv={geo.n_kv}")
    w.check(geo)
    if geo.n_kv == geo.n_h:
        return w

    def rep(t: Tensor) -> Tensor:
        blocks = t.data.reshape(geo.d, geo.n_kv, geo.d_h)
        return Tensor(np.repeat(blocks, geo.group, axis=1).reshape(geo.d, geo.n_h * geo.d_h))

    return MhaWeights(Tensor(w.w_q.data.copy()), rep(w.w_k), rep(w.w_v), Tensor(w.w_o.data.copy()))


def select_rank_dynamic(sigma, delta: float) -> int:
    """Smallest R whose leading squared singular values hold at least ``delta`` of the energy."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise SpectrumError("empty spectrum")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise SpectrumError("spectrum must be nonnegative and sorted descending")
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"energy threshold must lie in (0, 1], got {delta}")
    energy = np.cumsum(s * s)
    total = energy[-1]
    if total == 0.0:
        raise SpectrumError("all-zero spectrum")
    return int(np.argmax(energy >= delta * total)) + 1


def _aligned(r: int, align: int, cap: int) -> int:
    return min(cap, int(math.ceil(r / align) * align))


def _check_rank(r: int, bound: int, name: str) -> None:
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= bound:
        raise RankError(f"{name}={r} outside [1, {bound}]")


def init_query_path(w_q: Tensor, r_q: int, geo: AttentionGeometry, svd: Optional[SvdResult] = None):
    """Return (w_dq, w_uq, w_qr) from the leading r_q triplets of W^Q."""
    _check_rank(r_q, geo.max_r_q, "r_q")
    res = (svd or svd_full(w_q)).truncate(r_q)
    dtype = w_q.dtype
    w_dq = res.u.data
    bar = (res.sigma[:, None] * res.vt.data).reshape(r_q, geo.n_h, geo.d_h)
    w_uq = bar[:, :, :geo.d_qk].reshape(r_q, geo.n_h * geo.d_qk)
    w_qr = bar[:, :, -geo.d_r:].reshape(r_q, geo.n_h * geo.d_r)
    return tuple(Tensor(np.ascontiguousarray(x, dtype=dtype)) for x in (w_dq, w_uq, w_qr))


def _check_expanded(t: Tensor, geo: AttentionGeometry, name: str) -> None:
    if t.shape != (geo.d, geo.n_h * geo.d_h):
        raise GeometryError(f"{name} has shape {t.shape}; expand GQA weights to {geo.n_h} heads first")


def init_kv_path(w_k: Tensor, w_v: Tensor, r_kv: int, geo: AttentionGeometry,
                 svd: Optional[SvdResult] = None):
    """Return (w_dkv, w_uk, w_uv) from a joint SVD of [W^K | W^V]."""
    _check_expanded(w_k, geo, "w_k")
    _check_expanded(w_v, geo, "w_v")
    _check_rank(r_kv, geo.max_r_kv, "r_kv")
    joint = np.concatenate([w_k.data, w_v.data], axis=-1)
    res = (svd or svd_full(joint)).truncate(r_kv)
    width = geo.n_h * geo.d_h
    ukv = res.sigma[:, None] * res.vt.data
    w_uk = ukv[:, :width].reshape(r_kv, geo.n_h, geo.d_h)[:, :, :geo.d_qk].reshape(r_kv, geo.n_h * geo.d_qk)
    w_uv = ukv[:, width:]
    dtype = w_k.dtype
    return tuple(Tensor(np.ascontiguousarray(x, dtype=dtype)) for x in (res.u.data, w_uk, w_uv))


def init_rope_key(w_k: Tensor, geo: AttentionGeometry) -> Tensor:
    """Head-averaged key projection, last d_r columns."""
    _check_expanded(w_k, geo, "w_k")
    avg = w_k.data.reshape(geo.d, geo.n_h, geo.d_h).mean(axis=1)
    return Tensor(np.ascontiguousarray(avg[:, -geo.d_r:]))


def mla_param_count(geo: AttentionGeometry, ln: bool = False) -> int:
    """MLA projection scalars excluding W^O."""
    n = (geo.d * geo.r_q + geo.r_q * geo.n_h * (geo.d_qk + geo.d_r) + geo.d * geo.r_kv
         + geo.r_kv * geo.n_h * (geo.d_qk + geo.d_h) + geo.d * geo.d_r)
    return n + (2 * (geo.r_q + geo.r_kv) if ln else 0)


def mha_param_count(geo: AttentionGeometry) -> int:
    """Q/K/V projection scalars excluding W^O."""
    return geo.d * geo.n_h * geo.d_h + 2 * geo.d * geo.n_kv * geo.d_h


@dataclass
class LayerUpcycle:
    layer: int
    r_q: int
    r_kv: int
    energy_q: Optional[float]
    energy_kv: Optional[float]
    recon_err_q: Optional[float]
    recon_err_kv: Optional[float]
    cache_ratio: Fraction
    param_delta: int

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "r_q": self.r_q, "r_kv": self.r_kv,
            "energy_q": self.energy_q, "energy_kv": self.energy_kv,
            "recon_err_q": self.recon_err_q, "recon_err_kv": self.recon_err_kv,
            "cache_ratio": float(self.cache_ratio), "param_delta": self.param_delta,
        }


@dataclass
class UpcycleReport:
    spec: str
    layers: list = field(default_factory=list)
    cache_ratio: Optional[Fraction] = None
    param_delta: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        from .attention import format_percent

        out = {
            "rank_spec": self.spec,
            "layers": [lay.to_dict() for lay in self.layers],
            "param_delta": self.param_delta,
            "notes": list(self.notes),
        }
        if self.cache_ratio is not None:
            out["cache_ratio"] = float(self.cache_ratio)
            out["cache_ratio_exact"] = f"{self.cache_ratio.numerator}/{self.cache_ratio.denominator}"
            out["kv_size_percent"] = format_percent(self.cache_ratio * 100)
        return out


def _energy(sigma: np.ndarray, r: int) -> float:
    sq = sigma * sigma
    total = sq.sum()
    return float(sq[:r].sum() / total) if total > 0 else 1.0


def resolve_ranks(spec: RankSpec, geo: AttentionGeometry, sigma_q: np.ndarray, sigma_kv: np.ndarray):
    if isinstance(spec, FixedRanks):
        return spec.r_q, spec.r_kv
    r_q = _aligned(select_rank_dynamic(sigma_q, spec.delta_q), spec.align, geo.max_r_q)
    r_kv = _aligned(select_rank_dynamic(sigma_kv, spec.delta_kv), spec.align, geo.max_r_kv)
    return r_q, r_kv


def upcycle_attention(w: MhaWeights, geo: AttentionGeometry, spec: RankSpec, enable_ln: bool = False,
                      layer: int = 0):
    """Convert one donor attention block. Returns (MlaWeights, MLA geometry, LayerUpcycle)."""
    w.check(geo)
    mha_geo = geo.as_mha()
    full = expand_gqa_to_mha(w, geo)
    svd_q = svd_full(full.w_q)
    joint = np.concatenate([full.w_k.data, full.w_v.data], axis=-1)
    svd_kv = svd_full(joint)
    r_q, r_kv = resolve_ranks(spec, geo, svd_q.sigma, svd_kv.sigma)
    _check_rank(r_q, geo.max_r_q, "r_q")
    _check_rank(r_kv, geo.max_r_kv, "r_kv")
    mla_geo = geo.with_ranks(r_q, r_kv)
    w_dq, w_uq, w_qr = init_query_path(full.w_q, r_q, mha_geo.with_ranks(r_q, r_kv), svd=svd_q)
    w_dkv, w_uk, w_uv = init_kv_path(full.w_k, full.w_v, r_kv, mha_geo.with_ranks(r_q, r_kv), svd=svd_kv)
    w_kr = init_rope_key(full.w_k, mha_geo).astype(w.w_k.dtype)
    dtype = w.w_q.dtype
    ln = {}
    if enable_ln:
        ln = dict(ln_q_gain=Tensor(np.ones(r_q, dtype=dtype)), ln_q_bias=Tensor(np.zeros(r_q, dtype=dtype)),
                  ln_kv_gain=Tensor(np.ones(r_kv, dtype=dtype)), ln_kv_bias=Tensor(np.zeros(r_kv, dtype=dtype)))
    mla = MlaWeights(w_dq, w_uq, w_qr, w_dkv, w_uk, w_uv, w_kr, Tensor(w.w_o.data.copy()), **ln)
    mla.check(mla_geo)
    tq, tkv = svd_q.truncate(r_q), svd_kv.truncate(r_kv)
    rec = LayerUpcycle(
        layer=layer, r_q=r_q, r_kv=r_kv,
        energy_q=_energy(svd_q.sigma, r_q), energy_kv=_energy(svd_kv.sigma, r_kv),
        recon_err_q=relative_frobenius_error(full.w_q.data, tq.reconstruct()),
        recon_err_kv=relative_frobenius_error(joint, tkv.reconstruct()),
        cache_ratio=Fraction(cache_scalars_per_token(mla_geo, MLA), 2 * geo.n_kv * geo.d_h),
        param_delta=mla_param_count(mla_geo, enable_ln) - mha_param_count(geo),
    )
    return mla, mla_geo, rec


def random_init_attention(geo: AttentionGeometry, spec: RankSpec, seed: int, enable_ln: bool = False,
                          dtype=np.float64) -> MlaWeights:
    """Glorot-normal MLA weights (variance 2/(fan_in+fan_out)), deterministic per seed."""
    if not isinstance(spec, FixedRanks):
        raise UnsupportedError("random initialisation needs fixed ranks (no spectrum to threshold)")
    g = geo.with_ranks(spec.r_q, spec.r_kv)
    rng = np.random.default_rng(seed)

    def draw(fan_in, fan_out):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        return Tensor(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype))

    nh = g.n_h
    w = MlaWeights(
        w_dq=draw(g.d, g.r_q), w_uq=draw(g.r_q, nh * g.d_qk), w_qr=draw(g.r_q, nh * g.d_r),
        w_dkv=draw(g.d, g.r_kv), w_uk=draw(g.r_kv, nh * g.d_qk), w_uv=draw(g.r_kv, nh * g.d_h),
        w_kr=draw(g.d, g.d_r), w_o=draw(nh * g.d_h, g.d))
    if enable_ln:
        w.ln_q_gain, w.ln_q_bias = Tensor(np.ones(g.r_q, dtype=dtype)), Tensor(np.zeros(g.r_q, dtype=dtype))
        w.ln_kv_gain, w.ln_kv_bias = Tensor(np.ones(g.r_kv, dtype=dtype)), Tensor(np.zeros(g.r_kv, dtype=dtype))
    return w
