"""A small pre-norm decoder LM whose layers are either GQA or MLA attention."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .attention import (ATTENTION, DEFAULT_THETA, LAYER_KINDS, MLA, AttentionGeometry, KvCache, MhaWeights,
                        MlaWeights, cache_footprint, cache_scalars_per_token, glorot, mha_forward, mla_forward_naive)
from .errors import CacheError, ConfigError, DataError, KindError, VocabError
from .tensor import Tensor
from .upcycle import (LayerUpcycle, RankSpec, UpcycleReport, mha_param_count, mla_param_count,
                      random_init_attention, spec_to_dict, upcycle_attention)

_MHA_NAMES = ("w_q", "w_k", "w_v", "w_o")
_MLA_NAMES = ("w_dq", "w_uq", "w_qr", "w_dkv", "w_uk", "w_uv", "w_kr", "w_o")
_LN_NAMES = ("ln_q_gain", "ln_q_bias", "ln_kv_gain", "ln_kv_bias")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int
    geometry: AttentionGeometry
    mlp_hidden: int
    layer_kinds: list = field(default_factory=list)
    tie_embeddings: bool = True
    theta_base: float = DEFAULT_THETA
    mla_ln: bool = False
    # per-layer (r_q, r_kv) overriding geometry ranks for MLA layers
    layer_ranks: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layer_kinds:
            self.layer_kinds = [ATTENTION] * self.n_layers
        self.layer_kinds = list(self.layer_kinds)
        self.layer_ranks = {int(k): tuple(int(x) for x in v) for k, v in self.layer_ranks.items()}
        if len(self.layer_kinds) != self.n_layers:
            raise ConfigError(f"{len(self.layer_kinds)} layer kinds for {self.n_layers} layers")
        bad = [k for k in self.layer_kinds if k not in LAYER_KINDS]
        if bad:
            raise ConfigError(f"unknown layer kinds {bad}")
        if self.vocab_size < 2 or self.mlp_hidden < 1:
            raise ConfigError("vocab_size must be >= 2 and mlp_hidden >= 1")
        for i in self.layer_ranks:
            if not 0 <= i < self.n_layers:
                raise ConfigError(f"rank override for missing layer {i}")
            self.layer_geometry(i)

    def layer_geometry(self, i: int) -> AttentionGeometry:
        if i in self.layer_ranks:
            return self.geometry.with_ranks(*self.layer_ranks[i])
        return self.geometry

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "n_layers": self.n_layers, "geometry": self.geometry.to_dict(),
            "mlp_hidden": self.mlp_hidden, "layer_kinds": list(self.layer_kinds),
            "tie_embeddings": self.tie_embeddings, "theta_base": self.theta_base, "mla_ln": self.mla_ln,
            "layer_ranks": {str(k): list(v) for k, v in sorted(self.layer_ranks.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        allowed = {"vocab_size", "n_layers", "geometry", "mlp_hidden", "layer_kinds", "tie_embeddings",
                   "theta_base", "mla_ln", "layer_ranks"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        geo = d.pop("geometry")
        d["geometry"] = geo if isinstance(geo, AttentionGeometry) else AttentionGeometry.from_dict(geo)
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict:
    """Name -> shape for every parameter, in canonical order."""
    shapes = {"embed": (cfg.vocab_size, cfg.geometry.d)}
    d = cfg.geometry.d
    for i, kind in enumerate(cfg.layer_kinds):
        g = cfg.layer_geometry(i)
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        if kind == ATTENTION:
            shapes.update({p + "attn.w_q": (d, g.n_h * g.d_h), p + "attn.w_k": (d, g.n_kv * g.d_h),
                           p + "attn.w_v": (d, g.n_kv * g.d_h), p + "attn.w_o": (g.n_h * g.d_h, d)})
        else:
            shapes.update({
                p + "attn.w_dq": (d, g.r_q), p + "attn.w_uq": (g.r_q, g.n_h * g.d_qk),
                p + "attn.w_qr": (g.r_q, g.n_h * g.d_r), p + "attn.w_dkv": (d, g.r_kv),
                p + "attn.w_uk": (g.r_kv, g.n_h * g.d_qk), p + "attn.w_uv": (g.r_kv, g.n_h * g.d_h),
                p + "attn.w_kr": (d, g.d_r), p + "attn.w_o": (g.n_h * g.d_h, d)})
            if cfg.mla_ln:
                shapes.update({p + "attn.ln_q_gain": (g.r_q,), p + "attn.ln_q_bias": (g.r_q,),
                               p + "attn.ln_kv_gain": (g.r_kv,), p + "attn.ln_kv_bias": (g.r_kv,)})
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "mlp.w_gate"] = (d, cfg.mlp_hidden)
        shapes[p + "mlp.w_up"] = (d, cfg.mlp_hidden)
        shapes[p + "mlp.w_down"] = (cfg.mlp_hidden, d)
    shapes["final_norm"] = (d,)
    if not cfg.tie_embeddings:
        shapes["head"] = (d, cfg.vocab_size)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Closed-form scalar count."""
    d, V, hid = cfg.geometry.d, cfg.vocab_size, cfg.mlp_hidden
    n = V * d + d + (0 if cfg.tie_embeddings else d * V)
    for i, kind in enumerate(cfg.layer_kinds):
        g = cfg.layer_geometry(i)
        n += 2 * d + 3 * d * hid + g.n_h * g.d_h * d
        if kind == ATTENTION:
            n += d * g.n_h * g.d_h + 2 * d * g.n_kv * g.d_h
        else:
            n += (d * g.r_q + g.r_q * g.n_h * (g.d_qk + g.d_r) + d * g.r_kv
                  + g.r_kv * g.n_h * (g.d_qk + g.d_h) + d * g.d_r)
            if cfg.mla_ln:
                n += 2 * (g.r_q + g.r_kv)
    return n


class LmModel:
    """Parameters live in one ordered name -> Tensor map."""

    def __init__(self, config: ModelConfig, params: dict):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            if missing or extra:
                raise ConfigError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            params = {k: params[k] for k in expected}
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def named_parameters(self) -> list:
        return list(self.params.items())

    def parameters(self) -> list:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def requires_grad_(self, flag: bool = True) -> "LmModel":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "LmModel":
        cfg = ModelConfig.from_dict(self.config.to_dict())
        return LmModel(cfg, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "LmModel":
        cfg = ModelConfig.from_dict(self.config.to_dict())
        return LmModel(cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    def attention_weights(self, i: int) -> Union[MhaWeights, MlaWeights]:
        p = f"layers.{i}.attn."
        if self.config.layer_kinds[i] == ATTENTION:
            return MhaWeights(*(self.params[p + n] for n in _MHA_NAMES))
        w = MlaWeights(*(self.params[p + n] for n in _MLA_NAMES))
        if self.config.mla_ln:
            w.ln_q_gain, w.ln_q_bias, w.ln_kv_gain, w.ln_kv_bias = (self.params[p + n] for n in _LN_NAMES)
        return w

    def new_caches(self) -> list:
        return [KvCache.for_kind(k) for k in self.config.layer_kinds]

    def cache_ratio(self):
        cfg = self.config
        geos = [cfg.layer_geometry(i) for i in range(cfg.n_layers)]
        return cache_footprint(geos, cfg.layer_kinds, 1).ratio

    def state_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data).tobytes() for p in self.params.values())


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> LmModel:
    rng = np.random.default_rng(seed)
    d = cfg.geometry.d
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "embed":
            params[name] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=shape).astype(dtype))
        elif len(shape) == 1:
            base = name.rsplit(".", 1)[-1]
            fill = 0.0 if base.endswith("bias") else 1.0
            params[name] = Tensor(np.full(shape, fill, dtype=dtype))
        else:
            params[name] = glorot(rng, shape[0], shape[1], dtype)
    return LmModel(cfg, params)


def _check_ids(tokens, vocab: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 0 or ids.shape[-1] == 0:
        raise DataError("empty token sequence")
    if ids.min() < 0 or ids.max() >= vocab:
        raise VocabError(f"token id out of range [0, {vocab})")
    return ids


def forward(model: LmModel, tokens, caches: Optional[Sequence[KvCache]] = None, causal: bool = True) -> Tensor:
    """Logits (..., l, vocab) for token ids (..., l); caches, if given, are extended in place."""
    cfg = model.config
    ids = _check_ids(tokens, cfg.vocab_size)
    if caches is not None:
        if len(caches) != cfg.n_layers:
            raise CacheError(f"{len(caches)} caches for {cfg.n_layers} layers")
        for i, (c, kind) in enumerate(zip(caches, cfg.layer_kinds)):
            want = KvCache.LATENT if kind == MLA else KvCache.FULL
            if c.kind != want:
                raise CacheError(f"layer {i} is {kind} but got a {c.kind} cache")
    P = model.params
    x = T.embedding(P["embed"], ids)
    for i, kind in enumerate(cfg.layer_kinds):
        p = f"layers.{i}."
        cache = None if caches is None else caches[i]
        h = T.rms_norm(x, P[p + "attn_norm"])
        w = model.attention_weights(i)
        geo = cfg.layer_geometry(i)
        fwd = mha_forward if kind == ATTENTION else mla_forward_naive
        a, _ = fwd(h, w, geo, cache, causal=causal, theta_base=cfg.theta_base)
        x = T.add(x, a)
        h = T.rms_norm(x, P[p + "mlp_norm"])
        gate = T.silu(T.matmul(h, P[p + "mlp.w_gate"]))
        up = T.matmul(h, P[p + "mlp.w_up"])
        x = T.add(x, T.matmul(T.mul(gate, up), P[p + "mlp.w_down"]))
    x = T.rms_norm(x, P["final_norm"])
    head = T.transpose(P["embed"]) if cfg.tie_embeddings else P["head"]
    return T.matmul(x, head)


def generate(model: LmModel, prompt: Sequence[int], n_new: int, mode: str = "greedy",
             caches: Optional[list] = None) -> list:
    """Greedy continuation; every emitted token is also pushed through the caches."""
    if mode != "greedy":
        raise ConfigError(f"unsupported decoding mode {mode!r}")
    if n_new < 0:
        raise ValueError("n_new must be >= 0")
    out = [int(t) for t in prompt]
    if n_new == 0:
        return out
    if caches is None:
        caches = model.new_caches()
    logits = forward(model, out, caches)
    for _ in range(n_new):
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        logits = forward(model, [nxt], caches)
    return out


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_nll(model: LmModel, tokens, context_len: int) -> tuple:
    """(total next-token NLL, number of predictions) over a token stream."""
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size < 2:
        raise DataError("corpus needs at least 2 tokens")
    if context_len < 1:
        raise ConfigError("context length must be >= 1")
    n_pred = ids.size - 1
    n_full = n_pred // context_len
    total, count = 0.0, 0
    if n_full:
        starts = np.arange(n_full) * context_len
        win = ids[starts[:, None] + np.arange(context_len + 1)[None, :]]
        total += _window_nll(model, win)
        count += n_full * context_len
    rest = n_pred - n_full * context_len
    if rest:
        win = ids[n_full * context_len:][None, :]
        total += _window_nll(model, win)
        count += rest
    return total, count


def _window_nll(model: LmModel, win: np.ndarray) -> float:
    logits = forward(model, win[:, :-1]).data.astype(np.float64)
    lp = _log_softmax_np(logits)
    picked = np.take_along_axis(lp, win[:, 1:, None], axis=-1)
    return float(-picked.sum())


def perplexity(model: LmModel, tokens, context_len: int = 64) -> float:
    total, count = sequence_nll(model, tokens, context_len)
    return float(math.exp(total / count))


def _layer_list(selection, n_layers: int) -> list:
    if selection is None or selection == "all":
        return list(range(n_layers))
    if isinstance(selection, str):
        selection = [int(s) for s in selection.split(",") if s.strip()]
    out = sorted(set(int(i) for i in selection))
    for i in out:
        if not 0 <= i < n_layers:
            raise ConfigError(f"layer {i} outside [0, {n_layers})")
    return out


def upcycle_model(model: LmModel, spec: RankSpec, layer_selection: Union[str, Iterable[int]] = "all",
                  enable_ln: bool = False, init: str = "svd", seed: int = 0):
    """Convert selected attention layers to MLA. Returns (new model, UpcycleReport)."""
    cfg = model.config
    layers = _layer_list(layer_selection, cfg.n_layers)
    for i in layers:
        if cfg.layer_kinds[i] != ATTENTION:
            raise KindError(f"layer {i} is already {cfg.layer_kinds[i]}")
    if init not in ("svd", "random"):
        raise ConfigError(f"unknown init {init!r}")
    has_mla = any(k == MLA for k in cfg.layer_kinds)
    if layers and has_mla and cfg.mla_ln != enable_ln:
        raise ConfigError("LayerNorm setting must match the model's existing MLA layers")
    kinds = list(cfg.layer_kinds)
    ranks = dict(cfg.layer_ranks)
    params = {k: v.copy() for k, v in model.params.items()}
    report = UpcycleReport(spec=str(spec))
    converted = {}
    for i in layers:
        donor_geo = cfg.layer_geometry(i)
        w = model.attention_weights(i)
        if init == "svd":
            mla, geo, rec = upcycle_attention(w, donor_geo, spec, enable_ln=enable_ln, layer=i)
        else:
            mla = random_init_attention(donor_geo, spec, seed + i, enable_ln=enable_ln, dtype=w.w_q.dtype)
            mla.w_o = Tensor(w.w_o.data.copy())
            geo = donor_geo.with_ranks(spec.r_q, spec.r_kv)
            rec = LayerUpcycle(layer=i, r_q=geo.r_q, r_kv=geo.r_kv, energy_q=None, energy_kv=None,
                               recon_err_q=None, recon_err_kv=None,
                               cache_ratio=Fraction(cache_scalars_per_token(geo, MLA), 2 * geo.n_kv * geo.d_h),
                               param_delta=mla_param_count(geo, enable_ln) - mha_param_count(donor_geo))
        converted[i] = mla
        kinds[i] = MLA
        ranks[i] = (geo.r_q, geo.r_kv)
        report.layers.append(rec)
        report.param_delta += rec.param_delta
    new_cfg = ModelConfig(vocab_size=cfg.vocab_size, n_layers=cfg.n_layers, geometry=cfg.geometry,
                          mlp_hidden=cfg.mlp_hidden, layer_kinds=kinds, tie_embeddings=cfg.tie_embeddings,
                          theta_base=cfg.theta_base, mla_ln=enable_ln if (layers or has_mla) else cfg.mla_ln,
                          layer_ranks={i: r for i, r in ranks.items() if kinds[i] == MLA})
    new_params = {}
    for name in param_shapes(new_cfg):
        if name in params and not _is_converted(name, converted):
            new_params[name] = params[name]
        else:
            i = int(name.split(".")[1])
            new_params[name] = converted[i].params()[name.rsplit(".", 1)[-1]]
    out = LmModel(new_cfg, new_params)
    report.cache_ratio = out.cache_ratio()
    if layers and len(layers) < cfg.n_layers:
        report.notes.append(f"hybrid layout: {len(layers)}/{cfg.n_layers} layers converted")
    report.notes.append(f"init={init}; rank spec {spec_to_dict(spec)}")
    return out, report


def _is_converted(name: str, converted: dict) -> bool:
    if not name.startswith("layers.") or ".attn." not in name:
        return False
    return int(name.split(".")[1]) in converted
