"""Distillation, cross-entropy and DPO training for the toy LM.

Losses are built from taped primitives so ``backward`` reaches every student
parameter; teacher and reference models are evaluated without a tape and so
never accumulate gradients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import PrefPair, rng_stream, sample_windows
from .errors import ConfigError, DimensionError, VocabError
from .model import LmModel, forward
from .tensor import GradTape, Tensor


@dataclass
class TrainPlan:
    lr: float = 3e-3
    betas: tuple = (0.9, 0.98)
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 200
    seq_len: int = 64
    ce_weight: float = 0.0
    kl_weight: float = 1.0
    dpo_beta: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0
    warmup_frac: float = 0.05
    eval_every: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.ce_weight < 0 or self.kl_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.dpo_beta <= 0:
            raise ConfigError("dpo_beta must be positive")
        if self.lr < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("lr/weight_decay must be >= 0 and eps > 0")
        if self.batch_size < 1 or self.steps < 0 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be >= 1, steps >= 0")

    def check_sft(self) -> None:
        if self.ce_weight == 0 and self.kl_weight == 0:
            raise ConfigError("ce_weight and kl_weight cannot both be zero")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train plan keys: {sorted(unknown)}")
        return cls(**d)


# -- losses -------------------------------------------------------------------
def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _flat(t: Tensor) -> Tensor:
    return T.reshape(t, (-1, t.shape[-1]))


def kl_distill_loss(student_logits: Tensor, teacher_logits, reduction: str = "mean") -> Tensor:
    """KL(teacher || student) per position, averaged (or summed) over positions.

    The teacher side is a constant: pass a Tensor or array, no gradient flows to it.
    Both distributions go through the same log-softmax, so identical logits give
    exactly zero loss and exactly zero gradient.
    """
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if tuple(t_data.shape) != tuple(student_logits.shape):
        raise DimensionError(f"student logits {student_logits.shape} vs teacher {t_data.shape}")
    s = student_logits.data
    logp_t = _log_softmax_np(t_data.astype(s.dtype, copy=False))
    logp_s = _log_softmax_np(s)
    p_t = np.exp(logp_t)
    n_pos = int(np.prod(s.shape[:-1])) if reduction == "mean" else 1
    value = np.asarray((p_t * (logp_t - logp_s)).sum() / n_pos, dtype=s.dtype)

    def bw(g):
        return ((np.exp(logp_s) - p_t) * (g / n_pos)).astype(s.dtype, copy=False),

    return T.custom_op(value, (student_logits,), bw)


def ce_loss(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` (ids shaped like logits.shape[:-1])."""
    ids = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if ids.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {ids.shape} do not match logits {logits.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise VocabError(f"target id out of range [0, {V})")
    lp = T.log_softmax_rows(_flat(logits))
    return T.scale(T.tsum(T.gather_last(lp, ids.reshape(-1))), -1.0 / ids.size)


def mixed_sft_loss(student_logits: Tensor, teacher_logits, targets, ce_w: float, kl_w: float) -> Tensor:
    if ce_w < 0 or kl_w < 0 or (ce_w == 0 and kl_w == 0):
        raise ConfigError("weights must be nonnegative and not both zero")
    return _mixed_terms(student_logits, teacher_logits, targets, ce_w, kl_w)[0]


def _mixed_terms(student_logits, teacher_logits, targets, ce_w, kl_w):
    """(total loss, ce value, mean kl value, summed kl value); unweighted terms are still logged."""
    parts = []
    n_pos = int(np.prod(student_logits.shape[:-1]))
    if ce_w:
        ce = ce_loss(student_logits, targets)
        ce_v = ce.item()
        parts.append(ce if ce_w == 1 else T.scale(ce, ce_w))
    else:
        lp = _log_softmax_np(student_logits.data.reshape(n_pos, -1))
        ce_v = float(-np.take_along_axis(lp, np.asarray(targets).reshape(-1, 1), axis=-1).mean())
    if kl_w:
        kl = kl_distill_loss(student_logits, teacher_logits)
        kl_v = kl.item()
        parts.append(kl if kl_w == 1 else T.scale(kl, kl_w))
    elif teacher_logits is not None:
        kl_v = kl_distill_loss(Tensor(student_logits.data), teacher_logits).item()
    else:
        kl_v = math.nan
    total = parts[0] if len(parts) == 1 else T.add(parts[0], parts[1])
    return total, ce_v, kl_v, kl_v * n_pos


def dpo_loss(policy_chosen, policy_rejected, ref_chosen, ref_rejected, beta: float) -> Tensor:
    """-log sigmoid(beta * margin), batch-mean; reference log-probs are constants."""
    if beta <= 0:
        raise ConfigError("beta must be positive")
    pc, pr = T.as_tensor(policy_chosen), T.as_tensor(policy_rejected)
    rc = np.asarray(ref_chosen.data if isinstance(ref_chosen, Tensor) else ref_chosen, dtype=pc.dtype)
    rr = np.asarray(ref_rejected.data if isinstance(ref_rejected, Tensor) else ref_rejected, dtype=pc.dtype)
    margin = T.sub(T.sub(pc, pr), Tensor(rc - rr))
    return T.mean(T.softplus(T.scale(margin, -beta)))


# -- optimiser ------------------------------------------------------------------
@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, plan: TrainPlan,
               t: int, lr: Optional[float] = None):
    """One AdamW update in place (decoupled decay, bias-corrected moments)."""
    if t < 1:
        raise ValueError("step index t must be >= 1")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and optimiser state differ in length")
    lr = plan.lr if lr is None else lr
    b1, b2 = plan.betas
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} / state {m.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + plan.eps)
        if plan.weight_decay:
            p.data -= lr * plan.weight_decay * p.data
        p.data -= (lr * upd).astype(p.dtype, copy=False)
    return params, state


def clip_grads(grads: Sequence[np.ndarray], max_norm: float):
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads if g is not None))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        grads = [None if g is None else g * s for g in grads]
    return grads, norm


def lr_at(step: int, plan: TrainPlan) -> float:
    """Linear warmup over ``warmup_frac`` of the run, then constant. ``step`` counts from 1."""
    warm = max(1, int(math.ceil(plan.warmup_frac * plan.steps)))
    return plan.lr * min(1.0, step / warm)


def _collect(model: LmModel):
    params = model.parameters()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    return params, grads


# -- loops -------------------------------------------------------------------------
def _sft_loop(student: LmModel, teacher: Optional[LmModel], corpus, plan: TrainPlan, ce_w: float, kl_w: float,
              eval_fn: Optional[Callable] = None):
    if teacher is not None and teacher.config.vocab_size != student.config.vocab_size:
        raise ConfigError("teacher and student vocabularies differ")
    corpus = np.asarray(corpus)
    data_rng = rng_stream(plan.seed, "data")
    params = student.parameters()
    state = AdamState.zeros_like(params)
    student.requires_grad_(True)
    trace = []
    for step in range(plan.steps + 1):
        x, y = sample_windows(corpus, plan.batch_size, plan.seq_len, data_rng)
        t_logits = forward(teacher, x).data if teacher is not None else None
        student.zero_grad()
        with GradTape() as tape:
            s_logits = forward(student, x)
            loss, ce_v, kl_v, kl_sum = _mixed_terms(s_logits, t_logits, y, ce_w, kl_w)
        lr = lr_at(step + 1, plan)
        row = {"step": step, "ce_loss": ce_v, "kl_loss": kl_v, "total": loss.item(), "lr": lr,
               "kl_sum": kl_sum}
        if eval_fn is not None and plan.eval_every and step % plan.eval_every == 0:
            row["eval"] = eval_fn(student)
        trace.append(row)
        if step == plan.steps:
            break  # the final row measures the trained weights; no update follows
        tape.backward(loss)
        _, grads = _collect(student)
        grads, _ = clip_grads(grads, plan.grad_clip)
        adamw_step(params, grads, state, plan, step + 1, lr=lr)
    student.zero_grad()
    student.requires_grad_(False)
    return student, trace


def distill_train(student: LmModel, teacher: LmModel, corpus, plan: TrainPlan,
                  eval_fn: Optional[Callable] = None):
    """KL (optionally CE-mixed) distillation from a frozen teacher, in place.

    Returns (student, trace); ``trace[s]`` is measured with the weights after
    ``s`` updates, so the trace has ``plan.steps + 1`` rows.
    """
    plan.check_sft()
    teacher.requires_grad_(False)
    return _sft_loop(student, teacher, corpus, plan, plan.ce_weight, plan.kl_weight, eval_fn)


def train_lm(model: LmModel, corpus, plan: TrainPlan, eval_fn: Optional[Callable] = None):
    """Plain next-token cross-entropy training (used to make toy teachers)."""
    return _sft_loop(model, None, corpus, plan, 1.0, 0.0, eval_fn)


def sequence_logprob(model: LmModel, prompt: Sequence[int], continuation: Sequence[int]) -> Tensor:
    """Sum of log p(continuation | prompt) as a (taped, if active) scalar."""
    ids = list(prompt) + list(continuation)
    logits = forward(model, ids[:-1])
    lp = T.log_softmax_rows(logits)
    n_p = len(prompt)
    picked = T.gather_last(lp[n_p - 1:], np.asarray(continuation))
    return T.tsum(picked)


def _batch_logps(model: LmModel, pairs: Sequence[PrefPair]):
    c = T.concat([T.reshape(sequence_logprob(model, p.prompt, p.chosen), (1,)) for p in pairs], axis=-1)
    r = T.concat([T.reshape(sequence_logprob(model, p.prompt, p.rejected), (1,)) for p in pairs], axis=-1)
    return c, r


def preference_margin(model: LmModel, pairs: Sequence[PrefPair]) -> float:
    """Mean log p(chosen) - log p(rejected) over pairs."""
    c, r = _batch_logps(model, pairs)
    return float(np.mean(c.data - r.data))


def dpo_train(student: LmModel, pairs: Sequence[PrefPair], plan: TrainPlan,
              reference: Optional[LmModel] = None):
    """DPO against a frozen copy of the starting student. Returns (student, reference, trace)."""
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("no preference pairs")
    if reference is None:
        reference = student.copy()
    reference.requires_grad_(False)
    rng = rng_stream(plan.seed, "data")
    params = student.parameters()
    state = AdamState.zeros_like(params)
    student.requires_grad_(True)
    trace = []
    for step in range(plan.steps):
        idx = rng.choice(len(pairs), size=min(plan.batch_size, len(pairs)), replace=False)
        batch = [pairs[i] for i in idx]
        ref_c, ref_r = _batch_logps(reference, batch)
        student.zero_grad()
        with GradTape() as tape:
            pol_c, pol_r = _batch_logps(student, batch)
            loss = dpo_loss(pol_c, pol_r, ref_c, ref_r, plan.dpo_beta)
        lr = lr_at(step + 1, plan)
        trace.append({"step": step, "loss": loss.item(), "margin": float(np.mean(pol_c.data - pol_r.data)),
                      "lr": lr})
        tape.backward(loss)
        _, grads = _collect(student)
        grads, _ = clip_grads(grads, plan.grad_clip)
        adamw_step(params, grads, state, plan, step + 1, lr=lr)
    student.zero_grad()
    student.requires_grad_(False)
    return student, reference, trace


TRACE_COLUMNS = ("step", "ce_loss", "kl_loss", "total", "lr")


def write_trace_csv(trace: Sequence[dict], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])


# -- gradient checking ----------------------------------------------------------------
@dataclass
class GradCheckReport:
    errors: dict  # name -> max relative error

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol


def grad_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare taped gradients against central differences.

    ``params`` is a dict name -> Tensor (or a list).  Per group the error is
    ||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2), which stays
    meaningful when individual entries are near zero.  ``max_entries`` samples
    a subset of coordinates per group for large tensors.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        if p.dtype != np.float64:
            raise ConfigError("grad_check needs double precision parameters")
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = loss_fn().item()
            flat[k] = orig - h
            fm = loss_fn().item()
            flat[k] = orig
            numeric[j] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[idx]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric))
        errors[name] = float(np.linalg.norm(a - numeric) / denom) if denom > 0 else 0.0
    for p in params.values():
        p.grad = None
    return GradCheckReport(errors)
