import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from xmla.attention import MLA
from xmla.errors import ConfigError, DimensionError, VocabError
from xmla.model import forward, init_model, upcycle_model
from xmla.tensor import GradTape, Tensor
from xmla.training import (TRACE_COLUMNS, AdamState, TrainPlan, adamw_step, ce_loss, clip_grads, distill_train,
                           dpo_loss, dpo_train, grad_check, kl_distill_loss, lr_at, mixed_sft_loss,
                           preference_margin, sequence_logprob, train_lm, write_trace_csv)
from xmla.upcycle import FixedRanks, random_init_attention
from xmla.data import synth_pref_pairs

from conftest import SMALL_GEO, small_config


def log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# -- KL ----------------------------------------------------------------------------
def test_kl_identical_is_zero(rng):
    x = rng.standard_normal((2, 5, 7))
    assert abs(kl_distill_loss(Tensor(x), x).item()) <= 1e-12


def test_kl_closed_form():
    teacher = np.log(np.array([[0.75, 0.25]]))
    val = kl_distill_loss(Tensor(np.zeros((1, 2))), teacher).item()
    assert val == pytest.approx(0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-12)
    assert val == pytest.approx(0.13081, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-20, 20)),
       hnp.arrays(np.float64, (3, 6), elements=st.floats(-20, 20)))
def test_kl_nonnegative_and_zero_iff_equal(s, t):
    val = kl_distill_loss(Tensor(s), t).item()
    assert val >= -1e-12
    ps, pt = np.exp(log_softmax(s)), np.exp(log_softmax(t))
    if np.abs(ps - pt).max() > 1e-3:
        assert val > 1e-10


def test_kl_sum_vs_mean_and_oracle(rng):
    s, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    oracle = np.sum(np.exp(log_softmax(t)) * (log_softmax(t) - log_softmax(s)), axis=-1)
    assert kl_distill_loss(Tensor(s), t).item() == pytest.approx(oracle.mean(), abs=1e-12)
    assert kl_distill_loss(Tensor(s), t, "sum").item() == pytest.approx(oracle.sum(), abs=1e-12)
    with pytest.raises(DimensionError):
        kl_distill_loss(Tensor(s), t[:2])
    with pytest.raises(ConfigError):
        kl_distill_loss(Tensor(s), t, "max")


def test_kl_gradient_and_teacher_constant(rng):
    s, t = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    st_, tt = Tensor(s, requires_grad=True), Tensor(t, requires_grad=True)
    rep = grad_check(lambda: kl_distill_loss(st_, tt), {"s": st_})
    assert rep.passed(1e-8)
    with GradTape() as tape:
        loss = kl_distill_loss(st_, tt)
    tape.backward(loss)
    assert tt.grad is None


# -- CE ----------------------------------------------------------------------------
def test_ce_examples(rng):
    big = np.full((1, 4), -50.0)
    big[0, 2] = 50.0
    assert ce_loss(Tensor(big), [2]).item() == pytest.approx(0.0, abs=1e-12)
    assert ce_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    x = rng.standard_normal((2, 3, 5))
    y = rng.integers(0, 5, size=(2, 3))
    oracle = -np.take_along_axis(log_softmax(x), y[..., None], -1).mean()
    assert abs(ce_loss(Tensor(x), y).item() - oracle) <= 1e-10
    with pytest.raises(VocabError):
        ce_loss(Tensor(x), np.full((2, 3), 5))
    with pytest.raises(DimensionError):
        ce_loss(Tensor(x), [1, 2])


def test_mixed_loss_linearity(rng):
    s, t = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
    y = rng.integers(0, 6, size=4)
    ce, kl = ce_loss(Tensor(s), y).item(), kl_distill_loss(Tensor(s), t).item()
    assert mixed_sft_loss(Tensor(s), t, y, 1, 0).item() == ce
    assert mixed_sft_loss(Tensor(s), t, y, 0, 1).item() == kl
    assert abs(mixed_sft_loss(Tensor(s), t, y, 1, 0.1).item() - (ce + 0.1 * kl)) <= 1e-12
    with pytest.raises(ConfigError):
        mixed_sft_loss(Tensor(s), t, y, 0, 0)


# -- DPO -----------------------------------------------------------------------------
def test_dpo_closed_forms():
    assert dpo_loss([1.0], [1.0], [0.5], [0.5], 0.1).item() == pytest.approx(math.log(2), abs=1e-12)
    assert dpo_loss([2.0], [0.0], [0.0], [0.0], 1.0).item() == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    vals = [dpo_loss([m], [0.0], [0.0], [0.0], 0.5).item() for m in np.linspace(-5, 5, 21)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ConfigError):
        dpo_loss([0.0], [0.0], [0.0], [0.0], 0.0)


def test_dpo_gradient_is_sigmoid(rng):
    pc = Tensor(rng.standard_normal(4), requires_grad=True)
    pr = Tensor(rng.standard_normal(4), requires_grad=True)
    rc, rr, beta = rng.standard_normal(4), rng.standard_normal(4), 0.7
    with GradTape() as tape:
        loss = dpo_loss(pc, pr, rc, rr, beta)
    tape.backward(loss)
    margin = (pc.data - pr.data) - (rc - rr)
    want = -beta / (1 + np.exp(beta * margin)) / 4
    np.testing.assert_allclose(pc.grad, want, atol=1e-12)
    np.testing.assert_allclose(pr.grad, -want, atol=1e-12)
    pc.grad = pr.grad = None
    assert grad_check(lambda: dpo_loss(pc, pr, rc, rr, beta), {"pc": pc, "pr": pr}).passed(1e-8)


# -- optimiser ------------------------------------------------------------------------
def test_adamw_zero_grad_is_noop(rng):
    p = Tensor(rng.standard_normal(5))
    before = p.data.copy()
    adamw_step([p], [np.zeros(5)], AdamState.zeros_like([p]), TrainPlan(), 1)
    np.testing.assert_array_equal(p.data, before)


def test_adamw_first_step_closed_form(rng):
    p = Tensor(rng.standard_normal(6))
    g = rng.standard_normal(6)
    before = p.data.copy()
    plan = TrainPlan(lr=0.01)
    adamw_step([p], [g], AdamState.zeros_like([p]), plan, 1)
    np.testing.assert_allclose(p.data - before, -0.01 * g / (np.abs(g) + plan.eps), rtol=1e-12)


def test_adamw_decay_only(rng):
    p = Tensor(rng.standard_normal(3))
    before = p.data.copy()
    adamw_step([p], [np.zeros(3)], AdamState.zeros_like([p]), TrainPlan(lr=0.1, weight_decay=0.5), 1)
    np.testing.assert_allclose(p.data, before * (1 - 0.05), rtol=1e-15)


def test_adamw_matches_reference_loop(rng):
    p = Tensor(rng.standard_normal(4))
    ref = p.data.copy()
    m = v = np.zeros(4)
    state = AdamState.zeros_like([p])
    plan = TrainPlan(lr=0.05, weight_decay=0.01, betas=(0.9, 0.98))
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adamw_step([p], [g], state, plan, t)
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        ref = ref - 0.05 * 0.01 * ref
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.98 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_clip_and_schedule():
    grads, norm = clip_grads([np.array([3.0, 4.0])], 1.0)
    assert norm == 5.0 and np.linalg.norm(grads[0]) == pytest.approx(1.0)
    same, _ = clip_grads([np.array([0.3, 0.4])], 1.0)
    np.testing.assert_array_equal(same[0], [0.3, 0.4])
    plan = TrainPlan(lr=1.0, steps=100)
    assert [lr_at(s, plan) for s in (1, 3, 5, 6, 100)] == [0.2, 0.6, 1.0, 1.0, 1.0]


def test_plan_validation():
    assert TrainPlan().betas == (0.9, 0.98)
    for bad in (dict(betas=(0.9,)), dict(ce_weight=-1), dict(dpo_beta=0), dict(batch_size=0)):
        with pytest.raises(ConfigError):
            TrainPlan(**bad)
    with pytest.raises(ConfigError):
        TrainPlan.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        TrainPlan(ce_weight=0, kl_weight=0).check_sft()
    assert TrainPlan.from_dict(TrainPlan(lr=0.5).to_dict()) == TrainPlan(lr=0.5)


# -- grad check --------------------------------------------------------------------------
def test_grad_check_linear_quadratic(rng):
    w = Tensor(rng.standard_normal((4, 3)))
    x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
    rep = grad_check(lambda: ((Tensor(x) @ w - y) * (Tensor(x) @ w - y)).sum(), {"w": w})
    assert rep.passed(1e-8)


def test_grad_check_mla_block_under_kl(rng):
    w = random_init_attention(SMALL_GEO, FixedRanks(12, 10), seed=0, enable_ln=True)
    from xmla.attention import mla_forward_naive
    h = Tensor(rng.standard_normal((3, SMALL_GEO.d)))
    head = rng.standard_normal((SMALL_GEO.d, 7))
    teacher = rng.standard_normal((3, 7))

    def loss():
        out, _ = mla_forward_naive(h, w, SMALL_GEO)
        return kl_distill_loss(out @ Tensor(head), teacher)

    rep = grad_check(loss, w.params())
    assert rep.passed(1e-4), rep.errors


def test_grad_check_needs_double():
    with pytest.raises(ConfigError):
        grad_check(lambda: Tensor(0.0), {"a": Tensor(np.ones(2, dtype=np.float32))})


# -- loops --------------------------------------------------------------------------------
def test_self_distillation_stays_at_zero(toy_teacher, toy_corpus):
    student, trace = distill_train(toy_teacher.copy(), toy_teacher, toy_corpus[:27000],
                                   TrainPlan(steps=20, batch_size=4, seq_len=32, lr=1e-3))
    assert trace[0]["kl_loss"] <= 1e-8
    assert max(r["kl_loss"] for r in trace) <= 1e-8
    assert len(trace) == 21


def test_teacher_gets_no_gradient(toy_teacher, toy_corpus):
    before = toy_teacher.state_bytes()
    student, _ = upcycle_model(toy_teacher.astype(np.float64), FixedRanks(48, 24))
    distill_train(student.astype(np.float32), toy_teacher, toy_corpus[:27000],
                  TrainPlan(steps=3, batch_size=2, seq_len=16))
    assert all(p.grad is None for p in toy_teacher.parameters())
    assert toy_teacher.state_bytes() == before


def test_traces_are_deterministic(toy_corpus):
    def run():
        m = init_model(small_config(vocab_size=258), seed=0, dtype=np.float32)
        buf = io.StringIO()
        write_trace_csv(train_lm(m, toy_corpus, TrainPlan(steps=5, batch_size=2, seq_len=16, seed=3))[1], buf)
        return buf.getvalue()
    assert run() == run()


def test_markov_training_reduces_loss(toy_corpus):
    m = init_model(small_config(vocab_size=258), seed=1, dtype=np.float32)
    _, trace = train_lm(m, toy_corpus, TrainPlan(steps=200, batch_size=8, seq_len=32, lr=3e-3))
    ce = np.array([r["ce_loss"] for r in trace])
    assert ce[-20:].mean() < ce[:20].mean()


def test_svd_init_beats_random_at_step_zero(toy_teacher, toy_corpus):
    donor = toy_teacher.astype(np.float64)
    plan = TrainPlan(steps=0, batch_size=8, seq_len=48, seed=1)
    svd, _ = upcycle_model(donor, FixedRanks(48, 24))
    rnd, _ = upcycle_model(donor, FixedRanks(48, 24), init="random", seed=1)
    _, t_svd = distill_train(svd.astype(np.float32), toy_teacher, toy_corpus[27000:], plan)
    _, t_rnd = distill_train(rnd.astype(np.float32), toy_teacher, toy_corpus[27000:], plan)
    assert t_svd[0]["kl_loss"] < t_rnd[0]["kl_loss"]


def test_trace_csv(toy_corpus):
    m = init_model(small_config(vocab_size=258), seed=0, dtype=np.float32)
    _, trace = train_lm(m, toy_corpus, TrainPlan(steps=2, batch_size=2, seq_len=8))
    buf = io.StringIO()
    write_trace_csv(trace, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS) and len(lines) == 4


def test_dpo_zero_steps_is_noop(toy_teacher, toy_corpus):
    pairs = synth_pref_pairs(toy_teacher, toy_corpus, 4, 8, 4, seed=0)
    student = toy_teacher.copy()
    student, ref, trace = dpo_train(student, pairs, TrainPlan(steps=0))
    assert trace == [] and student.state_bytes() == toy_teacher.state_bytes()


def test_dpo_increases_margin_with_frozen_reference(toy_teacher, toy_corpus):
    pairs = synth_pref_pairs(toy_teacher, toy_corpus, 16, 12, 6, seed=1)
    student = toy_teacher.copy()
    before = preference_margin(student, pairs)
    ref_bytes = student.state_bytes()
    student, ref, _ = dpo_train(student, pairs, TrainPlan(steps=15, lr=1e-3, batch_size=8))
    assert preference_margin(student, pairs) > before
    assert ref.state_bytes() == ref_bytes


def test_sequence_logprob_matches_forward(toy_teacher):
    prompt, cont = [97, 98, 99], [100, 101]
    lp = log_softmax(forward(toy_teacher, prompt + cont[:-1]).data.astype(np.float64))
    want = lp[2, 100] + lp[3, 101]
    assert sequence_logprob(toy_teacher, prompt, cont).item() == pytest.approx(want, abs=1e-4)
