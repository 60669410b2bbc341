import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainstack.diffcore import Parameter, backward
from brainstack.harness.gradsuite import run_gradcheck
from brainstack.objective import (
    ContractError, LabelError, ScheduleConfig, ScheduledWeights, aux_weight, cross_entropy, distill_loss,
    fused_weight, progress, schedule_weights, total_loss,
)

logits_strategy = st.lists(st.floats(-30, 30), min_size=2, max_size=6)


def _ce_oracle(z, y):
    # direct formula with the max shift, in plain python floats
    m = max(z)
    return -(z[y] - m - math.log(math.fsum(math.exp(v - m) for v in z)))


def _kl_oracle(p_logits, q_logits, T):
    def sm(z):
        m = max(z)
        e = [math.exp((v - m) / T) for v in z]
        return [v / math.fsum(e) for v in e]
    p, q = sm(p_logits), sm(q_logits)
    return math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


# cross entropy

def test_ce_uniform():
    assert abs(float(cross_entropy(np.zeros(4), 2).data) - math.log(4)) < 1e-10


def test_ce_saturated():
    assert float(cross_entropy(np.array([0.0, 1000.0, 0.0]), 1).data) < 1e-12


def test_ce_closed_form():
    # ln(1 + e^-1)
    assert float(cross_entropy(np.array([1.0, 0.0]), 0).data) == pytest.approx(0.31326168751822286, abs=1e-12)


def test_ce_label_out_of_range():
    with pytest.raises(LabelError):
        cross_entropy(np.zeros(3), 3)
    with pytest.raises(IndexError):
        cross_entropy(np.zeros((2, 3)), [0, -1])


@settings(max_examples=60, deadline=None)
@given(logits_strategy, st.data())
def test_ce_matches_direct_formula(z, data):
    y = data.draw(st.integers(0, len(z) - 1))
    assert abs(float(cross_entropy(np.array(z), y).data) - _ce_oracle(z, y)) < 1e-10


def test_ce_batch_is_mean(rng):
    z = rng.standard_normal((5, 4))
    y = np.array([0, 1, 2, 3, 0])
    assert float(cross_entropy(z, y).data) == pytest.approx(np.mean([_ce_oracle(list(r), t) for r, t in zip(z, y)]),
                                                            abs=1e-12)


# distillation

def test_distill_identical_is_zero(rng):
    g = rng.standard_normal((3, 4))
    assert abs(float(distill_loss(g, [g.copy()] * 7, 4.0).data)) < 1e-9


def test_distill_closed_form():
    val = float(distill_loss(np.zeros(2), [np.array([0.0, math.log(2.0)])], 1.0).data)
    assert val == pytest.approx(0.5 * math.log(1.5) + 0.5 * math.log(0.75), abs=1e-12)
    assert val == pytest.approx(0.05889, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.lists(st.floats(-10, 10), min_size=3,
       max_size=3), min_size=1, max_size=7), st.floats(0.5, 8))
def test_distill_nonnegative_and_matches_oracle(g, rs, T):
    val = float(distill_loss(np.array(g), [np.array(r) for r in rs], T).data)
    assert val >= -1e-12
    assert val == pytest.approx(math.fsum(_kl_oracle(g, r, T) for r in rs), abs=1e-9)


def test_distill_teacher_gradient_exactly_zero(rng):
    g = Parameter("g", rng.standard_normal((2, 4)))
    r = Parameter("r", rng.standard_normal((2, 4)))
    backward(distill_loss(g, [r], 4.0))
    assert g.grad is None or np.all(g.grad == 0.0)
    assert np.any(r.grad != 0.0)


def test_distill_contract_errors():
    with pytest.raises(ContractError):
        distill_loss(np.zeros(3), [], 4.0)
    with pytest.raises(ContractError):
        distill_loss(np.zeros(3), [np.zeros(3)], 0.0)


# schedule

def test_progress_values():
    assert progress(5, 5, 20) == 0.0
    assert progress(25, 5, 20) == 1.0
    assert progress(15, 5, 20) == 0.5
    assert progress(0, 5, 20) == 0.0 and progress(40, 5, 20) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100), st.integers(0, 100), st.integers(0, 20), st.integers(1, 30))
def test_progress_monotone_bounded(e1, e2, tw, tt):
    lo, hi = sorted((e1, e2))
    assert 0.0 <= progress(lo, tw, tt) <= progress(hi, tw, tt) <= 1.0


def test_fused_weight_values():
    assert fused_weight(0.0, 0.2, 1.0) == 0.2
    assert fused_weight(1.0, 0.2, 1.0) == 1.0
    assert fused_weight(0.5, 0.2, 1.0) == pytest.approx(0.6, abs=1e-15)


def test_aux_weight_values():
    assert aux_weight(0.8, 0.7, 2.0, 1.5) == 0.0
    assert aux_weight(0.8, 0.0, 0.1, 1.5) == 0.0
    assert aux_weight(0.8, 0.5, 0.75, 1.5) == pytest.approx(0.2, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 5), st.floats(0, 5))
def test_aux_weight_monotone_in_loss(p, l1, l2):
    lo, hi = sorted((l1, l2))
    assert aux_weight(0.5, p, hi, 1.3) <= aux_weight(0.5, p, lo, 1.3)


def test_schedule_warmup():
    cfg = ScheduleConfig()
    assert schedule_weights(0, 1.0, cfg, 4).as_tuple() == (0.0, 0.8, 0.0, 0.0)


def test_schedule_boundaries():
    cfg = ScheduleConfig()  # T_warmup 5, T_transition 20
    w = schedule_weights(cfg.t_warmup, 0.0, cfg, 4)
    assert (w.lam, w.alpha, w.beta, w.gamma) == (0.2, 0.8, 0.0, 0.0)
    w = schedule_weights(cfg.t_warmup + cfg.t_transition, 0.0, cfg, 4)
    assert (w.lam, w.alpha, w.beta, w.gamma) == (1.0, 0.0, cfg.beta_max, cfg.gamma_max)


def test_schedule_gate_closed():
    cfg = ScheduleConfig()
    for epoch in (5, 12, 25, 40):
        w = schedule_weights(epoch, math.log(4), cfg, 4)
        assert (w.alpha, w.beta, w.gamma) == (0.0, 0.0, 0.0)
        assert w.lam == fused_weight(progress(epoch, 5, 20), 0.2, 1.0)


def test_schedule_midpoint():
    cfg = ScheduleConfig()
    w = schedule_weights(15, 0.5 * math.log(4), cfg, 4)
    assert w.lam == pytest.approx(0.6)
    assert w.alpha == pytest.approx(0.8 * 0.5 * 0.5)
    assert w.beta == pytest.approx(0.5 * 0.5 * 0.5)
    assert w.gamma == pytest.approx(0.5 * 0.5 * 0.5 * 0.5)


def test_schedule_config_invariants():
    with pytest.raises(ValueError):
        ScheduleConfig(lambda_min=1.5)
    with pytest.raises(ValueError):
        ScheduleConfig(t_transition=0)
    with pytest.raises(ContractError):
        schedule_weights(10, 0.5, ScheduleConfig())  # no K and no explicit ceiling


# total

def test_total_loss_examples():
    assert total_loss(0.7, 0.3, 0.2, 0.1, ScheduledWeights(1, 0, 0, 0)).total == 0.7
    assert total_loss(0, 0, 0, 0, ScheduledWeights(0.3, 0.2, 0.1, 0.4)).total == 0.0
    assert total_loss(1, 1, 1, 1, ScheduledWeights(0.5, 0.25, 0.2, 0.05)).total == pytest.approx(1.0, abs=1e-15)


def test_total_loss_rejects_negative_component():
    with pytest.raises(ContractError):
        total_loss(-0.1, 0, 0, 0, ScheduledWeights(1, 0, 0, 0))


def test_zero_weight_terms_carry_no_gradient():
    a, b = Parameter("a", 0.5), Parameter("b", 0.7)
    bd = total_loss(a, b, 0.0, 0.0, ScheduledWeights(1.0, 0.0, 0.0, 0.0))
    backward(bd.graph)
    assert a.grad == 1.0 and (b.grad is None or b.grad == 0.0)


def test_objective_gradcheck():
    assert all(r.passed for r in run_gradcheck("objective", range(5)))
