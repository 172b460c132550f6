import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegkd.errors import DomainError, ShapeError, StateError
from eegkd.losses import (
    LossReport,
    T_SQUARED_OVER_2,
    TeacherTarget,
    batch_reduce,
    combined_loss,
    cross_entropy,
    distillation_loss,
    kl_divergence,
    l2_combined_loss,
    l2_distillation_loss,
    weighted_sum,
)
from eegkd.numerics import softmax_with_temperature


def fd_grad(f, z, eps=1e-6):
    g = np.zeros_like(z)
    for j in range(z.size):
        up, down = z.copy(), z.copy()
        up[j] += eps
        down[j] -= eps
        g[j] = (f(up) - f(down)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


# -- KL ------------------------------------------------------------------------

def test_kl_identity():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_divergence(p, p) < 1e-12


def test_kl_worked_value():
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.143841, abs=1e-6)


def test_kl_clamps_zero_q():
    v = kl_divergence([1.0, 0.0], [0.0, 1.0])
    assert math.isfinite(v)
    assert v == pytest.approx(-math.log(1e-12))
    assert v == pytest.approx(27.631021, abs=1e-6)


def test_kl_length_mismatch():
    with pytest.raises(ShapeError):
        kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


def test_kl_rejects_non_simplex():
    with pytest.raises(DomainError):
        kl_divergence([0.5, 0.3], [0.5, 0.5])


def test_kl_non_negative_random(rng):
    for _ in range(1000):
        k = rng.integers(2, 10)
        p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
        assert kl_divergence(p, q) >= 0.0


# -- distillation --------------------------------------------------------------

def test_distillation_zero_at_match():
    z = np.array([0.3, -1.2, 2.0])
    T = 2.0
    r = distillation_loss(TeacherTarget(softmax_with_temperature(z, 1.0)), z, T)
    assert r.value == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(r.grad_logits, 0.0, atol=1e-15)


def test_distillation_worked_value():
    r = distillation_loss(TeacherTarget([0.5, 0.5]), [math.log(2), 0.0], 1.0)
    expected = 0.5 * math.log(0.5 / (2 / 3)) + 0.5 * math.log(0.5 / (1 / 3))
    assert r.value == pytest.approx(expected, abs=1e-15)
    assert r.value == pytest.approx(0.058891, abs=1e-6)
    np.testing.assert_allclose(r.grad_logits, [2 / 3 - 0.5, 1 / 3 - 0.5], atol=1e-15)


def _mp_distillation(post, z, T):
    mpmath.mp.dps = 40
    a = [mpmath.mpf(float(x)) ** (mpmath.mpf(1) / T) if x > 0 else mpmath.mpf(0) for x in post]
    sa = sum(a)
    p = [x / sa for x in a]
    e = [mpmath.exp(mpmath.mpf(float(x)) / T) for x in z]
    se = sum(e)
    return float(sum(pi * mpmath.log(pi / (ei / se)) for pi, ei in zip(p, e) if pi > 0))


def test_distillation_value_matches_high_precision_oracle(rng):
    for i in range(100):
        k = int(rng.integers(2, 8))
        post = rng.dirichlet(np.ones(k))
        if i % 4 == 0:
            post[0] = 0.0
            post /= post.sum()
        z = rng.normal(size=k) * rng.choice([1e-3, 1.0, 4.0])
        T = float(rng.choice([1, 2, 5, 10]))
        ref = _mp_distillation(post, z, T)
        assert distillation_loss(TeacherTarget(post), z, T).value == pytest.approx(ref, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("T", [1.0, 2.0, 5.0, 10.0])
def test_distillation_gradient_fd(rng, T):
    for _ in range(20):
        k = int(rng.integers(2, 8))
        target = TeacherTarget(rng.dirichlet(np.ones(k)))
        z = rng.normal(0, 2, size=k)
        a = distillation_loss(target, z, T).grad_logits
        n = fd_grad(lambda v: distillation_loss(target, v, T).value, z)
        assert rel_err(a, n) < 1e-6


def test_distillation_shift_invariant(rng):
    target = TeacherTarget(rng.dirichlet(np.ones(5)))
    z = rng.normal(size=5)
    a = distillation_loss(target, z, 3.0)
    b = distillation_loss(target, z + 17.5, 3.0)
    assert a.value == pytest.approx(b.value, abs=1e-12)
    np.testing.assert_allclose(a.grad_logits, b.grad_logits, atol=1e-12)


def test_distillation_rejects_bad_temperature():
    with pytest.raises(DomainError):
        distillation_loss(TeacherTarget([0.5, 0.5]), [0.0, 0.0], 0.0)


def test_teacher_softening_matches_logit_division(rng):
    # a posterior that came from softmax(u) softened at T equals softmax(u / T)
    u = rng.normal(size=6)
    z = rng.normal(size=6)
    T = 4.0
    r = distillation_loss(TeacherTarget(softmax_with_temperature(u, 1.0)), z, T)
    p = softmax_with_temperature(u, T)
    q = softmax_with_temperature(z, T)
    np.testing.assert_allclose(r.grad_logits, (q - p) / T, atol=1e-14)


# -- cross entropy -------------------------------------------------------------

def test_ce_confident_is_zero():
    assert cross_entropy(1, [-50.0, 50.0, -50.0]).value == pytest.approx(0.0, abs=1e-40)


def test_ce_uniform_four():
    r = cross_entropy(2, np.zeros(4))
    assert r.value == pytest.approx(math.log(4), abs=1e-15)
    assert r.value == pytest.approx(1.386294, abs=1e-6)


def test_ce_grad_sums_to_zero(rng):
    for _ in range(50):
        r = cross_entropy(int(rng.integers(5)), rng.normal(0, 3, size=5))
        assert abs(r.grad_logits.sum()) < 1e-12


def test_ce_grad_fd(rng):
    for _ in range(20):
        z = rng.normal(0, 2, size=6)
        y = int(rng.integers(6))
        assert rel_err(cross_entropy(y, z).grad_logits, fd_grad(lambda v: cross_entropy(y, v).value, z)) < 1e-6


def test_ce_label_out_of_range():
    with pytest.raises(DomainError):
        cross_entropy(3, np.zeros(3))


# -- combined / l2 -------------------------------------------------------------

@pytest.mark.parametrize("T, expected", [(5.0, 1.75), (2.0, 0.7)])
def test_combined_arithmetic(T, expected):
    soft = LossReport(0.2, np.zeros(2))
    hard = LossReport(1.0, np.zeros(2))
    assert weighted_sum(soft, hard, T).value == pytest.approx(expected, abs=1e-15)


def test_combined_zero():
    z = np.array([0.0, 0.0])
    assert weighted_sum(LossReport(0.0, z), LossReport(0.0, z), 5.0).value == 0.0


def test_combined_alternative_reading():
    soft = LossReport(0.2, np.zeros(2))
    hard = LossReport(1.0, np.zeros(2))
    assert weighted_sum(soft, hard, 5.0, T_SQUARED_OVER_2).value == pytest.approx(12.5 * 0.2 + 0.5)


def test_combined_is_weighted_sum_of_components(rng):
    target = TeacherTarget(rng.dirichlet(np.ones(4)), hard_label=2)
    z = rng.normal(size=4)
    T = 5.0
    r = combined_loss(target, z, T)
    kd = distillation_loss(target, z, T)
    ce = cross_entropy(2, z)
    assert r.value == pytest.approx(6.25 * kd.value + 0.5 * ce.value, rel=1e-14)
    np.testing.assert_allclose(r.grad_logits, 6.25 * kd.grad_logits + 0.5 * ce.grad_logits, rtol=1e-14)


def test_combined_one_hot_target_reduces_to_ce(rng):
    z = rng.normal(size=3)
    target = TeacherTarget([0.0, 1.0, 0.0], hard_label=1)
    r = combined_loss(target, z, 1.0)
    ce = cross_entropy(1, z).value
    assert distillation_loss(target, z, 1.0).value == pytest.approx(ce, rel=1e-12)
    assert r.value == pytest.approx(0.25 * ce + 0.5 * ce, rel=1e-12)


def test_combined_needs_label():
    with pytest.raises(StateError):
        combined_loss(TeacherTarget([0.5, 0.5]), [0.0, 0.0], 2.0)


def test_combined_gradient_fd(rng):
    for T in (1.0, 2.0, 5.0, 10.0):
        for _ in range(5):
            target = TeacherTarget(rng.dirichlet(np.ones(5)), int(rng.integers(5)))
            z = rng.normal(size=5)
            a = combined_loss(target, z, T).grad_logits
            n = fd_grad(lambda v: combined_loss(target, v, T).value, z)
            assert rel_err(a, n) < 1e-6


def test_l2_zero_at_match():
    z = np.array([0.5, -0.5, 1.0])
    assert l2_distillation_loss(TeacherTarget(softmax_with_temperature(z)), z).value == pytest.approx(0.0, abs=1e-30)


def test_l2_worked_value():
    assert l2_distillation_loss(TeacherTarget([1.0, 0.0]), [0.0, 0.0]).value == pytest.approx(0.5, abs=1e-15)


def test_l2_gradient_fd(rng):
    for _ in range(20):
        target = TeacherTarget(rng.dirichlet(np.ones(4)), int(rng.integers(4)))
        z = rng.normal(0, 2, size=4)
        assert rel_err(l2_distillation_loss(target, z).grad_logits,
                       fd_grad(lambda v: l2_distillation_loss(target, v).value, z)) < 1e-6
        assert rel_err(l2_combined_loss(target, z, 5.0).grad_logits,
                       fd_grad(lambda v: l2_combined_loss(target, v, 5.0).value, z)) < 1e-6


def test_l2_length_mismatch():
    with pytest.raises(ShapeError):
        l2_distillation_loss(TeacherTarget([0.5, 0.5]), [0.0, 0.0, 0.0])


# -- batch ---------------------------------------------------------------------

def test_batch_reduce_single():
    r = LossReport(1.5, np.array([1.0, -1.0]))
    out = batch_reduce([r])
    assert out.value == 1.5
    np.testing.assert_array_equal(out.grad_logits, r.grad_logits)


def test_batch_reduce_mean():
    out = batch_reduce([LossReport(1.0, np.zeros(2)), LossReport(3.0, np.ones(2))])
    assert out.value == 2.0
    np.testing.assert_array_equal(out.grad_logits, [0.5, 0.5])


def test_batch_reduce_empty():
    with pytest.raises(DomainError):
        batch_reduce([])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_mean_of_grads_is_grad_of_mean(n, seed):
    rng = np.random.default_rng(seed)
    targets = [TeacherTarget(rng.dirichlet(np.ones(3)), int(rng.integers(3))) for _ in range(n)]
    zs = rng.normal(size=(n, 3))
    red = batch_reduce([combined_loss(t, z, 2.0) for t, z in zip(targets, zs)])
    # d/dz_i of the batch mean is grad_i / n; summing over i recovers the mean gradient times n / n
    grads = np.stack([combined_loss(t, z, 2.0).grad_logits for t, z in zip(targets, zs)])
    np.testing.assert_allclose(red.grad_logits, grads.sum(axis=0) / n, atol=1e-15)
    assert red.value == pytest.approx(np.mean([combined_loss(t, z, 2.0).value for t, z in zip(targets, zs)]))
