"""Distillation objectives over student logits.

Every loss returns a :class:`LossReport` carrying the scalar value and the
exact gradient with respect to the logits that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError, StateError
from .numerics import DTYPE, log_softmax, softmax_with_temperature

SIMPLEX_TOL = 1e-6
Q_FLOOR = 1e-12

# Two readings of the soft-term weight in the combined objective.
HALF_T_SQUARED = "half_T_squared"        # (T/2)^2
T_SQUARED_OVER_2 = "T_squared_over_2"    # T^2/2
WEIGHT_INTERPRETATIONS = (HALF_T_SQUARED, T_SQUARED_OVER_2)
CE_WEIGHT = 0.5


@dataclass
class LossReport:
    value: float
    grad_logits: np.ndarray


@dataclass
class TeacherTarget:
    posterior: np.ndarray
    hard_label: int | None = None

    def __post_init__(self):
        self.posterior = np.asarray(self.posterior, dtype=DTYPE)
        _check_simplex(self.posterior, "posterior")


def _check_simplex(p, what):
    if p.ndim != 1 or p.size == 0:
        raise ShapeError(f"{what} must be a non-empty vector, got shape {p.shape}")
    if np.any(p < -SIMPLEX_TOL) or abs(p.sum() - 1.0) > SIMPLEX_TOL or not np.all(np.isfinite(p)):
        raise DomainError(f"{what} is not a probability vector (sum={p.sum():.9g})")


def _logits(logits, n=None):
    z = np.asarray(logits, dtype=DTYPE)
    if z.ndim != 1:
        raise ShapeError(f"logits must be a vector, got shape {z.shape}")
    if n is not None and z.size != n:
        raise ShapeError(f"logits length {z.size} does not match target length {n}")
    return z


def kl_divergence(P, Q) -> float:
    """KL(P || Q) in nats. Zero-mass P entries contribute nothing; Q is floored
    at 1e-12 before the log."""
    P = np.asarray(P, dtype=DTYPE)
    Q = np.asarray(Q, dtype=DTYPE)
    if P.shape != Q.shape:
        raise ShapeError(f"KL arguments differ in shape: {P.shape} vs {Q.shape}")
    _check_simplex(P, "P")
    _check_simplex(Q, "Q")
    return _kl(P, Q)


def _kl(P, Q):
    nz = P > 0
    q = np.maximum(Q[nz], Q_FLOOR)
    return float(np.sum(P[nz] * (np.log(P[nz]) - np.log(q))))


def soften(posterior, T: float) -> np.ndarray:
    """Raise a posterior to 1/T and renormalize.

    For a posterior that came out of a softmax this equals re-running that
    softmax with its logits divided by T.
    """
    p = np.asarray(posterior, dtype=DTYPE)
    if T == 1.0:
        return p.copy()
    with np.errstate(divide="ignore"):
        logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf) / T
    logp -= logp.max()
    e = np.exp(logp)
    return e / e.sum()


def _kl_from_logs(log_p, p, b) -> float:
    """KL(p || softmax(b)) without subtracting nearly equal logarithms.

    With d = log p - b shifted to zero p-mean, KL = sum(p d) + log(sum(p e^-d)
    + mass of softmax(b) outside supp(p)), evaluated through expm1/log1p.
    This keeps full relative precision when the two distributions are close.
    """
    support = p > 0
    b = b + float(np.sum(p[support] * (log_p[support] - b[support])))
    d = log_p[support] - b[support]
    m = np.max(log_p[support])
    lse_a = m + np.log(np.sum(np.exp(log_p[support] - m)))
    s = np.sum(p[support] * np.expm1(-d)) + np.sum(np.exp(b[~support] - lse_a))
    return max(float(np.sum(p[support] * d) + np.log1p(s)), 0.0)


def distillation_loss(target: TeacherTarget, logits, T: float) -> LossReport:
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    z = _logits(logits, target.posterior.size)
    p = soften(target.posterior, T)
    log_q = log_softmax(z, T)
    q = np.exp(log_q)
    support = p > 0
    if np.any(log_q[support] < np.log(Q_FLOOR)):
        value = _kl(p, q)           # floor on q is active
    else:
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
        value = _kl_from_logs(log_p, p, z / T)
    return LossReport(value, (q - p) / T)


def cross_entropy(hard_label: int, logits) -> LossReport:
    """Negative log-likelihood of ``hard_label`` under softmax(logits)."""
    z = _logits(logits)
    if not 0 <= int(hard_label) < z.size or int(hard_label) != hard_label:
        raise DomainError(f"label {hard_label} out of range for {z.size} classes")
    label = int(hard_label)
    logq = log_softmax(z)
    grad = np.exp(logq)
    grad[label] -= 1.0
    return LossReport(float(-logq[label]), grad)


def soft_weight(T: float, interpretation: str = HALF_T_SQUARED) -> float:
    if interpretation == HALF_T_SQUARED:
        return (T / 2.0) ** 2
    if interpretation == T_SQUARED_OVER_2:
        return T * T / 2.0
    raise DomainError(f"unknown weight interpretation {interpretation!r}")


def weighted_sum(soft: LossReport, hard: LossReport, T: float, interpretation: str = HALF_T_SQUARED) -> LossReport:
    w = soft_weight(T, interpretation)
    return LossReport(w * soft.value + CE_WEIGHT * hard.value, w * soft.grad_logits + CE_WEIGHT * hard.grad_logits)


def combined_loss(target: TeacherTarget, logits, T: float, interpretation: str = HALF_T_SQUARED) -> LossReport:
    """Soft KD term weighted by (T/2)^2 (or T^2/2) plus 0.5 x cross-entropy at T=1."""
    if target.hard_label is None:
        raise StateError("combined_loss needs a hard label on the target")
    return weighted_sum(
        distillation_loss(target, logits, T), cross_entropy(target.hard_label, logits), T, interpretation
    )


def l2_distillation_loss(target: TeacherTarget, logits) -> LossReport:
    """Squared Euclidean distance between softmax(logits) and the posterior."""
    z = _logits(logits, target.posterior.size)
    q = softmax_with_temperature(z, 1.0)
    d = q - target.posterior
    # chain rule through the softmax Jacobian diag(q) - q q^T
    v = 2.0 * d
    return LossReport(float(d @ d), q * (v - q @ v))


def l2_combined_loss(target: TeacherTarget, logits, T: float, interpretation: str = HALF_T_SQUARED) -> LossReport:
    """The l2 ablation: l2 term takes the KL term's place in the combined objective."""
    if target.hard_label is None:
        raise StateError("l2_combined_loss needs a hard label on the target")
    return weighted_sum(
        l2_distillation_loss(target, logits), cross_entropy(target.hard_label, logits), T, interpretation
    )


def batch_reduce(reports: list[LossReport]) -> LossReport:
    """Mean value and mean gradient."""
    if not reports:
        raise DomainError("cannot reduce an empty batch")
    n = reports[0].grad_logits.shape
    if any(r.grad_logits.shape != n for r in reports):
        raise ShapeError("gradients in a batch must share one shape")
    value = float(np.mean([r.value for r in reports]))
    grad = np.mean(np.stack([r.grad_logits for r in reports]), axis=0)
    return LossReport(value, grad)
