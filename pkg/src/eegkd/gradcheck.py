"""Central finite-difference check of every parameter gradient.

The check runs a tiny instance (3 timesteps, 4 channels, hidden 5, 3 classes)
with recurrent dropout 0.5 whose masks are frozen by reusing one seed for
every forward pass.

A parameter tensor passes when ``||a - n|| / max(||a||, ||n||) < TOLERANCE``
and, entry by entry, ``|a - n| <= TOLERANCE * max(|a|, |n|) + ATOL``. At
eps=1e-6 the finite-difference round-off is up to ~1e-9 absolute, so entries
far below 1e-5 cannot be resolved to 1e-4 relative on their own; ATOL sits
an order of magnitude above that noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from .recurrent import StackConfig, init_stack, stack_backward, stack_forward

EPS = 1e-6
TOLERANCE = 1e-4
ATOL = 1e-8


def loss_modes(posterior, label):
    """Name -> callable(logits) -> LossReport for every objective checked."""
    target = losses.TeacherTarget(posterior, label)
    modes = {f"kl_T{T:g}": (lambda z, T=T: losses.distillation_loss(target, z, T)) for T in (1, 2, 5, 10)}
    modes["cross_entropy"] = lambda z: losses.cross_entropy(label, z)
    modes["combined_T5"] = lambda z: losses.combined_loss(target, z, 5.0)
    modes["l2"] = lambda z: losses.l2_distillation_loss(target, z)
    modes["l2_kd_T5"] = lambda z: losses.l2_combined_loss(target, z, 5.0)
    return modes


def relative_error(a, n) -> float:
    """Norm-wise relative error between two gradient tensors."""
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def entries_close(a, n) -> bool:
    a = np.asarray(a, dtype=float)
    n = np.asarray(n, dtype=float)
    return bool(np.all(np.abs(a - n) <= TOLERANCE * np.maximum(np.abs(a), np.abs(n)) + ATOL))


@dataclass
class CheckResult:
    depth: int
    bidirectional: bool
    loss: str
    max_rel_error: float
    worst_param: str
    entries_ok: bool

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE and self.entries_ok


def check_stack(depth: int, bidirectional: bool, seed: int = 0, timesteps: int = 3, channels: int = 4,
                hidden: int = 5, classes: int = 3, dropout: float = 0.5) -> list[CheckResult]:
    cfg = StackConfig(depth, hidden, bidirectional, dropout, classes, channels)
    stack = init_stack(cfg, seed)
    rng = np.random.default_rng([seed, depth, int(bidirectional)])
    x = rng.standard_normal((timesteps, channels))
    posterior = rng.dirichlet(np.ones(classes))
    label = int(rng.integers(classes))
    modes = loss_modes(posterior, label)
    mask_seed = [seed, 99]

    logits, _, trace = stack_forward(x, stack, True, mask_seed)
    analytic = {name: stack_backward(trace, fn(logits).grad_logits, stack) for name, fn in modes.items()}

    numeric = {name: {k: np.zeros_like(p) for k, p in stack.params.items()} for name in modes}
    for k, p in stack.params.items():
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + EPS
            up = stack_forward(x, stack, True, mask_seed)[0]
            flat[j] = orig - EPS
            down = stack_forward(x, stack, True, mask_seed)[0]
            flat[j] = orig
            for name, fn in modes.items():
                numeric[name][k].reshape(-1)[j] = (fn(up).value - fn(down).value) / (2 * EPS)

    results = []
    for name in modes:
        worst, where, close = 0.0, "", True
        for k in stack.params:
            e = relative_error(analytic[name][k], numeric[name][k])
            close &= entries_close(analytic[name][k], numeric[name][k])
            if e >= worst:
                worst, where = e, k
        results.append(CheckResult(depth, bidirectional, name, worst, where, close))
    return results


def run_suite(seed: int = 0, depths=(1, 2, 3, 4)) -> list[CheckResult]:
    out = []
    for depth in depths:
        for bidirectional in (False, True):
            out.extend(check_stack(depth, bidirectional, seed))
    return out
