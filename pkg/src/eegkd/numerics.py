"""Dense float64 kernels and the scalar nonlinearities the network is built from.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64, stored
row-major. Signals follow the (timesteps x channels) convention.
"""

import numpy as np

from .errors import DomainError, ShapeError

DTYPE = np.float64


def as_matrix(m) -> np.ndarray:
    """Return ``m`` as a C-contiguous 2-D float64 array."""
    a = np.ascontiguousarray(m, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_with_temperature(logits, T: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along the last axis.

    Works on a vector or on a stack of row vectors. The maximum is subtracted
    before exponentiation so large logits never overflow.
    """
    z = np.asarray(logits, dtype=DTYPE)
    if not T > 0:
        raise DomainError(f"temperature must be positive, got {T}")
    if z.size == 0 or z.shape[-1] == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax input contains non-finite values")
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, T: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE) / T
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sigmoid(x):
    # tanh form never overflows for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def tanh_prime(x):
    t = np.tanh(np.asarray(x, dtype=DTYPE))
    return 1.0 - t * t


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": lambda x: np.tanh(np.asarray(x, dtype=DTYPE)),
    "sigmoid'": sigmoid_prime,
    "tanh'": tanh_prime,
}


def elementwise(op: str, m) -> np.ndarray:
    """Apply one of ``sigmoid``, ``tanh``, ``sigmoid'``, ``tanh'`` entrywise."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}") from None
    return fn(m)


def entropy(p) -> float:
    p = np.asarray(p, dtype=DTYPE)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
