"""Dense-matrix primitives, ordering utilities, seeded randomness, and the
finite-difference gradient oracle.

All public operations are pure functions over 2-D float64 arrays ("matrices"),
validate their preconditions, and guarantee finite outputs. Matrices are
numpy arrays with row-major layout; callers treat returned arrays as
immutable.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

__all__ = [
    "Rng",
    "as_matrix",
    "assert_finite",
    "fd_gradient",
    "gather_rows",
    "l2_normalize_rows",
    "matmul",
    "sigmoid",
    "softmax_rows",
    "topk",
]

NORM_EPS = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, failing loudly otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    assert_finite(m, name)
    return m


def assert_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit shape validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return assert_finite(a @ b, "matmul output")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    m = as_matrix(m, "softmax input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(m) -> np.ndarray:
    """Numerically stable elementwise logistic function."""
    m = np.asarray(m, dtype=np.float64)
    out = np.empty_like(m)
    pos = m >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-m[pos]))
    em = np.exp(m[~pos])
    out[~pos] = em / (1.0 + em)
    return out


def l2_normalize_rows(m, eps: float = NORM_EPS) -> np.ndarray:
    """Scale each row to unit L2 norm; rows with norm <= eps are left
    divided by eps, which keeps all-zero rows at zero."""
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    m = as_matrix(m, "normalize input")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, eps)


def topk(values, k: int, largest: bool = True) -> np.ndarray:
    """Indices of the k largest (or smallest) entries of a 1-D vector.

    Ordered by value — descending when ``largest``, ascending otherwise —
    with ties broken by the lower index.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"topk expects a 1-D vector, got shape {v.shape}")
    if not 0 <= k <= v.shape[0]:
        raise ArgumentError(f"k={k} out of range for length {v.shape[0]}")
    order = np.argsort(-v if largest else v, kind="stable")
    return order[:k].astype(np.int64)


def gather_rows(m, idx) -> np.ndarray:
    """Copy rows of ``m`` at positions ``idx`` (duplicates permitted)."""
    m = as_matrix(m, "gather input")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"index list must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise ArgumentError(
            f"row index out of range: valid [0, {m.shape[0]}), got "
            f"[{idx.min()}, {idx.max()}]"
        )
    return m[idx].copy()


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``.

    ``x`` may have any shape; the result matches it. Each coordinate is
    perturbed independently by ±h.
    """
    if h <= 0:
        raise ArgumentError(f"h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"objective non-finite near coordinate {i}")
        gflat[i] = (up - down) / (2.0 * h)
    return grad


class Rng:
    """Seeded random source with a platform-stable stream (PCG64).

    The same (seed, children) path yields byte-identical output on any
    machine and process. ``child`` derives an independent named stream,
    used to keep data, parameter, and encoder draws decoupled.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *_path]))
        )

    def child(self, tag: int) -> "Rng":
        return Rng(self.seed, self._path + (int(tag),))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return scale * self._gen.standard_normal(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)
