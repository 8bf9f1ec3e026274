"""Entropy-regularized optimal transport between textual tokens and a visual
key matrix.

The solver is the standard two-sided scaling iteration: starting from unit
column scalings, alternately rescale rows to match ``mu`` and columns to
match ``nu`` against the Gibbs kernel exp(-cost / epsilon). Updates run in
the log domain, which is algebraically identical to the multiplicative form
but immune to kernel underflow at small epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DegenerateInputError, NumericError, ShapeError
from .numerics import as_matrix, assert_finite

__all__ = [
    "TransportProblem",
    "TransportPlan",
    "cost_matrix",
    "plan_entropy",
    "sinkhorn",
    "uniform_problem",
]

COST_VARIANTS = ("dot", "mae", "mse")


@dataclass(frozen=True)
class TransportProblem:
    """Cost matrix (rows: text categories, cols: visual tokens) plus marginals.

    ``mu`` and ``nu`` are strictly positive probability vectors; ``epsilon``
    is the entropic regularization strength.
    """

    cost: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "cost", as_matrix(self.cost, "cost"))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=np.float64))
        if self.mu.ndim != 1 or self.mu.shape[0] != self.cost.shape[0]:
            raise ShapeError(
                f"mu must have length {self.cost.shape[0]}, got shape {self.mu.shape}"
            )
        if self.nu.ndim != 1 or self.nu.shape[0] != self.cost.shape[1]:
            raise ShapeError(
                f"nu must have length {self.cost.shape[1]}, got shape {self.nu.shape}"
            )
        for name, w in (("mu", self.mu), ("nu", self.nu)):
            if np.any(w <= 0):
                raise ArgumentError(f"{name} must be entrywise positive")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ArgumentError(f"{name} must sum to 1, got {w.sum()!r}")
        if not self.epsilon > 0:
            raise ArgumentError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class TransportPlan:
    """Converged (or best-effort) coupling with its convergence record."""

    plan: np.ndarray
    iterations: int
    marginal_error: float
    converged: bool


def uniform_problem(cost, epsilon: float) -> TransportProblem:
    """Problem with uniform marginals 1/rows and 1/cols (the default weighting)."""
    cost = as_matrix(cost, "cost")
    nr, nc = cost.shape
    return TransportProblem(
        cost=cost,
        mu=np.full(nr, 1.0 / nr),
        nu=np.full(nc, 1.0 / nc),
        epsilon=epsilon,
    )


def cost_matrix(f_t, key, variant: str = "dot") -> np.ndarray:
    """Pairwise cost between text rows and key rows.

    variant "dot":  1 - (f_t / max-row-norm(f_t)) @ (key / max-row-norm(key))^T,
    entries in [0, 2]. variant "mae"/"mse": mean absolute / squared
    coordinate difference.
    """
    f_t = as_matrix(f_t, "f_t")
    key = as_matrix(key, "key")
    if f_t.shape[1] != key.shape[1]:
        raise ShapeError(f"width mismatch: f_t {f_t.shape} vs key {key.shape}")
    if variant == "dot":
        max_t = np.linalg.norm(f_t, axis=1).max()
        max_k = np.linalg.norm(key, axis=1).max()
        if max_t == 0.0 or max_k == 0.0:
            raise DegenerateInputError("all-zero token matrix: max row norm is 0")
        return assert_finite(1.0 - (f_t @ key.T) / (max_t * max_k), "cost")
    if variant == "mae":
        diff = np.abs(f_t[:, None, :] - key[None, :, :])
        return assert_finite(diff.mean(axis=2), "cost")
    if variant == "mse":
        diff = f_t[:, None, :] - key[None, :, :]
        return assert_finite((diff**2).mean(axis=2), "cost")
    raise ArgumentError(f"unknown cost variant {variant!r}, expected one of {COST_VARIANTS}")


def _logsumexp_rows(m: np.ndarray) -> np.ndarray:
    mx = m.max(axis=1)
    return mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))


def sinkhorn(problem: TransportProblem, max_iter: int = 200, tol: float = 1e-6) -> TransportPlan:
    """Alternating scaling iterations until the worst marginal violation
    drops below ``tol`` or ``max_iter`` is exhausted.

    Each iteration updates the row scaling first, then the column scaling,
    starting from unit column scalings. Returns the realized coupling with
    the iteration count, the final max marginal violation, and whether the
    tolerance was met.
    """
    if max_iter < 1:
        raise ArgumentError(f"max_iter must be >= 1, got {max_iter}")
    if not tol > 0:
        raise ArgumentError(f"tol must be positive, got {tol}")
    log_kernel = -problem.cost / problem.epsilon
    if not np.all(np.isfinite(log_kernel)):
        raise NumericError(
            "epsilon too small: cost/epsilon overflows "
            f"(epsilon={problem.epsilon!r}, max |cost|={np.abs(problem.cost).max()!r})"
        )
    log_mu = np.log(problem.mu)
    log_nu = np.log(problem.nu)
    psi = np.zeros_like(log_nu)  # unit column scalings
    plan = None
    err = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        phi = log_mu - _logsumexp_rows(log_kernel + psi[None, :])
        psi = log_nu - _logsumexp_rows((log_kernel + phi[:, None]).T)
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(psi))):
            raise NumericError(
                f"scaling potentials diverged at iteration {it} (epsilon={problem.epsilon!r})"
            )
        plan = np.exp(phi[:, None] + log_kernel + psi[None, :])
        err = max(
            np.abs(plan.sum(axis=1) - problem.mu).max(),
            np.abs(plan.sum(axis=0) - problem.nu).max(),
        )
        if err < tol:
            return TransportPlan(plan=plan, iterations=it, marginal_error=float(err), converged=True)
    return TransportPlan(plan=plan, iterations=it, marginal_error=float(err), converged=False)


def plan_entropy(plan: np.ndarray) -> float:
    """Shannon entropy of a coupling, with 0 log 0 = 0."""
    p = np.asarray(plan, dtype=np.float64)
    mask = p > 0
    return float(-(p[mask] * np.log(p[mask])).sum())
