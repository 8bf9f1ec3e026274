"""Mask-guided dual-branch pooling.

Each agent row induces a sign mask over the source tokens (positive dot
products count); normalizing the mask per column turns pooling into a convex
combination of source rows, followed by a linear map. The visual and textual
branches are fused by a scalar re-parameterized as
gamma = (exp(gamma_v) - exp(gamma_t)) + gamma_init, so at gamma_v = gamma_t
the fusion weight sits exactly at its init constant.

Backward passes treat the sign masks as constants (zero gradient through the
indicator); gradients flow through the weighted sums and the projections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError
from .numerics import as_matrix

__all__ = [
    "POOL_MODES",
    "PoolingParams",
    "effective_gamma",
    "fuse",
    "fuse_backward",
    "mask_tokens",
    "pool",
    "pool_backward",
    "pool_variant",
    "pool_variant_backward",
]

POOL_MODES = ("dual", "visual-only", "textual-only", "single-gamma")


@dataclass
class PoolingParams:
    """Learnable pooling state: branch projections and fusion scalars.

    ``gamma_single`` is used only by the single-scalar ablation mode.
    """

    proj_v: np.ndarray
    proj_t: np.ndarray
    gamma_v: np.ndarray
    gamma_t: np.ndarray
    gamma_init: float = 0.1
    gamma_single: np.ndarray = field(default_factory=lambda: np.zeros(()))

    def __post_init__(self):
        if not 0.0 < self.gamma_init < 1.0:
            raise ArgumentError(f"gamma_init must lie in (0, 1), got {self.gamma_init}")
        self.gamma_v = np.asarray(self.gamma_v, dtype=np.float64)
        self.gamma_t = np.asarray(self.gamma_t, dtype=np.float64)
        self.gamma_single = np.asarray(self.gamma_single, dtype=np.float64)


def init_pooling(d: int, gamma_init: float = 0.1, shared_proj: bool = False) -> PoolingParams:
    """Identity-initialized projections; fusion scalars start at zero so the
    effective gamma equals gamma_init."""
    proj_v = np.eye(d)
    proj_t = proj_v if shared_proj else np.eye(d)
    return PoolingParams(
        proj_v=proj_v,
        proj_t=proj_t,
        gamma_v=np.zeros(()),
        gamma_t=np.zeros(()),
        gamma_init=gamma_init,
    )


def effective_gamma(params: PoolingParams) -> float:
    return float(np.exp(params.gamma_v) - np.exp(params.gamma_t) + params.gamma_init)


def mask_tokens(f_src, f_x) -> np.ndarray:
    """Column-stochastic sign masks: entry (i, j) weights source row i in
    agent j's pool.

    Strictly positive dot products count; each column is divided by its
    positive count. Columns with no positives fall back to uniform 1/M so
    every column remains a probability vector.
    """
    f_src = as_matrix(f_src, "f_src")
    f_x = as_matrix(f_x, "f_x")
    if f_src.shape[1] != f_x.shape[1]:
        raise ShapeError(f"width mismatch: f_src {f_src.shape} vs f_x {f_x.shape}")
    indicator = (f_src @ f_x.T > 0).astype(np.float64)
    counts = indicator.sum(axis=0)
    m = f_src.shape[0]
    mask = np.where(counts > 0, indicator / np.maximum(counts, 1.0), 1.0 / m)
    return mask


def pool(f_src, mask, proj) -> np.ndarray:
    """Aggregate source rows by the mask columns, then project: (mask^T f_src) proj."""
    f_src = as_matrix(f_src, "f_src")
    mask = as_matrix(mask, "mask")
    proj = as_matrix(proj, "proj")
    if mask.shape[0] != f_src.shape[0]:
        raise ShapeError(f"mask rows {mask.shape[0]} != source rows {f_src.shape[0]}")
    if proj.shape[0] != f_src.shape[1]:
        raise ShapeError(f"proj expects width {f_src.shape[1]}, got {proj.shape}")
    return (mask.T @ f_src) @ proj


def pool_backward(f_src, mask, proj, grad_out):
    """Gradients of pool() w.r.t. the source rows and the projection.

    The mask is a constant of the backward pass.
    """
    pooled_pre = mask.T @ f_src
    d_proj = pooled_pre.T @ grad_out
    d_pre = grad_out @ proj.T
    d_src = mask @ d_pre
    return d_src, d_proj


def fuse(f_vp, f_tp, params: PoolingParams) -> np.ndarray:
    """Visual pool plus gamma-weighted textual pool."""
    f_vp = as_matrix(f_vp, "f_vp")
    f_tp = as_matrix(f_tp, "f_tp")
    if f_vp.shape != f_tp.shape:
        raise ShapeError(f"branch shapes differ: {f_vp.shape} vs {f_tp.shape}")
    return f_vp + effective_gamma(params) * f_tp


def fuse_backward(f_tp, params: PoolingParams, grad_out):
    """Gradients of fuse() w.r.t. both branches and the fusion scalars."""
    d_vp = grad_out
    d_tp = effective_gamma(params) * grad_out
    d_gamma = float((grad_out * f_tp).sum())
    d_gamma_v = d_gamma * float(np.exp(params.gamma_v))
    d_gamma_t = -d_gamma * float(np.exp(params.gamma_t))
    return d_vp, d_tp, d_gamma_v, d_gamma_t


def pool_variant(mode: str, f_vp, f_tp, params: PoolingParams) -> np.ndarray:
    """Pooling output under one of the ablation modes."""
    if mode == "dual":
        return fuse(f_vp, f_tp, params)
    if mode == "visual-only":
        return as_matrix(f_vp, "f_vp").copy()
    if mode == "textual-only":
        return as_matrix(f_tp, "f_tp").copy()
    if mode == "single-gamma":
        f_vp = as_matrix(f_vp, "f_vp")
        f_tp = as_matrix(f_tp, "f_tp")
        if f_vp.shape != f_tp.shape:
            raise ShapeError(f"branch shapes differ: {f_vp.shape} vs {f_tp.shape}")
        return f_vp + float(params.gamma_single) * f_tp
    raise ArgumentError(f"unknown pooling mode {mode!r}, expected one of {POOL_MODES}")


def pool_variant_backward(mode: str, f_tp, params: PoolingParams, grad_out):
    """Backward companion of pool_variant.

    Returns (d_f_vp, d_f_tp, d_gamma_v, d_gamma_t, d_gamma_single).
    """
    zeros = np.zeros_like(grad_out)
    if mode == "dual":
        d_vp, d_tp, d_gv, d_gt = fuse_backward(f_tp, params, grad_out)
        return d_vp, d_tp, d_gv, d_gt, 0.0
    if mode == "visual-only":
        return grad_out, zeros, 0.0, 0.0, 0.0
    if mode == "textual-only":
        return zeros, grad_out, 0.0, 0.0, 0.0
    if mode == "single-gamma":
        d_tp = float(params.gamma_single) * grad_out
        d_gs = float((grad_out * f_tp).sum())
        return grad_out, d_tp, 0.0, 0.0, d_gs
    raise ArgumentError(f"unknown pooling mode {mode!r}, expected one of {POOL_MODES}")
