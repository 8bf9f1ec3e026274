"""Agent attention: the cross-attention baseline, the differential attention
primitive, the two cascaded agent blocks with residual refinement, and the
mean-attention-distance diagnostic.

Differential attention projects queries/keys/values to double width, splits
queries and keys into two branches, and applies the difference of the two
branch softmaxes (the second scaled by a learnable lambda) to the wide
values. A 2d->d output map restores the model width so the block composes
with the residual update; zero-initializing that map makes the whole block an
exact identity at the start of training.

Forward/backward pairs are written by hand; caches carry exactly the
intermediates the backward pass needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .numerics import Rng, as_matrix, softmax_rows

__all__ = [
    "AgentAttnParams",
    "AttnRecord",
    "BranchWeights",
    "DiffAttnParams",
    "Wiring",
    "agent_attention",
    "agent_attention_backward",
    "agent_attention_forward",
    "cross_attn",
    "diff_attn",
    "diff_attn_backward",
    "diff_attn_forward",
    "init_diff_attn",
    "mean_attention_distance",
    "ablation_wiring",
]

ATTN_MATRICES = ("Q", "K", "V")
LN_EPS = 1e-5


@dataclass
class DiffAttnParams:
    """One differential attention block: d->2d projections, a learnable
    branch-mixing scalar, and the 2d->d output restoration map."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        d = self.w_q.shape[0]
        for name, w, shape in (
            ("w_q", self.w_q, (d, 2 * d)),
            ("w_k", self.w_k, (d, 2 * d)),
            ("w_v", self.w_v, (d, 2 * d)),
            ("w_o", self.w_o, (2 * d, d)),
        ):
            if w.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {w.shape}")


def init_diff_attn(rng: Rng, d: int, lambda_init: float = 0.5, zero_out: bool = False) -> DiffAttnParams:
    scale = 1.0 / math.sqrt(d)
    return DiffAttnParams(
        w_q=rng.normal((d, 2 * d), scale),
        w_k=rng.normal((d, 2 * d), scale),
        w_v=rng.normal((d, 2 * d), scale),
        w_o=np.zeros((2 * d, d)) if zero_out else rng.normal((2 * d, d), 1.0 / math.sqrt(2 * d)),
        lam=np.asarray(lambda_init, dtype=np.float64),
    )


@dataclass
class AgentAttnParams:
    """Both cascaded blocks; when shared across layers, every layer applies
    this same instance."""

    block1: DiffAttnParams  # agents query text
    block2: DiffAttnParams  # visual tokens query agents
    shared_across_layers: bool = True


@dataclass(frozen=True)
class BranchWeights:
    """Row-stochastic softmax maps of the two branches plus the lambda that
    mixed them (head-averaged when heads > 1)."""

    first: np.ndarray
    second: np.ndarray
    lam: float


@dataclass(frozen=True)
class AttnRecord:
    """Diagnostic branch weights keyed by block name."""

    blocks: dict


# ---------------------------------------------------------------------------
# plain softmax attention


def _softmax_attn_forward(xq, xk, xv, scale):
    scores = (xq @ xk.T) * scale
    weights = softmax_rows(scores)
    out = weights @ xv
    return out, {"xq": xq, "xk": xk, "xv": xv, "weights": weights, "scale": scale}


def _softmax_rows_backward(weights, d_weights):
    inner = (d_weights * weights).sum(axis=1, keepdims=True)
    return weights * (d_weights - inner)


def _softmax_attn_backward(cache, grad_out):
    w, scale = cache["weights"], cache["scale"]
    d_w = grad_out @ cache["xv"].T
    d_xv = w.T @ grad_out
    d_scores = _softmax_rows_backward(w, d_w)
    d_xq = d_scores @ cache["xk"] * scale
    d_xk = d_scores.T @ cache["xq"] * scale
    return d_xq, d_xk, d_xv


def cross_attn(q_src, kv_src) -> np.ndarray:
    """Baseline cross-attention: softmax(q k^T / sqrt(d)) v with k = v = kv_src."""
    q_src = as_matrix(q_src, "q_src")
    kv_src = as_matrix(kv_src, "kv_src")
    if q_src.shape[1] != kv_src.shape[1]:
        raise ShapeError(f"width mismatch: {q_src.shape} vs {kv_src.shape}")
    out, _ = _softmax_attn_forward(q_src, kv_src, kv_src, 1.0 / math.sqrt(q_src.shape[1]))
    return out


# ---------------------------------------------------------------------------
# parameter-free row layer norm (pre-block toggle)


def _layernorm_forward(x):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    y = centered * inv_std
    return y, {"y": y, "inv_std": inv_std}


def _layernorm_backward(cache, grad_out):
    y, inv_std = cache["y"], cache["inv_std"]
    g_mean = grad_out.mean(axis=1, keepdims=True)
    gy_mean = (grad_out * y).mean(axis=1, keepdims=True)
    return inv_std * (grad_out - g_mean - y * gy_mean)


# ---------------------------------------------------------------------------
# differential attention


def _head_slices(d, heads):
    if heads < 1:
        raise ArgumentError(f"heads must be >= 1, got {heads}")
    if d % heads:
        raise ArgumentError(f"width {d} not divisible by heads {heads}")
    return d // heads


def diff_attn_forward(xq, xk, xv, p: DiffAttnParams, heads: int = 1, pre_norm: bool = False):
    """Differential attention returning (output, BranchWeights, cache)."""
    xq = as_matrix(xq, "xq")
    xk = as_matrix(xk, "xk")
    xv = as_matrix(xv, "xv")
    d = p.w_q.shape[0]
    if xq.shape[1] != d or xk.shape[1] != d or xv.shape[1] != d:
        raise ShapeError(
            f"inputs must have width {d}; got {xq.shape}, {xk.shape}, {xv.shape}"
        )
    dh = _head_slices(d, heads)
    cache = {"heads": heads, "pre_norm": pre_norm, "p": p, "xq_raw": xq, "xk_raw": xk, "xv_raw": xv}
    if pre_norm:
        xq, cache["ln_q"] = _layernorm_forward(xq)
        xk, cache["ln_k"] = _layernorm_forward(xk)
        xv, cache["ln_v"] = _layernorm_forward(xv)
    lam = float(p.lam)
    q = xq @ p.w_q
    k = xk @ p.w_k
    v = xv @ p.w_v
    denom = math.sqrt(dh)
    m = xq.shape[0]
    out_wide = np.empty((m, 2 * d))
    a1_heads, a2_heads, d_heads = [], [], []
    for h in range(heads):
        s1, e1 = h * dh, (h + 1) * dh
        a1 = softmax_rows((q[:, s1:e1] @ k[:, s1:e1].T) / denom)
        a2 = softmax_rows((q[:, d + s1 : d + e1] @ k[:, d + s1 : d + e1].T) / denom)
        diff = a1 - lam * a2
        sv, ev = h * 2 * dh, (h + 1) * 2 * dh
        out_wide[:, sv:ev] = diff @ v[:, sv:ev]
        a1_heads.append(a1)
        a2_heads.append(a2)
        d_heads.append(diff)
    out = out_wide @ p.w_o
    cache.update(
        {"xq": xq, "xk": xk, "xv": xv, "q": q, "k": k, "v": v, "denom": denom,
         "a1": a1_heads, "a2": a2_heads, "diff": d_heads, "out_wide": out_wide, "dh": dh}
    )
    record = BranchWeights(
        first=sum(a1_heads) / heads, second=sum(a2_heads) / heads, lam=lam
    )
    return out, record, cache


def diff_attn(xq, xk, xv, p: DiffAttnParams, heads: int = 1, pre_norm: bool = False):
    """Forward-only differential attention: (output, BranchWeights)."""
    out, record, _ = diff_attn_forward(xq, xk, xv, p, heads=heads, pre_norm=pre_norm)
    return out, record


def diff_attn_backward(cache, grad_out):
    """Gradients of diff_attn_forward.

    Returns (d_xq, d_xk, d_xv, grads) with grads keyed w_q/w_k/w_v/w_o/lam.
    """
    p: DiffAttnParams = cache["p"]
    heads, dh, denom = cache["heads"], cache["dh"], cache["denom"]
    scale = 1.0 / denom
    d = p.w_q.shape[0]
    lam = float(p.lam)
    xq, xk, xv = cache["xq"], cache["xk"], cache["xv"]
    q, k, v = cache["q"], cache["k"], cache["v"]

    d_wo = cache["out_wide"].T @ grad_out
    d_wide = grad_out @ p.w_o.T
    d_q = np.zeros_like(q)
    d_k = np.zeros_like(k)
    d_v = np.zeros_like(v)
    d_lam = 0.0
    for h in range(heads):
        s1, e1 = h * dh, (h + 1) * dh
        sv, ev = h * 2 * dh, (h + 1) * 2 * dh
        a1, a2, diff = cache["a1"][h], cache["a2"][h], cache["diff"][h]
        d_out_h = d_wide[:, sv:ev]
        d_diff = d_out_h @ v[:, sv:ev].T
        d_v[:, sv:ev] = diff.T @ d_out_h
        d_lam -= float((d_diff * a2).sum())
        d_s1 = _softmax_rows_backward(a1, d_diff)
        d_s2 = _softmax_rows_backward(a2, -lam * d_diff)
        d_q[:, s1:e1] = d_s1 @ k[:, s1:e1] * scale
        d_k[:, s1:e1] = d_s1.T @ q[:, s1:e1] * scale
        d_q[:, d + s1 : d + e1] = d_s2 @ k[:, d + s1 : d + e1] * scale
        d_k[:, d + s1 : d + e1] = d_s2.T @ q[:, d + s1 : d + e1] * scale

    grads = {
        "w_q": xq.T @ d_q,
        "w_k": xk.T @ d_k,
        "w_v": xv.T @ d_v,
        "w_o": d_wo,
        "lam": np.asarray(d_lam),
    }
    d_xq = d_q @ p.w_q.T
    d_xk = d_k @ p.w_k.T
    d_xv = d_v @ p.w_v.T
    if cache["pre_norm"]:
        d_xq = _layernorm_backward(cache["ln_q"], d_xq)
        d_xk = _layernorm_backward(cache["ln_k"], d_xk)
        d_xv = _layernorm_backward(cache["ln_v"], d_xv)
    return d_xq, d_xk, d_xv, grads


# ---------------------------------------------------------------------------
# cascaded agent attention


def agent_attention_forward(f_v, f_x, f_t, p: AgentAttnParams, heads: int = 1, pre_norm: bool = False):
    """Two cascaded blocks plus residual: agents query text to build a
    semantic value matrix, then visual tokens query the agents against it.

    Returns (refined f_v, AttnRecord, cache).
    """
    v_x, rec1, cache1 = diff_attn_forward(f_x, f_t, f_t, p.block1, heads=heads, pre_norm=pre_norm)
    delta, rec2, cache2 = diff_attn_forward(f_v, f_x, v_x, p.block2, heads=heads, pre_norm=pre_norm)
    out = f_v + delta
    record = AttnRecord(blocks={"agent_text": rec1, "visual_agent": rec2})
    return out, record, {"cache1": cache1, "cache2": cache2}


def agent_attention(f_v, f_x, f_t, p: AgentAttnParams, heads: int = 1, pre_norm: bool = False):
    """Forward-only agent attention: (refined f_v, AttnRecord)."""
    out, record, _ = agent_attention_forward(f_v, f_x, f_t, p, heads=heads, pre_norm=pre_norm)
    return out, record


def agent_attention_backward(cache, grad_out):
    """Gradients of agent_attention_forward.

    Returns (d_f_v, d_f_x, d_f_t, grads) with grads keyed block1/block2.
    """
    d_fv2, d_fx2, d_vx, g2 = diff_attn_backward(cache["cache2"], grad_out)
    d_fx1, d_ft_k, d_ft_v, g1 = diff_attn_backward(cache["cache1"], d_vx)
    d_f_v = grad_out + d_fv2
    d_f_x = d_fx2 + d_fx1
    d_f_t = d_ft_k + d_ft_v
    return d_f_v, d_f_x, d_f_t, {"block1": g1, "block2": g2}


# ---------------------------------------------------------------------------
# wiring and diagnostics


@dataclass(frozen=True)
class Wiring:
    """Routing of the selection stage: which attention matrix the affinity is
    computed against, and which one agents are gathered from."""

    affinity_source: str
    selection_target: str

    def __post_init__(self):
        for name, v in (
            ("affinity_source", self.affinity_source),
            ("selection_target", self.selection_target),
        ):
            if v not in ATTN_MATRICES:
                raise ArgumentError(f"{name} must be one of {ATTN_MATRICES}, got {v!r}")

    @property
    def code(self) -> str:
        return self.affinity_source + self.selection_target


def ablation_wiring(affinity_source: str, selection_target: str) -> Wiring:
    """Validated wiring configuration; ("K", "V") reproduces the main path."""
    return Wiring(affinity_source=affinity_source, selection_target=selection_target)


def mean_attention_distance(weights, grid_w: int, grid_h: int) -> float:
    """Attention-weighted mean spatial distance on a row-major unit grid.

    Low values mean local focus; high values mean global aggregation. Rows
    must already be normalized.
    """
    w = as_matrix(weights, "weights")
    n = grid_w * grid_h
    if w.shape != (n, n):
        raise ShapeError(f"weights must be {n}x{n} for a {grid_w}x{grid_h} grid, got {w.shape}")
    if np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
        raise ArgumentError("attention rows must sum to 1")
    cols = np.arange(n) % grid_w
    rows = np.arange(n) // grid_w
    dist = np.sqrt(
        (cols[:, None] - cols[None, :]) ** 2 + (rows[:, None] - rows[None, :]) ** 2
    )
    return float((w * dist).sum(axis=1).mean())
