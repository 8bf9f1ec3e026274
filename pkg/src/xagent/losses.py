"""Text projection and the alignment / segmentation objectives.

The text projector produces two views of the initial text embeddings: the
working tokens f_t (optional parameter-free self-attention followed by a
linear map) and the alignment reference f_t' (a separate single linear map).
The alignment loss is a symmetric InfoNCE between the two views with
per-direction learnable temperatures, parameterized through exp() so the
temperatures stay positive under any update. The segmentation stand-in
classifies each visual token against the text rows by scaled cosine
similarity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .numerics import NORM_EPS, as_matrix, softmax_rows

__all__ = [
    "LossParams",
    "TextProjector",
    "align_loss",
    "align_loss_backward",
    "align_loss_forward",
    "project_text",
    "project_text_backward",
    "project_text_forward",
    "seg_loss",
    "seg_loss_backward",
    "seg_loss_forward",
    "total_loss",
]

TAU_SEG = 0.07


@dataclass
class TextProjector:
    """Two projection paths out of the initial text embeddings.

    ``out_map`` feeds the pipeline's working text tokens; ``phi`` is the
    separate alignment-branch map. ``use_attention`` prepends a
    parameter-free residual self-attention over the initial embeddings.
    """

    out_map: np.ndarray
    phi: np.ndarray
    use_attention: bool = False

    def __post_init__(self):
        if self.out_map.shape != self.phi.shape:
            raise ShapeError(
                f"out_map {self.out_map.shape} and phi {self.phi.shape} must share shape"
            )


@dataclass
class LossParams:
    """Learnable log-temperatures; tau_i = exp(log_tau_i) > 0 always."""

    log_tau1: np.ndarray
    log_tau2: np.ndarray

    def __post_init__(self):
        self.log_tau1 = np.asarray(self.log_tau1, dtype=np.float64)
        self.log_tau2 = np.asarray(self.log_tau2, dtype=np.float64)

    @property
    def tau1(self) -> float:
        return float(np.exp(self.log_tau1))

    @property
    def tau2(self) -> float:
        return float(np.exp(self.log_tau2))


# ---------------------------------------------------------------------------
# row normalization with a backward pass


def _normalize_rows_forward(x, eps: float = NORM_EPS):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    u = x / denom
    return u, (u, norms, denom, eps)


def _normalize_rows_backward(cache, d_u):
    u, norms, denom, eps = cache
    proj = (d_u * u).sum(axis=1, keepdims=True)
    d_x = (d_u - u * proj) / denom
    clamped = (norms <= eps).ravel()
    if clamped.any():
        d_x[clamped] = d_u[clamped] / eps
    return d_x


def _row_logsumexp(s):
    m = s.max(axis=1)
    return m + np.log(np.exp(s - m[:, None]).sum(axis=1))


# ---------------------------------------------------------------------------
# text projection


def project_text_forward(f_t_init, p: TextProjector):
    f_t_init = as_matrix(f_t_init, "f_t_init")
    if f_t_init.shape[1] != p.out_map.shape[0]:
        raise ShapeError(
            f"projector expects width {p.out_map.shape[0]}, got {f_t_init.shape}"
        )
    z = f_t_init
    if p.use_attention:
        scale = 1.0 / math.sqrt(f_t_init.shape[1])
        weights = softmax_rows((z @ z.T) * scale)
        z = f_t_init + weights @ f_t_init
    f_t = z @ p.out_map
    f_t_prime = f_t_init @ p.phi
    return f_t, f_t_prime, {"z": z, "f_t_init": f_t_init}


def project_text(f_t_init, p: TextProjector):
    """Working text tokens and the alignment reference: (f_t, f_t')."""
    f_t, f_t_prime, _ = project_text_forward(f_t_init, p)
    return f_t, f_t_prime


def project_text_backward(cache, d_f_t, d_f_t_prime):
    """Gradients w.r.t. the two projection maps (inputs are fixed data)."""
    return {
        "out_map": cache["z"].T @ d_f_t,
        "phi": cache["f_t_init"].T @ d_f_t_prime,
    }


# ---------------------------------------------------------------------------
# alignment loss


def align_loss_forward(f_t, f_t_prime, p: LossParams):
    f_t = as_matrix(f_t, "f_t")
    f_t_prime = as_matrix(f_t_prime, "f_t_prime")
    if f_t.shape != f_t_prime.shape:
        raise ShapeError(f"shapes differ: {f_t.shape} vs {f_t_prime.shape}")
    nc = f_t.shape[0]
    if nc < 2:
        raise ArgumentError(f"alignment needs at least 2 rows to contrast, got {nc}")
    a, cache_a = _normalize_rows_forward(f_t)
    b, cache_b = _normalize_rows_forward(f_t_prime)
    tau1, tau2 = p.tau1, p.tau2
    s1 = (a @ b.T) / tau1
    s2 = (b @ a.T) / tau2
    diag = np.arange(nc)
    ce1 = float((_row_logsumexp(s1) - s1[diag, diag]).mean())
    ce2 = float((_row_logsumexp(s2) - s2[diag, diag]).mean())
    loss = 0.5 * (ce1 + ce2)
    cache = {"a": a, "b": b, "cache_a": cache_a, "cache_b": cache_b,
             "s1": s1, "s2": s2, "tau1": tau1, "tau2": tau2, "nc": nc}
    return loss, cache


def align_loss(f_t, f_t_prime, p: LossParams) -> float:
    """Symmetric contrastive loss tying f_t' rows to their f_t counterparts."""
    loss, _ = align_loss_forward(f_t, f_t_prime, p)
    return loss


def align_loss_backward(cache):
    """Returns (d_f_t, d_f_t_prime, d_log_tau1, d_log_tau2)."""
    nc = cache["nc"]
    eye = np.eye(nc)
    d_s1 = (softmax_rows(cache["s1"]) - eye) / (2.0 * nc)
    d_s2 = (softmax_rows(cache["s2"]) - eye) / (2.0 * nc)
    # s = m / tau with tau = exp(log_tau), so d log_tau = -sum(ds * s)
    d_log_tau1 = -float((d_s1 * cache["s1"]).sum())
    d_log_tau2 = -float((d_s2 * cache["s2"]).sum())
    a, b = cache["a"], cache["b"]
    d_a = (d_s1 @ b) / cache["tau1"] + (d_s2.T @ b) / cache["tau2"]
    d_b = (d_s1.T @ a) / cache["tau1"] + (d_s2 @ a) / cache["tau2"]
    d_f_t = _normalize_rows_backward(cache["cache_a"], d_a)
    d_f_t_prime = _normalize_rows_backward(cache["cache_b"], d_b)
    return d_f_t, d_f_t_prime, d_log_tau1, d_log_tau2


# ---------------------------------------------------------------------------
# segmentation loss (per-token similarity classifier)


def seg_loss_forward(f_v_refined, f_t, labels, tau_seg: float = TAU_SEG):
    f_v = as_matrix(f_v_refined, "f_v_refined")
    f_t = as_matrix(f_t, "f_t")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != f_v.shape[0]:
        raise ShapeError(f"labels must have length {f_v.shape[0]}, got {labels.shape}")
    nc = f_t.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= nc):
        raise ArgumentError(
            f"labels must lie in [0, {nc}), got range [{labels.min()}, {labels.max()}]"
        )
    u, cache_u = _normalize_rows_forward(f_v)
    w, cache_w = _normalize_rows_forward(f_t)
    logits = (u @ w.T) / tau_seg
    n = f_v.shape[0]
    loss = float((_row_logsumexp(logits) - logits[np.arange(n), labels]).mean())
    cache = {"u": u, "w": w, "cache_u": cache_u, "cache_w": cache_w,
             "logits": logits, "labels": labels, "tau_seg": tau_seg, "n": n, "nc": nc}
    return loss, cache


def seg_loss(f_v_refined, f_t, labels, tau_seg: float = TAU_SEG) -> float:
    """Mean cross-entropy of cosine-similarity logits against token labels."""
    loss, _ = seg_loss_forward(f_v_refined, f_t, labels, tau_seg)
    return loss


def seg_loss_backward(cache):
    """Returns (d_f_v_refined, d_f_t)."""
    probs = softmax_rows(cache["logits"])
    probs[np.arange(cache["n"]), cache["labels"]] -= 1.0
    d_logits = probs / cache["n"]
    d_u = (d_logits @ cache["w"]) / cache["tau_seg"]
    d_w = (d_logits.T @ cache["u"]) / cache["tau_seg"]
    d_f_v = _normalize_rows_backward(cache["cache_u"], d_u)
    d_f_t = _normalize_rows_backward(cache["cache_w"], d_w)
    return d_f_v, d_f_t


def total_loss(f_v_refined, f_t, f_t_prime, labels, p: LossParams, tau_seg: float = TAU_SEG) -> float:
    """Segmentation plus alignment, the full training objective."""
    return seg_loss(f_v_refined, f_t, labels, tau_seg) + align_loss(f_t, f_t_prime, p)
