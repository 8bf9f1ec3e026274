"""Gradient-descent training over the full pipeline and the latent-channel
probing simulation.

The trainer is plain gradient descent with two step-size groups: the
projection/temperature head updates fast, the agent-attention and pooling
internals update slowly (a 100:1 default ratio). Updates are in-place on the
parameter census, so runs are bitwise deterministic under a fixed seed.

The probe simulation reproduces the latent-channel dynamic at desk scale: a
linear probe initialized to the category directions (the zero-shot state) is
trained on seen categories only; activation of the unseen category channels
is recorded each step. The with-agent arm first trains the pipeline on seen
data, then refines both token sets through it (evaluation tokens see the
full open-vocabulary text set) before probing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import ArgumentError, TrainingDivergedError
from .losses import (  # re-exported: the loss surface lives with the trainer
    LossParams,
    TextProjector,
    align_loss,
    align_loss_backward,
    align_loss_forward,
    project_text,
    project_text_backward,
    project_text_forward,
    seg_loss,
    seg_loss_backward,
    seg_loss_forward,
    total_loss,
)
from .numerics import Rng, l2_normalize_rows, softmax_rows
from .pipeline import (
    Instance,
    Model,
    identity_encoder,
    init_encoder,
    init_model,
    loss_and_grads,
    make_instance,
    named_parameters,
    pipeline_forward,
)

__all__ = [
    "LossParams",
    "ProbeResult",
    "TextProjector",
    "TrainState",
    "align_loss",
    "make_train_state",
    "probe_simulation",
    "project_text",
    "seg_loss",
    "total_loss",
    "train",
]

FAST_GROUP_PREFIXES = ("text.", "loss.")


@dataclass
class TrainState:
    """Step counter, the live model, per-group step sizes, and the loss curve."""

    model: Model
    lr_fast: float
    lr_slow: float
    step: int = 0
    loss_history: list = field(default_factory=list)
    seg_history: list = field(default_factory=list)
    align_history: list = field(default_factory=list)


def make_train_state(cfg: RunConfig, rng: Rng) -> TrainState:
    return TrainState(
        model=init_model(cfg, rng),
        lr_fast=cfg.training.lr_fast,
        lr_slow=cfg.training.lr_slow,
    )


def _group_lr(name: str, state: TrainState) -> float:
    if name.startswith(FAST_GROUP_PREFIXES):
        return state.lr_fast
    return state.lr_slow


def train(steps: int, state: TrainState, data, encoder, cfg: RunConfig, rng: Rng) -> TrainState:
    """Run ``steps`` gradient-descent updates.

    ``data`` is either a fixed Instance (full-batch descent) or a callable
    ``step -> Instance`` producing the batch stream. Aborts with the state
    attached if the loss goes non-finite.
    """
    if steps < 1:
        raise ArgumentError(f"steps must be >= 1, got {steps}")
    params = named_parameters(state.model, cfg)
    for _ in range(steps):
        instance = data(state.step) if callable(data) else data
        total, grads, result = loss_and_grads(instance, state.model, encoder, cfg, rng)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {state.step}", state=state
            )
        for name, p in params.items():
            p[...] -= _group_lr(name, state) * grads[name]
        state.loss_history.append(float(total))
        state.seg_history.append(float(result.l_seg))
        state.align_history.append(float(result.l_align))
        state.step += 1
    return state


# ---------------------------------------------------------------------------
# probing simulation


@dataclass
class ProbeResult:
    """Per-step probe trajectories.

    ``activation`` has one row per recorded step (step 0 first) and one
    column per unseen category, holding the mean softmax mass its channel
    receives on its own evaluation tokens.
    """

    categories: list
    seen: list
    unseen: list
    activation: np.ndarray
    mean_activation: np.ndarray
    seen_accuracy: np.ndarray
    with_agent: bool


def _probe_directions(cats, seen, rng: Rng, d: int, mixing: float) -> np.ndarray:
    """Unit directions; unseen ones partially correlated with a seen one."""
    seen_set = set(seen)
    raw = rng.normal((len(cats), d))
    dirs = np.zeros((len(cats), d))
    seen_rows = [i for i, c in enumerate(cats) if c in seen_set]
    for i, c in enumerate(cats):
        if c in seen_set:
            dirs[i] = raw[i]
        else:
            anchor = dirs[seen_rows[int(rng.integers(0, len(seen_rows)))]]
            dirs[i] = mixing * anchor + (1.0 - mixing) * raw[i]
    return l2_normalize_rows(dirs)


def _probe_tokens(dirs, rows, per_cat, noise, rng: Rng):
    feats = []
    labels = []
    for r in rows:
        feats.append(dirs[r] + noise * rng.normal((per_cat, dirs.shape[1])))
        labels.extend([r] * per_cat)
    return np.vstack(feats), np.asarray(labels, dtype=np.int64)


def _probe_agent_model(cfg: RunConfig, rng: Rng) -> Model:
    """Agent model for the probing arm, started from a functional geometry.

    Both blocks route by token similarity (identity first-branch
    projections) against a uniform second branch, so the differential map
    acts as a contrast filter: it injects the best-matching text direction
    while subtracting the shared background. Value and output paths are
    direction-preserving; the second block's output carries the configured
    injection scale. Training then only has to adapt this geometry to the
    seen data instead of discovering it from zero.
    """
    m = init_model(cfg, rng)
    d = cfg.dims.d
    sharp = cfg.probe.routing_sharpness
    iso = np.hstack([np.eye(d), np.zeros((d, d))])
    for block in (m.attn.block1, m.attn.block2):
        block.w_q[...] = 0.0
        block.w_k[...] = 0.0
        block.w_q[:, :d] = sharp * np.eye(d)
        block.w_k[:, :d] = sharp * np.eye(d)
        block.w_v[...] = iso
        block.lam[...] = cfg.probe.contrast_lambda
    m.attn.block1.w_o[...] = iso.T
    m.attn.block2.w_o[...] = cfg.probe.inject_scale * iso.T
    return m


def _refine_tokens(tokens, f_t_init_rows, model, cfg, rng):
    """Push a token block through the trained agent path (identity backbone);
    the loss values computed along the way are ignored."""
    refine_cfg = _clone_cfg(cfg, n=tokens.shape[0], nc=f_t_init_rows.shape[0])
    inst = Instance(
        f_v=tokens,
        f_t_init=f_t_init_rows,
        labels=np.zeros(tokens.shape[0], dtype=np.int64),
    )
    result = pipeline_forward(inst, model, identity_encoder(refine_cfg), refine_cfg, rng)
    return result.f_final


def _clone_cfg(cfg: RunConfig, n: int, nc: int) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.dims.n = n
    out.dims.nc = nc
    out.selection.k = min(cfg.selection.k, nc)
    out.selection.q = min(cfg.selection.q, n)
    out.dims.layers = 1
    return out.validate()


def probe_simulation(seen, unseen, steps: int, with_agent: bool, cfg: RunConfig, seed: int) -> ProbeResult:
    """Linear probing over frozen synthetic embeddings.

    The probe weight matrix starts at the category directions themselves and
    is trained with cross-entropy on seen-category tokens only.
    """
    seen = sorted(set(int(c) for c in seen))
    unseen = sorted(set(int(c) for c in unseen))
    if not seen or not unseen:
        raise ArgumentError("seen and unseen category sets must both be non-empty")
    if set(seen) & set(unseen):
        raise ArgumentError(f"seen and unseen sets overlap: {sorted(set(seen) & set(unseen))}")
    cats = sorted(seen + unseen)
    cat_row = {c: i for i, c in enumerate(cats)}
    rng = Rng(seed).child(5)
    d = cfg.dims.d
    p = cfg.probe

    dirs = _probe_directions(cats, seen, rng.child(0), d, p.mixing)
    seen_rows = [cat_row[c] for c in seen]
    unseen_rows = [cat_row[c] for c in unseen]
    x_train, y_train = _probe_tokens(dirs, seen_rows, p.tokens_per_category, p.noise, rng.child(1))
    x_eval, y_eval = _probe_tokens(dirs, unseen_rows, p.tokens_per_category, p.noise, rng.child(2))

    if with_agent:
        arng = rng.child(3)
        # pre-aligned text embeddings: an unknown linear encoding of the
        # category directions, the desk-scale stand-in for a pretrained
        # text tower; the projector holds its pseudo-inverse and stays
        # frozen, so training improves features only through the agent path
        embed = arng.normal((d, cfg.dims.d_prime), 1.0 / np.sqrt(d))
        f_t_init_all = l2_normalize_rows(
            (dirs + p.text_noise * arng.normal(dirs.shape)) @ embed
        )
        train_cfg = _clone_cfg(cfg, n=x_train.shape[0], nc=len(seen))
        model = _probe_agent_model(train_cfg, arng)
        model.projector.out_map[...] = np.linalg.pinv(embed)
        encoder = identity_encoder(train_cfg)
        seen_label_map = {r: i for i, r in enumerate(seen_rows)}
        inst = Instance(
            f_v=x_train,
            f_t_init=f_t_init_all[seen_rows],
            labels=np.asarray([seen_label_map[r] for r in y_train], dtype=np.int64),
        )
        state = TrainState(model=model, lr_fast=0.0, lr_slow=p.agent_lr_slow)
        train(p.agent_steps, state, inst, encoder, train_cfg, arng)
        # training-time routing uses seen text; evaluation sees the full set
        x_train = _refine_tokens(x_train, f_t_init_all[seen_rows], model, cfg, arng)
        x_eval = _refine_tokens(x_eval, f_t_init_all, model, cfg, arng)

    w = dirs.copy()  # zero-shot initialization: channels are the directions
    n_train = x_train.shape[0]
    onehot = np.zeros((n_train, len(cats)))
    onehot[np.arange(n_train), y_train] = 1.0

    activation = np.zeros((steps + 1, len(unseen_rows)))
    seen_acc = np.zeros(steps + 1)

    def record(idx):
        probs_eval = softmax_rows(x_eval @ w.T)
        for j, r in enumerate(unseen_rows):
            activation[idx, j] = probs_eval[y_eval == r, r].mean()
        pred = (x_train @ w.T).argmax(axis=1)
        seen_acc[idx] = float((pred == y_train).mean())

    record(0)
    for s in range(1, steps + 1):
        probs = softmax_rows(x_train @ w.T)
        d_logits = (probs - onehot) / n_train
        w -= p.lr * (d_logits.T @ x_train)
        record(s)

    return ProbeResult(
        categories=cats,
        seen=seen,
        unseen=unseen,
        activation=activation,
        mean_activation=activation.mean(axis=1),
        seen_accuracy=seen_acc,
        with_agent=with_agent,
    )
