"""End-to-end composition: L stacked toy visual layers, each a frozen
self-attention followed by the agent block, closed by the two losses.

The toy encoder stands in for a frozen backbone: per-layer seeded Q/K/V maps
that are never trained. The agent block taps the layer's attention matrices
(wiring decides which), selects agent rows, pools cross-modal context into
them, and refines the visual tokens through the cascaded differential
attention with a residual.

Gradient flow: selection indices and the pooling sign masks are constants of
the backward pass, so the raw gathered agents carry no cotangent (the pooled
agents replace them); everything else — both attention blocks, pooling
projections and fusion scalars, text maps, temperatures — gets exact
analytic gradients, accumulated across layers for the shared parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AgentAttnParams,
    _softmax_attn_backward,
    _softmax_attn_forward,
    agent_attention_backward,
    agent_attention_forward,
    init_diff_attn,
)
from .config import RunConfig
from .errors import ArgumentError
from .losses import (
    LossParams,
    TextProjector,
    align_loss_backward,
    align_loss_forward,
    project_text_backward,
    project_text_forward,
    seg_loss_backward,
    seg_loss_forward,
)
from .numerics import Rng, l2_normalize_rows
from .pooling import (
    PoolingParams,
    init_pooling,
    mask_tokens,
    pool,
    pool_backward,
    pool_variant,
    pool_variant_backward,
)
from .selection import select_agents_baseline
from .transport import cost_matrix, sinkhorn, uniform_problem

__all__ = [
    "EncoderLayer",
    "Instance",
    "Model",
    "PipelineResult",
    "init_encoder",
    "init_model",
    "loss_and_grads",
    "make_instance",
    "named_parameters",
    "pipeline_backward",
    "pipeline_forward",
]


@dataclass
class EncoderLayer:
    """Frozen per-layer projections of the toy visual backbone."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray


@dataclass
class Model:
    """All learnable state of one run."""

    attn: AgentAttnParams
    pool: PoolingParams
    mask_token: np.ndarray
    projector: TextProjector
    loss_params: LossParams
    learned_agents: np.ndarray | None = None


@dataclass
class Instance:
    """One synthetic desk-scale example."""

    f_v: np.ndarray        # N x d visual tokens
    f_t_init: np.ndarray   # Nc x d' initial text embeddings
    labels: np.ndarray     # N token labels in [0, Nc)
    category_dirs: np.ndarray | None = None  # Nc x d generating directions


@dataclass
class PipelineResult:
    total: float
    l_seg: float
    l_align: float
    f_final: np.ndarray
    f_t: np.ndarray
    f_t_prime: np.ndarray
    layers: list
    text_cache: dict
    seg_cache: dict
    align_cache: dict


def init_model(cfg: RunConfig, rng: Rng) -> Model:
    d = cfg.dims.d
    prng = rng.child(1)
    attn = AgentAttnParams(
        # the second block's output map starts at zero so the whole agent
        # block is an exact identity on the visual tokens at step 0
        block1=init_diff_attn(prng.child(0), d, cfg.attention.lambda_init, zero_out=False),
        block2=init_diff_attn(prng.child(1), d, cfg.attention.lambda_init, zero_out=True),
        shared_across_layers=True,
    )
    pool_params = init_pooling(d, cfg.pooling.gamma_init, cfg.pooling.shared_proj)
    trng = prng.child(2)
    scale = 1.0 / math.sqrt(cfg.dims.d_prime)
    projector = TextProjector(
        out_map=trng.normal((cfg.dims.d_prime, d), scale),
        phi=trng.normal((cfg.dims.d_prime, d), scale),
    )
    learned_agents = None
    if cfg.selection.strategy == "learnable-init":
        learned_agents = prng.child(3).normal(
            (cfg.selection.k * cfg.selection.q, d), 1.0 / math.sqrt(d)
        )
    return Model(
        attn=attn,
        pool=pool_params,
        mask_token=np.zeros(d),
        projector=projector,
        loss_params=LossParams(log_tau1=np.zeros(()), log_tau2=np.zeros(())),
        learned_agents=learned_agents,
    )


def init_encoder(cfg: RunConfig, rng: Rng) -> list:
    d = cfg.dims.d
    erng = rng.child(2)
    scale = 1.0 / math.sqrt(d)
    return [
        EncoderLayer(
            w_q=erng.child(3 * i).normal((d, d), scale),
            w_k=erng.child(3 * i + 1).normal((d, d), scale),
            w_v=erng.child(3 * i + 2).normal((d, d), scale),
        )
        for i in range(cfg.dims.layers)
    ]


def identity_encoder(cfg: RunConfig) -> list:
    """Backbone-free stack: tokens pass through untouched and serve directly
    as the Q/K/V matrices of each layer (used by the probing simulation)."""
    return [None] * cfg.dims.layers


def make_instance(cfg: RunConfig, rng: Rng) -> Instance:
    """Tokens are noisy copies of their category's unit direction; initial
    text rows are unit vectors in the wider text space."""
    drng = rng.child(0)
    dirs = l2_normalize_rows(drng.normal((cfg.dims.nc, cfg.dims.d)))
    labels = np.arange(cfg.dims.n) % cfg.dims.nc
    labels = labels[drng.permutation(cfg.dims.n)]
    f_v = dirs[labels] + cfg.data.noise * drng.normal((cfg.dims.n, cfg.dims.d))
    f_t_init = l2_normalize_rows(drng.normal((cfg.dims.nc, cfg.dims.d_prime)))
    return Instance(f_v=f_v, f_t_init=f_t_init, labels=labels, category_dirs=dirs)


def named_parameters(model: Model, cfg: RunConfig) -> dict:
    """Flat name -> array census of every learnable tensor.

    Arrays are the live model storage; in-place updates train the model.
    With a shared pooling projection the single map appears once.
    """
    params = {}
    for name, block in (("block1", model.attn.block1), ("block2", model.attn.block2)):
        params[f"{name}.w_q"] = block.w_q
        params[f"{name}.w_k"] = block.w_k
        params[f"{name}.w_v"] = block.w_v
        params[f"{name}.w_o"] = block.w_o
        params[f"{name}.lam"] = block.lam
    if cfg.pooling.shared_proj:
        params["pool.proj_shared"] = model.pool.proj_v
    else:
        params["pool.proj_v"] = model.pool.proj_v
        params["pool.proj_t"] = model.pool.proj_t
    params["pool.gamma_v"] = model.pool.gamma_v
    params["pool.gamma_t"] = model.pool.gamma_t
    if cfg.pooling.mode == "single-gamma":
        params["pool.gamma_single"] = model.pool.gamma_single
    params["select.mask_token"] = model.mask_token
    if cfg.selection.strategy == "learnable-init":
        params["select.agents"] = model.learned_agents
    params["text.out_map"] = model.projector.out_map
    params["text.phi"] = model.projector.phi
    params["loss.log_tau1"] = model.loss_params.log_tau1
    params["loss.log_tau2"] = model.loss_params.log_tau2
    return params


def _select_layer_agents(cfg, model, rng, layer_idx, f_t, mats):
    """Run the configured selection strategy against this layer's matrices."""
    strategy = cfg.selection.strategy
    src = mats[cfg.attention.wiring[0]]
    tgt = mats[cfg.attention.wiring[1]]
    plan = None
    if strategy in ("combined", "ot-only"):
        cost = cost_matrix(f_t, src, cfg.transport.cost_variant)
        plan = sinkhorn(
            uniform_problem(cost, cfg.transport.epsilon),
            max_iter=cfg.transport.max_iter,
            tol=cfg.transport.tol,
        )
    sel = select_agents_baseline(
        strategy,
        value=tgt,
        k=cfg.selection.k,
        q=cfg.selection.q,
        mask_token=model.mask_token,
        f_t=f_t,
        key=src,
        plan=plan,
        rng=rng.child(1000 + layer_idx),
        learned_agents=model.learned_agents,
        largest=cfg.selection.largest,
    )
    return sel, plan


def pipeline_forward(instance: Instance, model: Model, encoder: list, cfg: RunConfig, rng: Rng) -> PipelineResult:
    if len(encoder) != cfg.dims.layers:
        raise ArgumentError(f"encoder has {len(encoder)} layers, config wants {cfg.dims.layers}")
    d = cfg.dims.d
    scale = 1.0 / math.sqrt(d)
    f_t, f_t_prime, text_cache = project_text_forward(instance.f_t_init, model.projector)

    f = instance.f_v
    layer_records = []
    for li, enc in enumerate(encoder):
        if enc is None:
            q_e = k_e = v_e = f
            f_sa = f
            enc_cache = None
        else:
            q_e = f @ enc.w_q
            k_e = f @ enc.w_k
            v_e = f @ enc.w_v
            attn_out, enc_cache = _softmax_attn_forward(q_e, k_e, v_e, scale)
            f_sa = f + attn_out

        mats = {"Q": q_e, "K": k_e, "V": v_e}
        sel, plan = _select_layer_agents(cfg, model, rng, li, f_t, mats)

        mask_v = mask_tokens(f_sa, sel.agents)
        mask_t = mask_tokens(f_t, sel.agents)
        f_vp = pool(f_sa, mask_v, model.pool.proj_v)
        f_tp = pool(f_t, mask_t, model.pool.proj_t)
        f_x = pool_variant(cfg.pooling.mode, f_vp, f_tp, model.pool)

        f_next, record, attn_cache = agent_attention_forward(
            f_sa, f_x, f_t, model.attn,
            heads=cfg.attention.heads, pre_norm=cfg.attention.pre_norm,
        )
        layer_records.append({
            "enc_cache": enc_cache,
            "enc_weights": enc_cache["weights"] if enc_cache is not None else None,
            "f_in": f, "f_sa": f_sa, "q_e": q_e, "k_e": k_e, "v_e": v_e,
            "selection": sel, "plan": plan,
            "mask_v": mask_v, "mask_t": mask_t, "f_vp": f_vp, "f_tp": f_tp, "f_x": f_x,
            "attn_cache": attn_cache, "record": record,
        })
        f = f_next

    l_seg, seg_cache = seg_loss_forward(f, f_t, instance.labels)
    l_align, align_cache = align_loss_forward(f_t, f_t_prime, model.loss_params)
    return PipelineResult(
        total=l_seg + l_align,
        l_seg=l_seg,
        l_align=l_align,
        f_final=f,
        f_t=f_t,
        f_t_prime=f_t_prime,
        layers=layer_records,
        text_cache=text_cache,
        seg_cache=seg_cache,
        align_cache=align_cache,
    )


def pipeline_backward(result: PipelineResult, model: Model, encoder: list, cfg: RunConfig) -> dict:
    """Analytic gradients of the total loss for every census parameter."""
    params = named_parameters(model, cfg)
    grads = {name: np.zeros_like(p) for name, p in params.items()}

    d_f, d_f_t_seg = seg_loss_backward(result.seg_cache)
    d_f_t_align, d_f_t_prime, d_lt1, d_lt2 = align_loss_backward(result.align_cache)
    d_f_t = d_f_t_seg + d_f_t_align
    grads["loss.log_tau1"] += d_lt1
    grads["loss.log_tau2"] += d_lt2

    for li in range(len(result.layers) - 1, -1, -1):
        layer = result.layers[li]
        d_f_sa, d_f_x, d_f_t_layer, attn_grads = agent_attention_backward(
            layer["attn_cache"], d_f
        )
        d_f_t += d_f_t_layer
        for bname, bgrads in attn_grads.items():
            for wname, g in bgrads.items():
                grads[f"{bname}.{wname}"] += g

        d_vp, d_tp, d_gv, d_gt, d_gs = pool_variant_backward(
            cfg.pooling.mode, layer["f_tp"], model.pool, d_f_x
        )
        grads["pool.gamma_v"] += d_gv
        grads["pool.gamma_t"] += d_gt
        if cfg.pooling.mode == "single-gamma":
            grads["pool.gamma_single"] += d_gs
        d_src_v, d_proj_v = pool_backward(layer["f_sa"], layer["mask_v"], model.pool.proj_v, d_vp)
        d_src_t, d_proj_t = pool_backward(result.f_t, layer["mask_t"], model.pool.proj_t, d_tp)
        d_f_sa += d_src_v
        d_f_t += d_src_t
        if cfg.pooling.shared_proj:
            grads["pool.proj_shared"] += d_proj_v + d_proj_t
        else:
            grads["pool.proj_v"] += d_proj_v
            grads["pool.proj_t"] += d_proj_t
        # raw selected agents enter only through the sign masks (constants
        # here), so nothing propagates to the value rows or the mask token

        enc = encoder[li]
        if enc is None:
            d_f = d_f_sa
        else:
            d_q_e, d_k_e, d_v_e = _softmax_attn_backward(layer["enc_cache"], d_f_sa)
            d_f = (
                d_f_sa
                + d_q_e @ enc.w_q.T
                + d_k_e @ enc.w_k.T
                + d_v_e @ enc.w_v.T
            )

    text_grads = project_text_backward(result.text_cache, d_f_t, d_f_t_prime)
    grads["text.out_map"] += text_grads["out_map"]
    grads["text.phi"] += text_grads["phi"]
    return grads


def loss_and_grads(instance: Instance, model: Model, encoder: list, cfg: RunConfig, rng: Rng):
    """One forward/backward sweep: (total loss, grads, full result)."""
    result = pipeline_forward(instance, model, encoder, cfg, rng)
    grads = pipeline_backward(result, model, encoder, cfg)
    return result.total, grads, result
