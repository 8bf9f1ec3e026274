"""Command-line harness: configuration ingestion, pipeline orchestration,
invariant execution, and artifact emission.

Subcommands: ``forward`` (one pass plus the invariant suite), ``train``
(descent loop plus final invariants), ``ablate`` (variant sweep), ``probe``
(paired latent-channel simulations), ``mad`` (per-layer attention-distance
profile). Every run writes one JSON report plus optional heatmap/trajectory
sidecars; the process exits 0 only if every invariant check passed.
"""

from __future__ import annotations

import argparse
import copy
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .attention import mean_attention_distance
from .config import RunConfig, parse_config
from .errors import ConfigError
from .numerics import Rng, softmax_rows
from .pipeline import (
    PipelineResult,
    init_encoder,
    init_model,
    make_instance,
    pipeline_forward,
)
from .report import InvariantResult, RunReport, emit_heatmap, emit_trajectory
from .selection import affinity
from .training import make_train_state, probe_simulation, train
from .transport import cost_matrix, sinkhorn, uniform_problem

__all__ = ["INVARIANT_NAMES", "main", "run", "run_invariant_suite"]

INVARIANT_NAMES = (
    "transport.plan_nonnegative",
    "transport.marginal_feasibility",
    "selection.affinity_in_unit_interval",
    "selection.agent_row_count",
    "selection.no_duplicate_sources",
    "pooling.mask_entries_nonnegative",
    "pooling.mask_columns_sum_one",
    "attention.branch_rows_stochastic",
    "attention.diff_row_sums_match_lambda",
    "attention.output_shape_preserved",
    "attention.output_finite",
    "loss.align_nonnegative",
    "loss.total_finite",
)

SELECTION_VARIANTS = ("random", "learnable-init", "cosine-only", "ot-only", "combined")
COST_VARIANTS = ("mae", "mse", "dot")
POOLING_SCALAR_VARIANTS = ("single-gamma", "dual")
WIRING_VARIANTS = tuple(a + b for a in "QKV" for b in "QKV")


def _reference_plan(result: PipelineResult, cfg: RunConfig):
    """The transport plan the run used, or a freshly solved one when the
    configured strategy bypasses transport."""
    layer = result.layers[0]
    if layer["plan"] is not None:
        return layer["plan"], layer
    src = {"Q": layer["q_e"], "K": layer["k_e"], "V": layer["v_e"]}[cfg.attention.wiring[0]]
    cost = cost_matrix(result.f_t, src, cfg.transport.cost_variant)
    plan = sinkhorn(
        uniform_problem(cost, cfg.transport.epsilon),
        max_iter=cfg.transport.max_iter,
        tol=cfg.transport.tol,
    )
    return plan, layer


def run_invariant_suite(result: PipelineResult, cfg: RunConfig) -> list:
    """Evaluate the fixed invariant list against one pipeline result."""
    checks = []

    def add(name, passed, measured, tolerance):
        checks.append(InvariantResult(name=name, passed=bool(passed),
                                      measured=float(measured), tolerance=float(tolerance)))

    plan, layer0 = _reference_plan(result, cfg)
    plans = [rec["plan"] for rec in result.layers if rec["plan"] is not None] or [plan]
    min_entry = min(p.plan.min() for p in plans)
    add("transport.plan_nonnegative", min_entry >= 0.0, min_entry, 0.0)
    worst_marginal = max(p.marginal_error for p in plans)
    add("transport.marginal_feasibility", worst_marginal < cfg.transport.tol,
        worst_marginal, cfg.transport.tol)

    src = {"Q": layer0["q_e"], "K": layer0["k_e"], "V": layer0["v_e"]}[cfg.attention.wiring[0]]
    aff = affinity(result.f_t, src, plan).values
    margin = min(aff.min(), 1.0 - aff.max())
    add("selection.affinity_in_unit_interval", margin > 0.0, margin, 0.0)

    expected = cfg.selection.k * cfg.selection.q
    count_err = max(abs(rec["selection"].agents.shape[0] - expected) for rec in result.layers)
    add("selection.agent_row_count", count_err == 0, count_err, 0.0)

    dup = 0
    for rec in result.layers:
        sel = rec["selection"]
        flat = sel.flat_token_idx()
        if flat.size:
            alive = flat[~sel.dedup_mask[: flat.size]] if sel.dedup_mask.size == flat.size else flat
            dup = max(dup, alive.size - np.unique(alive).size)
    add("selection.no_duplicate_sources", dup == 0, dup, 0.0)

    mask_min = min(min(rec["mask_v"].min(), rec["mask_t"].min()) for rec in result.layers)
    add("pooling.mask_entries_nonnegative", mask_min >= 0.0, mask_min, 0.0)
    col_err = max(
        max(np.abs(rec["mask_v"].sum(axis=0) - 1.0).max(),
            np.abs(rec["mask_t"].sum(axis=0) - 1.0).max())
        for rec in result.layers
    )
    add("pooling.mask_columns_sum_one", col_err < 1e-9, col_err, 1e-9)

    branch_err = 0.0
    diff_err = 0.0
    for rec in result.layers:
        for bw in rec["record"].blocks.values():
            branch_err = max(
                branch_err,
                np.abs(bw.first.sum(axis=1) - 1.0).max(),
                np.abs(bw.second.sum(axis=1) - 1.0).max(),
            )
            diff = bw.first - bw.lam * bw.second
            diff_err = max(diff_err, np.abs(diff.sum(axis=1) - (1.0 - bw.lam)).max())
    add("attention.branch_rows_stochastic", branch_err < 1e-9, branch_err, 1e-9)
    add("attention.diff_row_sums_match_lambda", diff_err < 1e-9, diff_err, 1e-9)

    shape_ok = result.f_final.shape == (cfg.dims.n, cfg.dims.d)
    add("attention.output_shape_preserved", shape_ok, 0.0 if shape_ok else 1.0, 0.0)
    finite = np.all(np.isfinite(result.f_final))
    add("attention.output_finite", finite, 0.0 if finite else 1.0, 0.0)

    add("loss.align_nonnegative", result.l_align >= -1e-12, result.l_align, 0.0)
    total_finite = np.isfinite(result.total)
    add("loss.total_finite", total_finite, 0.0 if total_finite else 1.0, 0.0)

    assert tuple(c.name for c in checks) == INVARIANT_NAMES
    return checks


def _grid_dims(n: int) -> tuple:
    h = 1
    for cand in range(1, int(math.isqrt(n)) + 1):
        if n % cand == 0:
            h = cand
    return n // h, h  # (grid_w, grid_h), grid_w >= grid_h


def _mad_profile(result: PipelineResult, cfg: RunConfig) -> dict:
    grid_w, grid_h = _grid_dims(cfg.dims.n)
    return {
        f"layer_{i}": mean_attention_distance(rec["enc_weights"], grid_w, grid_h)
        for i, rec in enumerate(result.layers)
    }


def _effective_agent_map(result: PipelineResult) -> np.ndarray:
    rec = result.layers[0]["record"].blocks
    bw1, bw2 = rec["agent_text"], rec["visual_agent"]
    d1 = bw1.first - bw1.lam * bw1.second
    d2 = bw2.first - bw2.lam * bw2.second
    return d2 @ d1


def _emit_forward_artifacts(result, cfg, out_dir, emitted):
    if "heatmaps" not in cfg.output.formats:
        return
    f_v0 = result.layers[0]["f_in"]
    cross = softmax_rows((f_v0 @ result.f_t.T) / math.sqrt(cfg.dims.d))
    emit_heatmap(cross, out_dir / "heatmap_cross_attn.txt")
    emitted.append("heatmap_cross_attn.txt")
    emit_heatmap(_effective_agent_map(result), out_dir / "heatmap_agent_attn.txt")
    emitted.append("heatmap_agent_attn.txt")
    for i, rec in enumerate(result.layers):
        name = f"heatmap_encoder_layer{i}.txt"
        emit_heatmap(rec["enc_weights"], out_dir / name)
        emitted.append(name)


def _probe_payload(res) -> dict:
    return {
        "mean_activation": [float(v) for v in res.mean_activation],
        "seen_accuracy": [float(v) for v in res.seen_accuracy],
        "per_channel": {
            str(c): [float(v) for v in res.activation[:, j]]
            for j, c in enumerate(res.unseen)
        },
    }


def run(subcommand: str, cfg: RunConfig, out_dir=None) -> RunReport:
    """Execute one subcommand and return its report (artifacts included)."""
    t_start = time.perf_counter()
    out_dir = Path(out_dir if out_dir is not None else cfg.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport(subcommand=subcommand, config=cfg.to_flat_dict())
    emitted = report.emitted_files

    rng = Rng(cfg.training.seed)
    instance = make_instance(cfg, rng)
    encoder = init_encoder(cfg, rng)

    if subcommand == "forward":
        model = init_model(cfg, rng)
        result = pipeline_forward(instance, model, encoder, cfg, rng)
        report.invariants = run_invariant_suite(result, cfg)
        report.losses = {"total": result.total, "seg": result.l_seg, "align": result.l_align}
        mad = _mad_profile(result, cfg)
        report.mad = {"start": mad, "end": mad}
        _emit_forward_artifacts(result, cfg, out_dir, emitted)

    elif subcommand == "train":
        state = make_train_state(cfg, rng)
        start_result = pipeline_forward(instance, state.model, encoder, cfg, rng)
        mad_start = _mad_profile(start_result, cfg)
        train(cfg.training.steps, state, instance, encoder, cfg, rng)
        final_result = pipeline_forward(instance, state.model, encoder, cfg, rng)
        report.invariants = run_invariant_suite(final_result, cfg)
        report.losses = {
            "total": state.loss_history,
            "seg": state.seg_history,
            "align": state.align_history,
        }
        report.mad = {"start": mad_start, "end": _mad_profile(final_result, cfg)}
        if "trajectories" in cfg.output.formats:
            emit_trajectory(
                {"step": np.arange(len(state.loss_history)),
                 "total": state.loss_history,
                 "seg": state.seg_history,
                 "align": state.align_history},
                out_dir / "trajectory_loss.txt",
            )
            emitted.append("trajectory_loss.txt")
        _emit_forward_artifacts(final_result, cfg, out_dir, emitted)

    elif subcommand == "ablate":
        model = init_model(cfg, rng)
        base = pipeline_forward(instance, model, encoder, cfg, rng)
        report.invariants = run_invariant_suite(base, cfg)
        report.losses = {"total": base.total, "seg": base.l_seg, "align": base.l_align}
        mad = _mad_profile(base, cfg)
        report.mad = {"start": mad, "end": mad}
        report.variants = []
        sweep = (
            [("selection.strategy", v) for v in SELECTION_VARIANTS]
            + [("transport.cost_variant", v) for v in COST_VARIANTS]
            + [("pooling.mode", v) for v in POOLING_SCALAR_VARIANTS]
            + [("attention.wiring", v) for v in WIRING_VARIANTS]
        )
        for key, value in sweep:
            vcfg = copy.deepcopy(cfg)
            section, field = key.split(".")
            setattr(getattr(vcfg, section), field, value)
            vcfg.validate()
            vrng = Rng(vcfg.training.seed)
            vinstance = make_instance(vcfg, vrng)
            vencoder = init_encoder(vcfg, vrng)
            vstate = make_train_state(vcfg, vrng)
            train(vcfg.training.steps, vstate, vinstance, vencoder, vcfg, vrng)
            vresult = pipeline_forward(vinstance, vstate.model, vencoder, vcfg, vrng)
            vchecks = run_invariant_suite(vresult, vcfg)
            dedup = np.mean([rec["selection"].dedup_mask.mean() for rec in vresult.layers])
            iters = [rec["plan"].iterations for rec in vresult.layers if rec["plan"] is not None]
            report.variants.append({
                "key": key,
                "variant": value,
                "invariants_passed": all(c.passed for c in vchecks),
                "failed": [c.name for c in vchecks if not c.passed],
                "initial_loss": float(vstate.loss_history[0]),
                "total_loss": float(vresult.total),
                "dedup_fraction": float(dedup),
                "plan_iterations": max(iters) if iters else 0,
            })

    elif subcommand == "probe":
        seen = list(range(cfg.probe.seen))
        unseen = list(range(cfg.probe.seen, cfg.probe.seen + cfg.probe.unseen))
        baseline = probe_simulation(seen, unseen, cfg.probe.steps, False, cfg, cfg.training.seed)
        with_agent = probe_simulation(seen, unseen, cfg.probe.steps, True, cfg, cfg.training.seed)
        model = init_model(cfg, rng)
        result = pipeline_forward(instance, model, encoder, cfg, rng)
        report.invariants = run_invariant_suite(result, cfg)
        report.losses = {"total": result.total, "seg": result.l_seg, "align": result.l_align}
        mad = _mad_profile(result, cfg)
        report.mad = {"start": mad, "end": mad}
        report.probe = {
            "seen": seen,
            "unseen": unseen,
            "baseline": _probe_payload(baseline),
            "with_agent": _probe_payload(with_agent),
        }
        if "trajectories" in cfg.output.formats:
            for label, res in (("baseline", baseline), ("with_agent", with_agent)):
                name = f"trajectory_probe_{label}.txt"
                emit_trajectory(
                    {"step": np.arange(res.mean_activation.size),
                     "unseen_activation": res.mean_activation,
                     "seen_accuracy": res.seen_accuracy},
                    out_dir / name,
                )
                emitted.append(name)

    elif subcommand == "mad":
        model = init_model(cfg, rng)
        result = pipeline_forward(instance, model, encoder, cfg, rng)
        report.invariants = run_invariant_suite(result, cfg)
        report.losses = {"total": result.total, "seg": result.l_seg, "align": result.l_align}
        mad = _mad_profile(result, cfg)
        report.mad = {"start": mad, "end": mad}
        _emit_forward_artifacts(result, cfg, out_dir, emitted)

    else:
        raise ConfigError(f"unknown subcommand {subcommand!r}")

    report.timings = {"total_s": time.perf_counter() - t_start}
    if "json" in cfg.output.formats:
        report.save(out_dir / "report.json")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xagent",
        description="Desk-scale agent-attention harness: forward checks, training, "
        "ablations, latent-channel probing, and attention-distance profiles.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in (
        ("forward", "one pipeline pass plus the invariant suite"),
        ("train", "gradient-descent loop plus final invariants"),
        ("ablate", "sweep selection/cost/pooling/wiring variants"),
        ("probe", "paired latent-channel probing simulations"),
        ("mad", "per-layer mean-attention-distance profile"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="config file path")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="inline config override (repeatable)")
        p.add_argument("--out", type=str, default=None,
                       help="output directory (XAGENT_OUT env var wins)")
        p.add_argument("--seed", type=int, default=None, help="override training.seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.training.seed = args.seed
        out_dir = os.environ.get("XAGENT_OUT") or args.out
        report = run(args.subcommand, cfg, out_dir)
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for inv in report.invariants:
        status = "PASS" if inv.passed else "FAIL"
        print(f"[{status}] {inv.name}: measured={inv.measured:.3g} tol={inv.tolerance:.3g}")
    if report.variants is not None:
        for row in report.variants:
            status = "PASS" if row["invariants_passed"] else "FAIL"
            print(f"[{status}] variant {row['key']}={row['variant']}: "
                  f"total_loss={row['total_loss']:.6g}")
    ok = report.all_passed()
    print(f"{'OK' if ok else 'FAILED'}: {report.subcommand} "
          f"({len(report.invariants)} invariants)")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
