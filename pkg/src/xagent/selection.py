"""Agent-token selection: refined cross-modal affinity, two-stage top-k over
category channels and token positions, and mask-token deduplication.

The affinity matrix gates a transport plan with cosine similarity through a
sigmoid, so every entry lives strictly inside (0, 1). Channel selection ranks
categories by mean affinity; token selection defaults to the *lowest*-affinity
positions per channel (latent tokens hide where alignment is weak), which is
also exposed as a flag. Token indices reused across channels are replaced by
a shared learnable mask token so no value row is aggregated twice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .numerics import Rng, as_matrix, gather_rows, l2_normalize_rows, sigmoid, topk
from .transport import TransportPlan

__all__ = [
    "AffinityMatrix",
    "AgentSelection",
    "SELECTION_STRATEGIES",
    "affinity",
    "select_agents_baseline",
    "select_channels",
    "select_tokens",
]

SELECTION_STRATEGIES = ("combined", "cosine-only", "ot-only", "random", "learnable-init")


@dataclass(frozen=True)
class AffinityMatrix:
    """Category-by-token affinity in (0,1) plus the factors that produced it."""

    values: np.ndarray
    plan: np.ndarray | None = None
    similarity: np.ndarray | None = None


@dataclass(frozen=True)
class AgentSelection:
    """Selected agent rows and their provenance.

    ``token_idx`` holds one index array per selected channel; ``dedup_mask``
    flags agent rows (channel-major order) whose source token was already
    used by an earlier row and was therefore replaced by the mask token.
    """

    channel_idx: np.ndarray
    token_idx: list
    dedup_mask: np.ndarray
    agents: np.ndarray

    def flat_token_idx(self) -> np.ndarray:
        if not self.token_idx:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(t, dtype=np.int64) for t in self.token_idx])


def affinity(f_t, key, plan: TransportPlan) -> AffinityMatrix:
    """sigmoid(plan ⊙ cosine(f_t, key)), the transport-refined affinity."""
    f_t = as_matrix(f_t, "f_t")
    key = as_matrix(key, "key")
    if f_t.shape[1] != key.shape[1]:
        raise ShapeError(f"width mismatch: f_t {f_t.shape} vs key {key.shape}")
    p = as_matrix(plan.plan, "plan")
    if p.shape != (f_t.shape[0], key.shape[0]):
        raise ShapeError(
            f"plan shape {p.shape} does not match ({f_t.shape[0]}, {key.shape[0]})"
        )
    sim = l2_normalize_rows(f_t) @ l2_normalize_rows(key).T
    return AffinityMatrix(values=sigmoid(p * sim), plan=p, similarity=sim)


def select_channels(a: AffinityMatrix, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k category channels by mean affinity, descending.

    Returns the channel indices and the gathered k-row affinity block.
    """
    values = as_matrix(a.values, "affinity")
    if not 1 <= k <= values.shape[0]:
        raise ArgumentError(f"k={k} out of range for {values.shape[0]} channels")
    means = values.mean(axis=1)
    idx = topk(means, k, largest=True)
    return idx, gather_rows(values, idx)


def select_tokens(
    a_star,
    value,
    q: int,
    mask_token,
    largest: bool = False,
) -> AgentSelection:
    """Pick q token positions per channel row of ``a_star`` and gather the
    matching rows of ``value``.

    Positions are ranked by affinity — ascending by default. Iterating agent
    rows channel-major, any token position already consumed by an earlier
    row contributes the shared ``mask_token`` instead of its value row and
    is flagged in ``dedup_mask``.
    """
    a_star = as_matrix(a_star, "a_star")
    value = as_matrix(value, "value")
    mask_token = np.asarray(mask_token, dtype=np.float64)
    if mask_token.shape != (value.shape[1],):
        raise ShapeError(
            f"mask token must have shape ({value.shape[1]},), got {mask_token.shape}"
        )
    if a_star.shape[1] != value.shape[0]:
        raise ShapeError(
            f"affinity block has {a_star.shape[1]} token columns but value has "
            f"{value.shape[0]} rows"
        )
    if not 1 <= q <= value.shape[0]:
        raise ArgumentError(f"q={q} out of range for {value.shape[0]} tokens")

    token_idx = [topk(row, q, largest=largest) for row in a_star]
    k = a_star.shape[0]
    agents = np.empty((k * q, value.shape[1]))
    dedup = np.zeros(k * q, dtype=bool)
    used: set[int] = set()
    for c in range(k):
        for j, t in enumerate(token_idx[c]):
            r = c * q + j
            t = int(t)
            if t in used:
                agents[r] = mask_token
                dedup[r] = True
            else:
                agents[r] = value[t]
                used.add(t)
    return AgentSelection(
        channel_idx=np.arange(k, dtype=np.int64),
        token_idx=token_idx,
        dedup_mask=dedup,
        agents=agents,
    )


def select_agents_baseline(
    strategy: str,
    *,
    value,
    k: int,
    q: int,
    mask_token=None,
    f_t=None,
    key=None,
    plan: TransportPlan | None = None,
    rng: Rng | None = None,
    learned_agents=None,
    largest: bool = False,
) -> AgentSelection:
    """Agent selection under one of the ablation strategies.

    "combined" is the main path (transport-gated cosine affinity);
    "cosine-only" and "ot-only" drop one factor each; "random" draws k*q
    distinct value rows from ``rng``; "learnable-init" returns trainable
    rows (``learned_agents`` if provided, otherwise a fresh seeded draw).
    """
    value = as_matrix(value, "value")
    n, d = value.shape
    total = k * q
    if strategy == "random":
        if rng is None:
            raise ArgumentError("random strategy requires an rng")
        if total > n:
            raise ArgumentError(f"cannot draw {total} distinct rows from {n}")
        idx = np.sort(rng.choice(n, size=total, replace=False)).astype(np.int64)
        return AgentSelection(
            channel_idx=np.zeros(0, dtype=np.int64),
            token_idx=[idx],
            dedup_mask=np.zeros(total, dtype=bool),
            agents=value[idx].copy(),
        )
    if strategy == "learnable-init":
        if learned_agents is not None:
            agents = np.asarray(learned_agents, dtype=np.float64)
            if agents.shape != (total, d):
                raise ShapeError(
                    f"learned agents must have shape ({total}, {d}), got {agents.shape}"
                )
            agents = agents.copy()
        else:
            if rng is None:
                raise ArgumentError("learnable-init without learned_agents requires an rng")
            agents = rng.normal((total, d), scale=1.0 / np.sqrt(d))
        return AgentSelection(
            channel_idx=np.zeros(0, dtype=np.int64),
            token_idx=[],
            dedup_mask=np.zeros(total, dtype=bool),
            agents=agents,
        )
    if strategy in ("combined", "cosine-only", "ot-only"):
        if f_t is None or key is None:
            raise ArgumentError(f"{strategy} strategy requires f_t and key")
        f_t = as_matrix(f_t, "f_t")
        key = as_matrix(key, "key")
        sim = l2_normalize_rows(f_t) @ l2_normalize_rows(key).T
        if strategy == "cosine-only":
            aff = AffinityMatrix(values=sigmoid(sim), similarity=sim)
        elif strategy == "ot-only":
            if plan is None:
                raise ArgumentError("ot-only strategy requires a transport plan")
            aff = AffinityMatrix(values=sigmoid(plan.plan), plan=plan.plan)
        else:
            if plan is None:
                raise ArgumentError("combined strategy requires a transport plan")
            aff = affinity(f_t, key, plan)
        if mask_token is None:
            mask_token = np.zeros(d)
        chan_idx, a_star = select_channels(aff, k)
        sel = select_tokens(a_star, value, q, mask_token, largest=largest)
        return AgentSelection(
            channel_idx=chan_idx,
            token_idx=sel.token_idx,
            dedup_mask=sel.dedup_mask,
            agents=sel.agents,
        )
    raise ArgumentError(
        f"unknown selection strategy {strategy!r}, expected one of {SELECTION_STRATEGIES}"
    )
