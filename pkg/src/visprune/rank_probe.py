"""Offline feature-rank probing and rank-proportional token budgets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderState, image_tokens, run_encoder
from .errors import DegenerateRanks, InvalidConfig
from .linalg import DEFAULT_REL_TOL, numerical_ranks

# shares within this distance of an integer are snapped before flooring
_SNAP = 1e-9


@dataclass(frozen=True)
class RankProfile:
    """Mean and std of per-block numerical rank, keyed by encoder id."""

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    batch_size: int
    rel_tol: float = DEFAULT_REL_TOL

    @property
    def encoder_ids(self) -> list[str]:
        return list(self.mean)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "rel_tol": self.rel_tol,
            "encoders": {
                eid: {"mean_rank": self.mean[eid].tolist(), "rank_std": self.std[eid].tolist()}
                for eid in self.mean
            },
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RankProfile":
        try:
            enc = d["encoders"]
            return cls(
                mean={k: np.asarray(v["mean_rank"], dtype=float) for k, v in enc.items()},
                std={k: np.asarray(v["rank_std"], dtype=float) for k, v in enc.items()},
                batch_size=int(d["batch_size"]),
                rel_tol=float(d.get("rel_tol", DEFAULT_REL_TOL)),
            )
        except (KeyError, TypeError, AttributeError) as exc:
            raise InvalidConfig(f"malformed rank profile: {exc}") from exc


def block_ranks(state: EncoderState, tokens: np.ndarray, rel_tol: float) -> list[int]:
    return batch_block_ranks(state, [tokens], rel_tol)[0].tolist()


def batch_block_ranks(state: EncoderState, token_sets: Sequence[np.ndarray], rel_tol: float) -> np.ndarray:
    """Feature rank per (input, block); all decompositions run as one batch."""
    feats = [o.features for tokens in token_sets for o in run_encoder(state, tokens)]
    ranks = numerical_ranks(feats, rel_tol)
    return np.array(ranks, dtype=np.int64).reshape(len(token_sets), state.spec.num_blocks)


def probe_ranks(
    encoders: Sequence[EncoderState],
    batch: Sequence,
    rel_tol: float = DEFAULT_REL_TOL,
) -> RankProfile:
    """Rank of every block's visual features, averaged over ``batch``.

    Batch items are image seeds (ints), or mappings from encoder id to a raw
    token grid for externally supplied inputs.
    """
    if len(batch) == 0:
        raise InvalidConfig("probe batch must be non-empty")
    if not (0.0 < rel_tol < 1.0):
        raise InvalidConfig(f"rel_tol must lie in (0, 1), got {rel_tol}")
    mean, std = {}, {}
    for state in encoders:
        spec = state.spec
        token_sets = [
            item[spec.encoder_id] if isinstance(item, Mapping) else image_tokens(spec, int(item), state.run_seed)
            for item in batch
        ]
        ranks = batch_block_ranks(state, token_sets, rel_tol).astype(float)
        mean[spec.encoder_id] = ranks.mean(axis=0)
        std[spec.encoder_id] = ranks.std(axis=0)
    return RankProfile(mean, std, len(batch), rel_tol)


def apportion(
    weights: Sequence[float],
    total: int,
    min_each: int = 1,
    caps: Sequence[int] | None = None,
) -> list[int]:
    """Split ``total`` proportionally to ``weights`` into integers summing to ``total``.

    Largest-remainder rounding with ties to the lower index.  Entries above
    ``caps`` are pinned and the excess re-spread over the rest.  Entries
    below ``min_each`` are raised, the deficit taken one unit at a time from
    the largest allocation (ties: smaller weight, then higher index), which
    keeps the allocation monotone in the weights.
    """
    w = [float(x) for x in weights]
    n = len(w)
    if n == 0:
        raise InvalidConfig("nothing to apportion over")
    if any(not math.isfinite(x) or x < 0 for x in w):
        raise InvalidConfig("weights must be finite and non-negative")
    if math.fsum(w) <= 0:
        raise DegenerateRanks("all ranks are zero at this prune point")
    total = int(total)
    if total < n * min_each:
        raise InvalidConfig(f"total {total} below {n} x min_each {min_each}")
    cap = [math.inf] * n if caps is None else [int(c) for c in caps]
    if any(c < min_each for c in cap):
        raise InvalidConfig("a cap is below min_each")
    if sum(c for c in cap) < total:
        raise InvalidConfig(f"total {total} exceeds the sum of caps")

    share = [0.0] * n
    pinned = [False] * n
    while True:
        free = [i for i in range(n) if not pinned[i]]
        rest = total - sum(cap[i] for i in range(n) if pinned[i])
        wsum = math.fsum(w[i] for i in free)
        over = []
        for i in free:
            share[i] = rest * w[i] / wsum if wsum > 0 else rest / len(free)
            if share[i] > cap[i]:
                over.append(i)
        if not over:
            break
        for i in over:
            pinned[i] = True
            share[i] = float(cap[i])

    alloc = []
    rema = []
    for s in share:
        near = round(s)
        if abs(s - near) < _SNAP * max(1.0, abs(s)):
            s = float(near)
        f = math.floor(s)
        alloc.append(int(f))
        rema.append(round(s - f, 9))
    left = total - sum(alloc)
    for i in sorted(range(n), key=lambda i: (-rema[i], i))[:left]:
        alloc[i] += 1

    for i in range(n):
        while alloc[i] < min_each:
            donors = [j for j in range(n) if alloc[j] > min_each and j != i]
            j = max(donors, key=lambda j: (alloc[j], -w[j], j))
            alloc[j] -= 1
            alloc[i] += 1
    return alloc


@dataclass(frozen=True)
class BudgetPlan:
    """Retained-token counts per prune point, total and per encoder."""

    prune_points: list[dict[str, int]]
    per_point_total: list[int]
    per_point_per_encoder: list[dict[str, int]]

    def budgets_for(self, encoder_id: str) -> list[int]:
        return [p[encoder_id] for p in self.per_point_per_encoder]

    def to_dict(self) -> dict:
        return {
            "prune_points": [
                {"phase": i, "blocks": dict(p)} for i, p in enumerate(self.prune_points)
            ],
            "per_point_total": list(self.per_point_total),
            "per_point_per_encoder": [dict(p) for p in self.per_point_per_encoder],
        }


def allocate_budget(
    profile: RankProfile,
    prune_points: Sequence[Mapping[str, int]],
    totals: Sequence[int],
    min_tokens_per_encoder: int = 1,
    token_counts: Mapping[str, int] | None = None,
) -> BudgetPlan:
    """Share each prune point's total across encoders by the rank at that block.

    ``prune_points[p][encoder_id]`` is the block after which point ``p``
    prunes; its measured rank drives the share.  With ``token_counts`` the
    first point is capped at each encoder's input size and every later point
    at the previous budget, so budgets never grow along an encoder.
    """
    if len(prune_points) != len(totals):
        raise InvalidConfig("one total per prune point is required")
    ids = profile.encoder_ids
    per_encoder = []
    prev: list[int] | None = None
    for point, total in zip(prune_points, totals):
        ranks = [float(profile.mean[eid][point[eid]]) for eid in ids]
        if prev is not None:
            caps = prev
        elif token_counts is not None:
            caps = [int(token_counts[eid]) for eid in ids]
        else:
            caps = None
        alloc = apportion(ranks, total, min_tokens_per_encoder, caps)
        per_encoder.append(dict(zip(ids, alloc)))
        if token_counts is not None:
            prev = alloc
    return BudgetPlan(
        prune_points=[{eid: int(p[eid]) for eid in ids} for p in prune_points],
        per_point_total=[int(t) for t in totals],
        per_point_per_encoder=per_encoder,
    )
