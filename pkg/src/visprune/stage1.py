"""Progressive pruning inside each vision encoder.

Blocks are split into three contiguous phases.  After a prune block in the
shallow phase, tokens least similar to the mean token are kept; in the two
deeper phases the tokens receiving the most cls attention are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import BlockOutput, EncoderState, forward_block, initial_output
from .errors import InvalidConfig, InvalidInput
from .linalg import ScoredIndexList, as_matrix, as_vector, cosine_matrix, softmax, top_k_indices
from .nn import split_heads
from .seeding import digest
from .trace import TraceEntry

AVG_SIMILARITY = "avg_similarity"
CLS_ATTENTION = "cls_attention"


def phase_sizes(num_blocks: int) -> tuple[int, int, int]:
    a = math.ceil(num_blocks / 3)
    b = math.ceil((num_blocks - a) / 2)
    return a, b, num_blocks - a - b


@dataclass(frozen=True)
class PhaseSchedule:
    num_blocks: int
    boundaries: tuple[int, int]
    prune_blocks: tuple[int, ...]

    @classmethod
    def default(cls, num_blocks: int, prune_blocks: Sequence[int] | None = None) -> "PhaseSchedule":
        if num_blocks < 3:
            raise InvalidConfig("need at least 3 blocks for three phases")
        a, b, _ = phase_sizes(num_blocks)
        if prune_blocks is None:
            prune_blocks = (a - 1, a + b - 1, num_blocks - 1)
        sched = cls(num_blocks, (a, a + b), tuple(int(p) for p in prune_blocks))
        sched.validate()
        return sched

    def validate(self) -> None:
        lo, hi = self.boundaries
        if not 0 < lo < hi < self.num_blocks:
            raise InvalidConfig(f"phase boundaries {self.boundaries} leave an empty phase")
        pb = self.prune_blocks
        if any(b < 0 or b >= self.num_blocks for b in pb):
            raise InvalidConfig(f"prune block out of range in {pb}")
        if any(x >= y for x, y in zip(pb, pb[1:])):
            raise InvalidConfig(f"prune blocks must be strictly increasing: {pb}")

    def phase_of(self, block: int) -> int:
        lo, hi = self.boundaries
        return 0 if block < lo else (1 if block < hi else 2)

    def criterion_for(self, block: int) -> str:
        return AVG_SIMILARITY if self.phase_of(block) == 0 else CLS_ATTENTION


def avg_similarity_scores(features) -> np.ndarray:
    """Negative cosine similarity of each token to the mean of the current tokens."""
    x = as_matrix(features, "features")
    if x.shape[0] == 0:
        return np.zeros(0)
    return -cosine_matrix(x, x.mean(axis=0, keepdims=True))[:, 0]


def select_by_avg_similarity(features, k: int) -> ScoredIndexList:
    return top_k_indices(avg_similarity_scores(features), k)


def cls_attention_scores(cls_query, keys, head_dim: int) -> np.ndarray:
    """Per-head softmax of q_cls . K^T / sqrt(d_k) over visual keys, averaged over heads."""
    q = as_vector(cls_query, "cls_query")
    keys = as_matrix(keys, "keys")
    if q.shape[0] != keys.shape[1]:
        raise InvalidInput(f"cls_query length {q.shape[0]} != key dim {keys.shape[1]}")
    if head_dim < 1 or q.shape[0] % head_dim:
        raise InvalidInput(f"head_dim {head_dim} does not divide {q.shape[0]}")
    if keys.shape[0] == 0:
        return np.zeros(0)
    heads = q.shape[0] // head_dim
    qh = q.reshape(heads, 1, head_dim)
    kh = split_heads(keys, heads)
    logits = np.matmul(qh, kh.transpose(0, 2, 1))[:, 0, :] / np.sqrt(head_dim)
    return softmax(logits, axis=-1).mean(axis=0)


def select_by_cls_attention(cls_query, keys, k: int, head_dim: int) -> ScoredIndexList:
    return top_k_indices(cls_attention_scores(cls_query, keys, head_dim), k)


@dataclass
class Stage1Result:
    output: BlockOutput
    entries: list[TraceEntry]
    live_counts: list[int]  # visual tokens entering each block


def run_stage1(
    state: EncoderState,
    tokens: np.ndarray,
    schedule: PhaseSchedule,
    budgets: Sequence[int],
) -> Stage1Result:
    """Forward the encoder, pruning after each scheduled block to its budget.

    A budget above the live token count is clamped and recorded as a
    warning rather than raised.
    """
    spec = state.spec
    if len(budgets) != len(schedule.prune_blocks):
        raise InvalidConfig(
            f"{spec.encoder_id}: {len(budgets)} budgets for {len(schedule.prune_blocks)} prune blocks"
        )
    budget_at = dict(zip(schedule.prune_blocks, budgets))
    out = initial_output(state, tokens)
    entries: list[TraceEntry] = []
    live = []
    for b in range(spec.num_blocks):
        live.append(out.rows)
        out = forward_block(state, b, out)
        if b not in budget_at:
            continue
        k = int(budget_at[b])
        warnings = []
        if k > out.rows:
            warnings.append(f"budget {k} clamped to {out.rows} live tokens")
            k = out.rows
        criterion = schedule.criterion_for(b)
        if criterion == AVG_SIMILARITY:
            scores = avg_similarity_scores(out.features)
        else:
            scores = cls_attention_scores(out.cls_query, out.keys, spec.head_dim)
        chosen = top_k_indices(scores, k).sorted_indices()
        before = out.rows
        out = out.gather(chosen)
        entries.append(
            TraceEntry(
                stage=1,
                stream=f"encoder:{spec.encoder_id}",
                position=b,
                criterion=criterion,
                scores_digest=digest(scores),
                kept=chosen.tolist(),
                count_before=before,
                count_after=out.rows,
                warnings=warnings,
                extra={"phase": schedule.phase_of(b), "kept_global": out.kept_global_indices.tolist()},
            )
        )
    return Stage1Result(out, entries, live)
