"""Analysis quantities: attention entropy, top-k stability, rank stability
and visual-attention-value summaries."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .encoder import EncoderState, image_tokens, run_encoder
from .errors import InvalidInput
from .linalg import kendall_tau, shannon_entropy
from .rank_probe import batch_block_ranks
from .stage1 import cls_attention_scores
from .stage3 import CrossAttentionSnapshot, select_heads, visual_attention_value


def cls_attention_per_block(state: EncoderState, tokens: np.ndarray) -> list[np.ndarray]:
    """Head-averaged cls attention over visual tokens at every block (no pruning)."""
    return [
        cls_attention_scores(o.cls_query, o.keys, state.spec.head_dim)
        for o in run_encoder(state, tokens)
    ]


def attention_entropy_profile(attention: Sequence[np.ndarray]) -> np.ndarray:
    """Shannon entropy (nats) of each block's attention distribution."""
    return np.array([shannon_entropy(np.asarray(p, dtype=np.float64)) for p in attention])


def union_ranking(scores: np.ndarray, top: set[int], union: Sequence[int]) -> list[int]:
    """Order ``union`` with members of ``top`` first, each group by score
    descending and then index ascending."""
    return sorted(union, key=lambda i: (i not in top, -scores[i], i))


def topk_tau(scores_a, scores_b, k: int) -> float:
    """Kendall tau between the top-k orderings of two score vectors over the same tokens.

    When the top-k sets differ, both orderings are taken over their union,
    with tokens outside a block's own top-k ranked after those inside it.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInput("score vectors must be 1-D with equal length")
    k = min(int(k), a.shape[0])
    if k < 1:
        raise InvalidInput("k must be >= 1")
    top_a = set(np.lexsort((np.arange(a.size), -a))[:k].tolist())
    top_b = set(np.lexsort((np.arange(b.size), -b))[:k].tolist())
    union = sorted(top_a | top_b)
    return kendall_tau(union_ranking(a, top_a, union), union_ranking(b, top_b, union))


def topk_stability_profile(attention: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Top-k tau between every pair of adjacent blocks."""
    if len(attention) < 2:
        raise InvalidInput("need at least two blocks")
    return np.array([topk_tau(attention[i], attention[i + 1], k) for i in range(len(attention) - 1)])


def encoder_diagnostics(state: EncoderState, token_sets: Sequence[np.ndarray], k: int) -> dict:
    """Entropy and top-k tau per block, averaged over the given inputs."""
    ent, tau = [], []
    for tokens in token_sets:
        att = cls_attention_per_block(state, tokens)
        ent.append(attention_entropy_profile(att))
        tau.append(topk_stability_profile(att, k))
    n = min(np.asarray(t).shape[0] for t in token_sets)
    return {
        "entropy": np.mean(ent, axis=0).tolist(),
        "entropy_max": float(np.log(n)),
        "topk_tau": np.mean(tau, axis=0).tolist(),
        "topk": min(k, n),
        "inputs": len(token_sets),
    }


@dataclass(frozen=True)
class RankStability:
    encoder_id: str
    batch_means: np.ndarray  # (batches, blocks)
    batch_stds: np.ndarray

    @property
    def mean_range(self) -> np.ndarray:
        return self.batch_means.max(axis=0) - self.batch_means.min(axis=0)

    def to_dict(self) -> dict:
        return {
            "batch_means": self.batch_means.tolist(),
            "batch_stds": self.batch_stds.tolist(),
            "mean_range": self.mean_range.tolist(),
        }


def rank_stability(
    state: EncoderState, batches: Sequence[Sequence[int]], rel_tol: float = 1e-6
) -> RankStability:
    """Per-block mean and std of feature rank for each batch of image seeds."""
    means, stds = [], []
    for batch in batches:
        tokens = [image_tokens(state.spec, s, state.run_seed) for s in batch]
        ranks = batch_block_ranks(state, tokens, rel_tol).astype(float)
        means.append(ranks.mean(axis=0))
        stds.append(ranks.std(axis=0))
    return RankStability(state.spec.encoder_id, np.array(means), np.array(stds))


def selected_vav_sum(snapshot: CrossAttentionSnapshot, k_heads: int) -> float:
    vav = visual_attention_value(snapshot)
    return float(sum(vav[h] for h in select_heads(vav, k_heads)))


def vav_distribution(
    families: Mapping[str, Sequence[CrossAttentionSnapshot]], k_heads: int
) -> dict[str, dict]:
    """Mean, min and max of the selected-head VAV sum for each family of snapshots."""
    out = {}
    for label, snaps in families.items():
        if not snaps:
            raise InvalidInput(f"family {label!r} has no snapshots")
        sums = np.array([selected_vav_sum(s, k_heads) for s in snaps])
        out[label] = {
            "count": int(sums.size),
            "mean": float(sums.mean()),
            "min": float(sums.min()),
            "max": float(sums.max()),
        }
    return out


def diagnostics_csv(diag: Mapping[str, Mapping]) -> str:
    """Long-format CSV: encoder, block, entropy, tau to the next block."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["encoder", "block", "entropy", "topk_tau_next"])
    for eid, d in diag.items():
        taus = list(d["topk_tau"]) + [""]
        for b, (e, t) in enumerate(zip(d["entropy"], taus)):
            w.writerow([eid, b, format(e, ".17g"), t if t == "" else format(t, ".17g")])
    return buf.getvalue()
