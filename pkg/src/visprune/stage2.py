"""Post-projection fusion and cooperative cross-encoder pruning."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidInput, InvalidK
from .linalg import cosine_matrix, nuclear_norm, top_k_indices
from .nn import gelu
from .rank_probe import apportion
from .seeding import digest, stream
from .trace import TraceEntry


@dataclass(frozen=True)
class ProjectorSpec:
    encoder_id: str
    in_dim: int
    hidden_dim: int
    out_dim: int
    seed: int = 0

    def validate(self) -> None:
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise InvalidConfig(f"{self.encoder_id}: projector dims must be positive")


@dataclass(frozen=True)
class Projector:
    spec: ProjectorSpec
    w1: np.ndarray
    w2: np.ndarray

    def project(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise InvalidInput(
                f"{self.spec.encoder_id}: projector expects (n, {self.spec.in_dim}), got {x.shape}"
            )
        return gelu(x @ self.w1) @ self.w2


def build_projector(spec: ProjectorSpec, run_seed: int = 0) -> Projector:
    spec.validate()
    w1 = stream(run_seed, spec.seed, "proj_w1").standard_normal((spec.in_dim, spec.hidden_dim))
    w2 = stream(run_seed, spec.seed, "proj_w2").standard_normal((spec.hidden_dim, spec.out_dim))
    return Projector(spec, w1 / np.sqrt(spec.in_dim), w2 / np.sqrt(spec.hidden_dim))


def project(projector: Projector, features) -> np.ndarray:
    return projector.project(features)


@dataclass(frozen=True)
class FusedTokens:
    """Token-axis concatenation of projected tokens; ``origin[i]`` = (encoder id, token index)."""

    features: np.ndarray
    origin: tuple[tuple[str, int], ...]

    def __post_init__(self):
        if self.features.shape[0] != len(self.origin):
            raise InvalidInput("one origin per fused row is required")
        if len(set(self.origin)) != len(self.origin):
            raise InvalidInput("fused origins must be unique")

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    @property
    def encoder_labels(self) -> np.ndarray:
        return np.array([o[0] for o in self.origin], dtype=object)

    def gather(self, rows) -> "FusedTokens":
        rows = np.asarray(rows, dtype=np.int64)
        return FusedTokens(self.features[rows], tuple(self.origin[i] for i in rows))


def fuse(parts: Sequence[tuple[str, np.ndarray, Sequence[int]]]) -> FusedTokens:
    """Concatenate ``(encoder_id, projected features, original token indices)`` parts in order."""
    if not parts:
        raise InvalidInput("nothing to fuse")
    dims = {np.asarray(p[1]).shape[1] for p in parts}
    if len(dims) != 1:
        raise InvalidInput(f"projected dims differ across encoders: {sorted(dims)}")
    feats = np.vstack([np.asarray(p[1], dtype=np.float64) for p in parts])
    origin = tuple((eid, int(i)) for eid, _, idx in parts for i in idx)
    return FusedTokens(feats, origin)


def _same_encoder(fused: FusedTokens) -> np.ndarray:
    labels = fused.encoder_labels
    return labels[:, None] == labels[None, :]


def mutual_redundancy(fused: FusedTokens) -> np.ndarray:
    """Sum of cosine similarities from each token to every token of the *other* encoders."""
    if fused.rows == 0:
        return np.zeros(0)
    sim = cosine_matrix(fused.features, fused.features)
    sim[_same_encoder(fused)] = 0.0
    return sim.sum(axis=1)


def within_redundancy(fused: FusedTokens) -> np.ndarray:
    """Sum of cosine similarities to the other tokens of the same encoder."""
    if fused.rows == 0:
        return np.zeros(0)
    sim = cosine_matrix(fused.features, fused.features)
    sim[~_same_encoder(fused)] = 0.0
    np.fill_diagonal(sim, 0.0)
    return sim.sum(axis=1)


def _check_k(fused: FusedTokens, k: int) -> int:
    k = int(k)
    if k < 0 or k > fused.rows:
        raise InvalidK(f"k={k} out of range for {fused.rows} fused tokens")
    return k


def cooperative_prune(
    fused: FusedTokens, k: int, iterative: bool = False
) -> tuple[FusedTokens, TraceEntry]:
    """Keep the ``k`` tokens with the lowest mutual redundancy (ties: lower row).

    ``iterative=True`` instead removes the most redundant token one at a
    time, rescoring the survivors after each removal.
    """
    k = _check_k(fused, k)
    scores = mutual_redundancy(fused)
    if iterative:
        alive = np.arange(fused.rows)
        while alive.size > k:
            r = mutual_redundancy(fused.gather(alive))
            drop = top_k_indices(r, 1).indices[0]
            alive = np.delete(alive, drop)
        chosen = alive
    else:
        chosen = top_k_indices(-scores, k).sorted_indices()
    kept = fused.gather(chosen)
    entry = TraceEntry(
        stage=2,
        stream="fused",
        position=0,
        criterion="mutual_redundancy_iterative" if iterative else "mutual_redundancy",
        scores_digest=digest(scores),
        kept=chosen.tolist(),
        count_before=fused.rows,
        count_after=kept.rows,
        extra={"kept_origin": [[e, i] for e, i in kept.origin]},
    )
    return kept, entry


def random_prune(fused: FusedTokens, k: int, seed: int) -> FusedTokens:
    k = _check_k(fused, k)
    rows = stream(seed, "random_prune").choice(fused.rows, size=k, replace=False)
    return fused.gather(np.sort(rows))


def separate_prune(fused: FusedTokens, k: int) -> FusedTokens:
    """Prune inside each encoder only: quota proportional to its token count,
    dropping the tokens most redundant with their own encoder."""
    k = _check_k(fused, k)
    labels = fused.encoder_labels
    ids = list(dict.fromkeys(labels.tolist()))
    counts = [int(np.count_nonzero(labels == e)) for e in ids]
    quotas = apportion(counts, k, min_each=0, caps=counts)
    scores = -within_redundancy(fused)
    keep = []
    for eid, q in zip(ids, quotas):
        rows = np.flatnonzero(labels == eid)
        keep.extend(rows[top_k_indices(scores[rows], q).indices].tolist())
    return fused.gather(np.sort(np.array(keep, dtype=np.int64)))


def diversity_report(before: FusedTokens, after_variants: Mapping[str, FusedTokens]) -> dict:
    """Nuclear norm and size of the unpruned set and every labelled variant."""
    if not after_variants:
        raise InvalidInput("at least one variant is required")
    table = {"unpruned": _diversity(before)}
    for label, variant in after_variants.items():
        table[label] = _diversity(variant)
    return table


def _diversity(f: FusedTokens) -> dict:
    nn = nuclear_norm(f.features) if f.rows else 0.0
    return {"nuclear_norm": nn, "retained": f.rows}


def diversity_comparison(fused: FusedTokens, k: int, seed: int = 0) -> dict:
    """Cooperative vs random vs separate pruning to ``k`` tokens."""
    coop, _ = cooperative_prune(fused, k)
    return diversity_report(
        fused,
        {
            "cooperative": coop,
            "random": random_prune(fused, k, seed),
            "separate": separate_prune(fused, k),
        },
    )


def overlap_instance(
    seed: int,
    n_encoders: int = 3,
    unique_per_encoder: int = 4,
    shared: int = 4,
    dim: int = 64,
    noise: float = 0.05,
) -> FusedTokens:
    """Fusion instance where every encoder carries a noisy copy of one shared token pool."""
    rng = stream(seed, "overlap_instance")
    pool = rng.standard_normal((shared, dim))
    parts = []
    for e in range(n_encoders):
        own = rng.standard_normal((unique_per_encoder, dim))
        dup = pool + noise * rng.standard_normal((shared, dim))
        feats = np.vstack([own, dup])
        parts.append((f"enc{e}", feats, range(feats.shape[0])))
    return fuse(parts)

