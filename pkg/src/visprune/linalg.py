"""Numerical kernels shared by every pruning stage.

Everything here is a pure function of its inputs and works in float64.
The SVD is a one-sided (Hestenes) Jacobi iteration with round-robin pair
ordering, so each sweep is ``n - 1`` vectorised rotation rounds.  Tall
inputs are first reduced to their triangular QR factor, which leaves the
singular values and right vectors unchanged and keeps the Jacobi sweeps
on an ``n x n`` block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidConfig, InvalidInput, InvalidK, NumericalError

ZERO_NORM = 1e-12
DEFAULT_REL_TOL = 1e-6

_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 60


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate ``a`` as a finite 2-D float64 array."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise InvalidInput(f"{name} must have at least one column")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInput(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


@dataclass(frozen=True)
class ScoredIndexList:
    """Selected indices ordered by (score desc, index asc)."""

    indices: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return zip(self.indices.tolist(), self.scores.tolist())

    def sorted_indices(self) -> np.ndarray:
        """Selected indices in ascending order (the gather order)."""
        return np.sort(self.indices)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle method: n even, n - 1 rounds of n / 2 disjoint pairs
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi(w: np.ndarray, want_v: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Orthogonalise the columns of square ``w`` in place; returns (W, V) with W = A V."""
    n = w.shape[1]
    size = n + (n % 2)
    if size != n:
        w = np.hstack([w, np.zeros((w.shape[0], 1))])
    v = np.eye(size) if want_v else None
    if size < 2:
        return w[:, :n], (v[:n, :n] if want_v else None)
    rounds = _round_robin(size)
    # columns below roundoff of the whole matrix are treated as converged
    floor = (_JACOBI_TOL * np.linalg.norm(w)) ** 2
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            wp = w[:, p]
            wq = w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = (np.abs(gamma) > _JACOBI_TOL * np.sqrt(alpha) * np.sqrt(beta)) & (alpha > floor) & (beta > floor)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            w[:, p] = c * wp - s * wq
            w[:, q] = s * wp + c * wq
            if want_v:
                vp = v[:, p]
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError("Jacobi SVD did not converge")
    w = w[:, :n]
    if want_v:
        v = v[:n, :n]
    return w, v


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not flagged in ``filled`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if filled[j]]
    cand = 0
    for j in range(u.shape[1]):
        if filled[j]:
            continue
        while True:
            e = np.zeros(m)
            e[cand % m] = 1.0
            cand += 1
            for b in basis:
                e -= (b @ e) * b
            for b in basis:
                e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                break
        e /= nrm
        u[:, j] = e
        basis.append(e)
    return u


def svd(a) -> SvdResult:
    """Thin SVD ``a = U diag(s) V^T`` with ``s`` sorted descending."""
    a = as_matrix(a)
    m, n = a.shape
    if m < 1:
        raise InvalidInput("svd needs at least one row")
    if m < n:
        r = svd(a.T)
        return SvdResult(r.singular_values, r.right_vectors, r.left_vectors)
    # work at unit scale so tiny or huge entries neither underflow nor overflow
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        scale = 1.0
    q, r = np.linalg.qr(a / scale, mode="reduced")
    w, v = _jacobi(r.copy(), want_v=True)
    sigma = np.linalg.norm(w, axis=0)
    order = np.lexsort((np.arange(n), -sigma))
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    # columns at roundoff level get an orthonormal completion instead of w / sigma
    filled = sigma > sigma[0] * 1e-14 if sigma[0] > 0 else np.zeros(n, dtype=bool)
    u_r = np.zeros((n, n))
    u_r[:, filled] = w[:, filled] / sigma[filled]
    u_r = _complete_basis(u_r, filled)
    return SvdResult(sigma * scale, q @ u_r, v)


def _jacobi_values(w: np.ndarray) -> np.ndarray:
    """Row norms of a stack of matrices after one-sided Jacobi on their rows.

    ``w`` has shape (n, m, batch) with the batch axis last, so the per-matrix
    rotation coefficients broadcast along contiguous memory.  Every matrix
    runs the same rotation schedule and a converged one only sees identity
    rotations, so batching moves a result by reduction-order rounding only.
    """
    n, m, b = w.shape
    size = n + (n % 2)
    if size != n:
        w = np.concatenate([w, np.zeros((1, m, b))], axis=0)
    if size >= 2:
        rounds = _round_robin(size)
        floor = (_JACOBI_TOL * np.sqrt(np.einsum("ijb,ijb->b", w, w))) ** 2
        # preallocated workspace: fresh temporaries of this size cost more in
        # page faults than the arithmetic itself
        wp, wq, t1, t2 = (np.empty((size // 2, m, b)) for _ in range(4))
        for _ in range(_JACOBI_MAX_SWEEPS):
            rotated = False
            for p, q in rounds:
                np.take(w, p, axis=0, out=wp)
                np.take(w, q, axis=0, out=wq)
                alpha = np.einsum("pjb,pjb->pb", wp, wp)
                beta = np.einsum("pjb,pjb->pb", wq, wq)
                gamma = np.einsum("pjb,pjb->pb", wp, wq)
                active = (np.abs(gamma) > _JACOBI_TOL * np.sqrt(alpha) * np.sqrt(beta)) & (alpha > floor) & (beta > floor)
                if not active.any():
                    continue
                rotated = True
                g = np.where(active, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                sign = np.where(zeta >= 0, 1.0, -1.0)
                t = sign / (np.abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = np.where(active, c * t, 0.0)[:, None, :]
                c = np.where(active, c, 1.0)[:, None, :]
                np.multiply(c, wp, out=t1)
                np.multiply(s, wq, out=t2)
                w[p] = np.subtract(t1, t2, out=t1)
                np.multiply(s, wp, out=t1)
                np.multiply(c, wq, out=t2)
                w[q] = np.add(t1, t2, out=t1)
            if not rotated:
                break
        else:
            raise NumericalError("Jacobi SVD did not converge")
    return np.sqrt(np.einsum("ijb,ijb->bi", w[:n], w[:n]))


def _norm_sorted_columns(a: np.ndarray) -> np.ndarray:
    norms = np.einsum("ij,ij->j", a, a)
    return a[:, np.lexsort((np.arange(a.shape[1]), -norms))]


def singular_values_batch(mats) -> list[np.ndarray]:
    """Singular values (descending) of each matrix; same-shape matrices share one Jacobi run."""
    mats = [as_matrix(a) for a in mats]
    out: list[np.ndarray | None] = [None] * len(mats)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, a in enumerate(mats):
        if a.shape[0] < a.shape[1]:
            mats[i] = a = a.T
        groups.setdefault(a.shape, []).append(i)
    for (m, n), idx in groups.items():
        if m == 0 or n == 0:
            for i in idx:
                out[i] = np.zeros(0)
            continue
        scales = np.array([float(np.max(np.abs(mats[i]))) for i in idx])
        live = [i for i, sc in zip(idx, scales) if sc > 0]
        for i in idx:
            out[i] = np.zeros(n)
        if not live:
            continue
        sc = scales[scales > 0]
        # columns in decreasing norm order before QR, then rotate the rows of R:
        # R R^T is closer to diagonal than R^T R, so fewer sweeps are needed
        r = np.stack([np.linalg.qr(_norm_sorted_columns(mats[i] / s_), mode="r") for i, s_ in zip(live, sc)])
        sigma = _jacobi_values(np.ascontiguousarray(r.transpose(1, 2, 0)))
        for j, i in enumerate(live):
            out[i] = np.sort(sigma[j])[::-1] * sc[j]
    return out


def singular_values(a) -> np.ndarray:
    return singular_values_batch([a])[0]


def numerical_rank(a, rel_tol: float = DEFAULT_REL_TOL) -> int:
    """Count singular values above ``rel_tol * sigma_max``."""
    return numerical_ranks([a], rel_tol)[0]


def numerical_ranks(mats, rel_tol: float = DEFAULT_REL_TOL) -> list[int]:
    """``numerical_rank`` of each matrix, batching the decompositions."""
    if not (0.0 < rel_tol < 1.0):
        raise InvalidConfig(f"rel_tol must lie in (0, 1), got {rel_tol}")
    ranks = []
    for s in singular_values_batch(mats):
        ranks.append(0 if s.size == 0 or s[0] == 0.0 else int(np.count_nonzero(s > rel_tol * s[0])))
    return ranks


def nuclear_norm(a) -> float:
    return math.fsum(singular_values(a).tolist())


def cosine_similarity(u, v) -> float:
    u = as_vector(u, "u")
    v = as_vector(v, "v")
    if u.shape != v.shape:
        raise InvalidInput(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < ZERO_NORM or nv < ZERO_NORM:
        return 0.0
    return float(np.clip((u @ v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarity of the rows of ``a`` and ``b``; zero-norm rows score 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise InvalidInput(f"dim mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    # divide rather than multiply by a reciprocal: a 1-D row then normalizes to exactly +-1
    ua = np.where(na[:, None] < ZERO_NORM, 0.0, a / np.where(na < ZERO_NORM, 1.0, na)[:, None])
    ub = np.where(nb[:, None] < ZERO_NORM, 0.0, b / np.where(nb < ZERO_NORM, 1.0, nb)[:, None])
    return np.clip(ua @ ub.T, -1.0, 1.0)


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise InvalidInput("softmax of an empty vector")
    return softmax_inplace(x.copy(), axis)


def softmax_inplace(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """``softmax`` that overwrites the float64 array ``x``; for callers that own their logits."""
    x -= np.max(x, axis=axis, keepdims=True)
    np.exp(x, out=x)
    x /= np.sum(x, axis=axis, keepdims=True)
    return x


def top_k_indices(scores, k: int) -> ScoredIndexList:
    """The ``k`` highest scores; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise InvalidInput("scores must be 1-D")
    if np.isnan(s).any():
        raise InvalidInput("scores contain NaN")
    k = int(k)
    if k < 0 or k > s.shape[0]:
        raise InvalidK(f"k={k} out of range for {s.shape[0]} scores")
    order = np.lexsort((np.arange(s.shape[0]), -s))[:k]
    return ScoredIndexList(order.astype(np.int64), s[order])


def shannon_entropy(p) -> float:
    """Entropy in nats, with 0 ln 0 = 0."""
    p = as_vector(p, "p")
    if (p < 0).any():
        raise InvalidInput("probabilities must be non-negative")
    if abs(math.fsum(p.tolist()) - 1.0) > 1e-9:
        raise InvalidInput("probabilities must sum to 1")
    nz = p[p > 0]
    return float(max(0.0, -math.fsum((nz * np.log(nz)).tolist())))


def kendall_tau(rank_a: Sequence[int], rank_b: Sequence[int]) -> float:
    """Kendall tau between two orderings of the same item set."""
    a = list(rank_a)
    b = list(rank_b)
    if len(a) != len(b) or len(set(a)) != len(a) or set(a) != set(b):
        raise InvalidInput("kendall_tau needs two permutations of the same items")
    n = len(a)
    if n < 2:
        return 1.0
    pos_b = {item: i for i, item in enumerate(b)}
    s = np.array([pos_b[item] for item in a])
    iu = np.triu_indices(n, k=1)
    signs = np.sign(s[iu[1]] - s[iu[0]])
    concordant = int(np.count_nonzero(signs > 0))
    discordant = int(np.count_nonzero(signs < 0))
    return (concordant - discordant) / (n * (n - 1) / 2)
