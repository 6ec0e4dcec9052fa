import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_top_k, eig_nuclear, gauss_pivot_rank, kendall_pairs, mp_softmax
from visprune.errors import InvalidConfig, InvalidInput, InvalidK
from visprune.linalg import (
    cosine_similarity,
    kendall_tau,
    nuclear_norm,
    numerical_rank,
    numerical_ranks,
    shannon_entropy,
    singular_values,
    singular_values_batch,
    softmax,
    svd,
    top_k_indices,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def small_matrices(max_side=12):
    shape = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


# ---- svd -----------------------------------------------------------------


def test_svd_zero_matrix():
    assert np.all(svd(np.zeros((3, 3))).singular_values == 0)


def test_svd_identity():
    np.testing.assert_allclose(svd(np.eye(4)).singular_values, np.ones(4), atol=1e-14)


def test_svd_rank_one_outer_product():
    rng = np.random.default_rng(1)
    u = rng.standard_normal(5)
    v = rng.standard_normal(4)
    u *= 2 / np.linalg.norm(u)
    v *= 3 / np.linalg.norm(v)
    s = svd(np.outer(u, v)).singular_values
    assert s[0] == pytest.approx(6.0, abs=1e-12)
    assert np.all(np.abs(s[1:]) < 1e-12)


def test_svd_rejects_non_finite():
    with pytest.raises(InvalidInput):
        svd(np.array([[1.0, np.nan]]))


def test_svd_reconstruction_500_random_matrices():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(500):
        m, n = rng.integers(1, 33, size=2)
        a = rng.standard_normal((m, n)) * rng.uniform(0.01, 100)
        r = svd(a)
        err = np.linalg.norm(r.reconstruct() - a) / max(1.0, np.linalg.norm(a))
        worst = max(worst, err)
        s = r.singular_values
        assert np.all(s >= 0) and np.all(np.diff(s) <= 0)
    assert worst <= 1e-8


@given(small_matrices())
def test_svd_factors_orthonormal(a):
    r = svd(a)
    k = r.singular_values.size
    np.testing.assert_allclose(r.left_vectors.T @ r.left_vectors, np.eye(k), atol=1e-9)
    np.testing.assert_allclose(r.right_vectors.T @ r.right_vectors, np.eye(k), atol=1e-9)
    assert np.linalg.norm(r.reconstruct() - a) <= 1e-8 * max(1.0, np.linalg.norm(a))


# ---- rank ----------------------------------------------------------------


def test_rank_zero_matrix():
    assert numerical_rank(np.zeros((4, 5))) == 0


def test_rank_outer_product():
    assert numerical_rank(np.outer(np.arange(1, 5), np.arange(2, 7))) == 1


def test_rank_three_outer_products_matches_elimination():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = sum(np.outer(rng.standard_normal(8), rng.standard_normal(8)) for _ in range(3))
        assert numerical_rank(a, 1e-6) == gauss_pivot_rank(a, 1e-6) == 3


@pytest.mark.parametrize("tol", [0.0, 1.0, -1e-3, 2.0])
def test_rank_rejects_bad_tolerance(tol):
    with pytest.raises(InvalidConfig):
        numerical_rank(np.eye(2), tol)


def test_rank_invariant_under_row_permutation_and_rotation():
    rng = np.random.default_rng(4)
    for r in range(1, 7):
        a = rng.standard_normal((12, r)) @ rng.standard_normal((r, 9))
        q, _ = np.linalg.qr(rng.standard_normal((9, 9)))
        base = numerical_rank(a)
        assert base == r
        assert numerical_rank(a[rng.permutation(12)]) == base
        assert numerical_rank(a @ q) == base


def test_batched_values_match_single_matrix_runs():
    rng = np.random.default_rng(7)
    mats = [rng.standard_normal((20, 7)) for _ in range(12)]
    mats += [np.zeros((20, 7)), rng.standard_normal((7, 20)), rng.standard_normal((5, 5)), np.zeros((0, 3))]
    for got, a in zip(singular_values_batch(mats), mats):
        want = singular_values(a)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-13 * max(1.0, float(np.abs(a).max(initial=0))))
        np.testing.assert_allclose(got, np.linalg.svd(a, compute_uv=False), rtol=0, atol=1e-12)


def test_batched_ranks_match_constructed_ranks():
    rng = np.random.default_rng(8)
    mats = [rng.standard_normal((16, r)) @ rng.standard_normal((r, 10)) for r in range(0, 11)]
    assert numerical_ranks(mats) == list(range(0, 11))
    assert numerical_ranks(mats) == [numerical_rank(a) for a in mats]


# ---- nuclear norm --------------------------------------------------------


def test_nuclear_identity_and_diag():
    assert nuclear_norm(np.eye(5)) == pytest.approx(5.0, abs=1e-13)
    assert nuclear_norm(np.diag([3.0, 4.0])) == pytest.approx(7.0, abs=1e-13)
    assert nuclear_norm(np.zeros((3, 2))) == 0.0


def test_nuclear_matches_eigenvalue_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = rng.standard_normal((5, 3))
        assert abs(nuclear_norm(a) - eig_nuclear(a)) <= 1e-8


@given(small_matrices(8))
def test_nuclear_bounds(a):
    s = singular_values(a)
    nn = nuclear_norm(a)
    nonzero = int(np.count_nonzero(s > 0))
    assert nn >= s[0] * (1 - 1e-12)
    assert nn <= max(nonzero, 1) * s[0] * (1 + 1e-12)


# ---- cosine --------------------------------------------------------------


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 2], [3, 4]) == pytest.approx(11 / (math.sqrt(5) * 5), abs=1e-15)


def test_cosine_zero_norm_and_mismatch():
    assert cosine_similarity([0, 0], [1, 1]) == 0.0
    assert cosine_similarity([1e-13, 0], [1, 1]) == 0.0
    with pytest.raises(InvalidInput):
        cosine_similarity([1, 2], [1, 2, 3])


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_cosine_range(u, v):
    assert -1.0 <= cosine_similarity(u, v) <= 1.0


# ---- softmax -------------------------------------------------------------


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.full(7, 2.5)), np.full(7, 1 / 7), atol=1e-15)
    np.testing.assert_allclose(softmax([0.0, math.log(3)]), [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_against_high_precision():
    p = softmax([1000.0, 1000.0, 999.0])
    assert np.all(np.isfinite(p))
    ref = [float(x) for x in mp_softmax([1000.0, 1000.0, 999.0])]
    np.testing.assert_allclose(p, ref, rtol=1e-14)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-500, 500)), st.floats(-1e3, 1e3))
def test_softmax_sums_to_one_and_is_shift_invariant(x, c):
    p = softmax(x)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12
    assert np.max(np.abs(softmax(x + c) - p)) <= 1e-12


# ---- top-k ---------------------------------------------------------------


def test_top_k_examples():
    assert top_k_indices([0.1, 0.9, 0.5], 2).indices.tolist() == [1, 2]
    assert top_k_indices([1.0] * 5, 3).indices.tolist() == [0, 1, 2]
    with pytest.raises(InvalidK):
        top_k_indices([1.0, 2.0], 3)


def test_top_k_against_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        scores = rng.standard_normal(n)
        if rng.random() < 0.3:
            scores = np.round(scores, 1)  # force ties
        k = int(rng.integers(0, n + 1))
        assert top_k_indices(scores, k).indices.tolist() == brute_top_k(scores, k)


@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.data())
def test_top_k_deterministic_and_partitions(scores, data):
    k = data.draw(st.integers(0, scores.size))
    a = top_k_indices(scores, k)
    b = top_k_indices(scores.copy(), k)
    assert a.indices.tolist() == b.indices.tolist()
    chosen = set(a.indices.tolist())
    assert len(chosen) == k
    rest = set(range(scores.size)) - chosen
    assert chosen | rest == set(range(scores.size))
    pairs = list(a)
    assert pairs == sorted(pairs, key=lambda p: (-p[1], p[0]))


# ---- entropy -------------------------------------------------------------


def test_entropy_examples():
    assert shannon_entropy([0, 1, 0]) == 0.0
    assert shannon_entropy(np.full(8, 1 / 8)) == pytest.approx(math.log(8), abs=1e-14)
    assert shannon_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-15)


@pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [0.2, 0.2]])
def test_entropy_rejects_invalid(p):
    with pytest.raises(InvalidInput):
        shannon_entropy(p)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(0, 10)))
def test_entropy_bounds(w):
    if w.sum() <= 0:
        return
    p = w / w.sum()
    h = shannon_entropy(p)
    assert 0 <= h <= math.log(p.size) + 1e-12


# ---- kendall tau ---------------------------------------------------------


def test_kendall_examples():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6)


def test_kendall_rejects_non_permutations():
    with pytest.raises(InvalidInput):
        kendall_tau([1, 2, 3], [1, 2, 4])
    with pytest.raises(InvalidInput):
        kendall_tau([1, 1, 2], [1, 2, 1])


def test_kendall_exhaustive_up_to_eight():
    for n in range(2, 9):
        items = list(range(n))
        perms = list(itertools.permutations(items))
        for p in perms:
            p = list(p)
            assert kendall_tau(p, p) == 1.0
            assert kendall_tau(p, p[::-1]) == -1.0
        # every permutation against a fixed reference, compared with pair enumeration
        for p in perms if n <= 6 else perms[:: max(1, len(perms) // 2000)]:
            assert kendall_tau(items, list(p)) == pytest.approx(kendall_pairs(items, list(p)), abs=1e-15)
