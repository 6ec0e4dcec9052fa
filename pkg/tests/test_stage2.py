import numpy as np
import pytest

from oracles import cooperative_oracle, exhaustive_best_subset, mutual_redundancy_oracle
from visprune.errors import InvalidInput, InvalidK
from visprune.linalg import nuclear_norm
from visprune.seeding import digest
from visprune.stage2 import (
    FusedTokens,
    ProjectorSpec,
    build_projector,
    cooperative_prune,
    diversity_comparison,
    diversity_report,
    fuse,
    mutual_redundancy,
    overlap_instance,
    random_prune,
    separate_prune,
    within_redundancy,
)


def two_encoder_example():
    return fuse([("A", np.array([[1.0, 0.0]]), [0]), ("B", np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1])])


def random_fused(rng, n_enc=None, max_rows=24, d=None):
    n_enc = n_enc or int(rng.integers(1, 5))
    d = d or int(rng.integers(2, 17))
    parts = []
    left = max_rows
    for e in range(n_enc):
        n = int(rng.integers(0, max(1, left // (n_enc - e)) + 1))
        left -= n
        parts.append((f"e{e}", rng.standard_normal((n, d)), range(n)))
    return fuse(parts)


# ---- projector -----------------------------------------------------------


def test_projector_shapes_and_determinism():
    p = build_projector(ProjectorSpec("clip", 8, 16, 6, seed=3))
    assert p.project(np.zeros((0, 8))).shape == (0, 6)
    x = np.random.default_rng(0).standard_normal((4, 8))
    assert np.array_equal(p.project(x), build_projector(ProjectorSpec("clip", 8, 16, 6, seed=3)).project(x))


def test_projector_golden_checksum():
    p = build_projector(ProjectorSpec("clip", 8, 16, 6, seed=3))
    x = np.arange(24, dtype=float).reshape(3, 8) / 10
    assert digest(p.w1, p.w2) == "7593787e33154e13"
    assert digest(p.project(x)) == "8f7b66b33690b2e2"


def test_projector_dim_mismatch():
    p = build_projector(ProjectorSpec("clip", 8, 16, 6))
    with pytest.raises(InvalidInput):
        p.project(np.zeros((2, 7)))


# ---- fusion --------------------------------------------------------------


def test_fuse_concatenates_with_origin():
    f = fuse([("a", np.ones((2, 3)), [4, 9]), ("b", np.zeros((1, 3)), [0])])
    assert f.rows == 3
    assert f.origin == (("a", 4), ("a", 9), ("b", 0))


def test_fuse_rejects_mismatched_dims_and_duplicates():
    with pytest.raises(InvalidInput):
        fuse([("a", np.ones((1, 3)), [0]), ("b", np.ones((1, 2)), [0])])
    with pytest.raises(InvalidInput):
        FusedTokens(np.ones((2, 2)), (("a", 0), ("a", 0)))


# ---- mutual redundancy ---------------------------------------------------


def test_single_encoder_scores_zero():
    f = fuse([("only", np.random.default_rng(1).standard_normal((5, 4)), range(5))])
    assert np.all(mutual_redundancy(f) == 0)


def test_hand_computed_redundancy():
    np.testing.assert_allclose(mutual_redundancy(two_encoder_example()), [1.0, 1.0, 0.0], atol=1e-15)


def test_duplicated_encoder_scores_at_least_one():
    # non-negative features keep every cross similarity >= 0, so the
    # duplicate's similarity of 1 is a lower bound
    x = np.abs(np.random.default_rng(2).standard_normal((6, 5)))
    f = fuse([("a", x, range(6)), ("b", x.copy(), range(6))])
    assert np.all(mutual_redundancy(f) >= 1 - 1e-12)


def test_redundancy_matches_oracle_and_excludes_own_encoder():
    rng = np.random.default_rng(3)
    for _ in range(100):
        f = random_fused(rng)
        labels = [o[0] for o in f.origin]
        np.testing.assert_allclose(mutual_redundancy(f), mutual_redundancy_oracle(f.features, labels), atol=1e-12)


def test_two_encoder_symmetry():
    rng = np.random.default_rng(4)
    for _ in range(50):
        f = random_fused(rng, n_enc=2)
        labels = np.array([o[0] for o in f.origin])
        r = mutual_redundancy(f)
        a, b = r[labels == "e0"].sum(), r[labels == "e1"].sum()
        assert a == pytest.approx(b, abs=1e-9)


# ---- cooperative pruning -------------------------------------------------


def test_cooperative_keep_all_is_identity():
    f = two_encoder_example()
    kept, entry = cooperative_prune(f, 3)
    assert kept.origin == f.origin and entry.kept == [0, 1, 2]


def test_cooperative_hand_selection():
    kept, _ = cooperative_prune(two_encoder_example(), 2)
    assert kept.origin == (("A", 0), ("B", 1))


def test_cooperative_k_too_large():
    with pytest.raises(InvalidK):
        cooperative_prune(two_encoder_example(), 4)


def test_cooperative_matches_sort_oracle_up_to_24_rows():
    rng = np.random.default_rng(5)
    for _ in range(300):
        f = random_fused(rng)
        k = int(rng.integers(0, f.rows + 1))
        kept, entry = cooperative_prune(f, k)
        labels = [o[0] for o in f.origin]
        assert entry.kept == sorted(cooperative_oracle(f.features, labels, k))


def test_cooperative_matches_exhaustive_subset_search():
    rng = np.random.default_rng(6)
    for _ in range(150):
        f = random_fused(rng, max_rows=12)
        k = int(rng.integers(0, f.rows + 1))
        r = mutual_redundancy_oracle(f.features, [o[0] for o in f.origin])
        best = exhaustive_best_subset([-x for x in r], k)
        assert cooperative_prune(f, k)[1].kept == list(best)


def test_iterative_variant_keeps_k_rows():
    f = random_fused(np.random.default_rng(7), n_enc=3)
    kept, entry = cooperative_prune(f, f.rows // 2, iterative=True)
    assert kept.rows == f.rows // 2 and entry.criterion.endswith("iterative")


# ---- baselines and diversity ---------------------------------------------


def test_random_prune_is_seeded():
    f = random_fused(np.random.default_rng(8), n_enc=3)
    assert random_prune(f, 5, 1).origin == random_prune(f, 5, 1).origin


def test_separate_prune_only_uses_within_encoder_scores():
    f = overlap_instance(0)
    kept = separate_prune(f, 12)
    assert kept.rows == 12
    counts = {e: sum(1 for o in kept.origin if o[0] == e) for e in ("enc0", "enc1", "enc2")}
    assert counts == {"enc0": 4, "enc1": 4, "enc2": 4}
    assert within_redundancy(fuse([("x", np.eye(3), range(3))])).tolist() == [0, 0, 0]


def test_diversity_report_entries():
    f = overlap_instance(1)
    zero = FusedTokens(np.zeros((3, f.features.shape[1])), (("z", 0), ("z", 1), ("z", 2)))
    rep = diversity_report(f, {"same": f, "zero": zero})
    assert rep["same"]["nuclear_norm"] == rep["unpruned"]["nuclear_norm"] == nuclear_norm(f.features)
    assert rep["zero"] == {"nuclear_norm": 0.0, "retained": 3}
    with pytest.raises(InvalidInput):
        diversity_report(f, {})


def test_cooperative_beats_random_on_overlap_family():
    wins = sum(
        d["cooperative"]["nuclear_norm"] >= d["random"]["nuclear_norm"]
        for d in (diversity_comparison(overlap_instance(s), 12, s) for s in range(60))
    )
    assert wins >= 0.95 * 60
