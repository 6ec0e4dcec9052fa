import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from visprune.encoder import EncoderSpec, build_encoder, image_tokens
from visprune.errors import DegenerateRanks, InvalidConfig
from visprune.rank_probe import RankProfile, allocate_budget, apportion, probe_ranks

weights = st.lists(st.floats(0.0, 1000.0, allow_nan=False), min_size=1, max_size=8)


def enc(eid, rank=None, dim=16, tokens=24, seed=1):
    return build_encoder(
        EncoderSpec(eid, num_blocks=3, num_heads=2, token_count=tokens, dim=dim, seed=seed, synthetic_rank=rank)
    )


# ---- apportionment -------------------------------------------------------


def test_exact_proportional_split():
    assert apportion([100, 50, 25, 25], 576) == [288, 144, 72, 72]


def test_largest_remainder_tie_goes_to_lower_index():
    assert apportion([1, 1, 1], 10) == [4, 3, 3]


def test_floor_rule_raises_tiny_share():
    assert apportion([5, 0.0001, 5], 9, min_each=1)[1] == 1
    assert sum(apportion([5, 0.0001, 5], 9, min_each=1)) == 9


def test_all_zero_ranks():
    with pytest.raises(DegenerateRanks):
        apportion([0.0, 0.0], 4)


def test_infeasible_total():
    with pytest.raises(InvalidConfig):
        apportion([1, 1, 1], 2, min_each=1)


def test_caps_pin_and_redistribute():
    assert apportion([10, 1, 1], 12, caps=[4, 100, 100]) == [4, 4, 4]


@given(weights, st.integers(0, 5000), st.integers(0, 3))
def test_conservation_and_floor(w, total, min_each):
    assume(sum(w) > 0 and total >= len(w) * min_each)
    a = apportion(w, total, min_each)
    assert sum(a) == total
    assert all(x >= min_each for x in a)


@given(weights, st.integers(0, 5000), st.integers(0, 2))
def test_monotone_in_weight(w, total, min_each):
    assume(sum(w) > 0 and total >= len(w) * min_each)
    a = apportion(w, total, min_each)
    for i in range(len(w)):
        for j in range(len(w)):
            if w[i] > w[j]:
                assert a[i] >= a[j]


@given(weights, st.integers(1, 5000), st.sampled_from([0.5, 2.0, 3.0, 10.0, 1e-3]))
def test_scale_invariant(w, total, c):
    assume(sum(w) > 0 and total >= len(w))
    assert apportion(w, total) == apportion([x * c for x in w], total)


# ---- probing -------------------------------------------------------------


def test_synthetic_rank_profile_is_capped_and_stable():
    prof = probe_ranks([enc("a", rank=4)], list(range(8)))
    assert np.all(prof.mean["a"] <= 4)
    assert np.all(prof.std["a"] == 0)


def test_higher_rank_encoder_probes_higher():
    prof = probe_ranks([enc("r4", rank=4), enc("r8", rank=8, seed=2)], list(range(8)))
    assert np.all(prof.mean["r8"] >= prof.mean["r4"])


def test_batch_of_one_has_zero_std():
    prof = probe_ranks([enc("a"), enc("b", dim=8, seed=3)], [0])
    assert all(np.all(s == 0) for s in prof.std.values())


def test_profile_accepts_external_tokens():
    e = enc("a")
    tok = image_tokens(e.spec, 4)
    assert probe_ranks([e], [{"a": tok}]).mean["a"].tolist() == probe_ranks([e], [4]).mean["a"].tolist()


def test_profile_bounds_and_round_trip():
    prof = probe_ranks([enc("a", tokens=10), enc("b", dim=8, seed=3)], [0, 1])
    assert np.all(prof.mean["a"] <= 10) and np.all(prof.mean["b"] <= 8)
    again = RankProfile.from_dict(prof.to_dict())
    assert again.to_dict() == prof.to_dict()


def test_probe_rejects_empty_batch():
    with pytest.raises(InvalidConfig):
        probe_ranks([enc("a")], [])


# ---- budget plans ------------------------------------------------------------


def test_allocate_budget_uses_rank_at_prune_block():
    prof = RankProfile(
        mean={"a": np.array([1.0, 100.0, 1.0]), "b": np.array([1.0, 50.0, 1.0])},
        std={"a": np.zeros(3), "b": np.zeros(3)},
        batch_size=1,
    )
    plan = allocate_budget(prof, [{"a": 1, "b": 1}], [150])
    assert plan.per_point_per_encoder == [{"a": 100, "b": 50}]


def test_budgets_never_grow_along_an_encoder():
    rng = np.random.default_rng(7)
    for _ in range(200):
        ids = ["a", "b", "c"]
        means = {e: rng.uniform(0.1, 50, size=4) for e in ids}
        prof = RankProfile(means, {e: np.zeros(4) for e in ids}, 1)
        counts = {e: int(rng.integers(20, 60)) for e in ids}
        full = sum(counts.values())
        t1 = int(rng.integers(3, full + 1))
        t2 = int(rng.integers(3, t1 + 1))
        t3 = int(rng.integers(3, t2 + 1))
        pts = [{e: i for e in ids} for i in (0, 2, 3)]
        plan = allocate_budget(prof, pts, [t1, t2, t3], 1, counts)
        for e in ids:
            b = plan.budgets_for(e)
            assert b[0] <= counts[e]
            assert all(x >= y for x, y in zip(b, b[1:]))
            assert min(b) >= 1
        assert [sum(p.values()) for p in plan.per_point_per_encoder] == [t1, t2, t3]
