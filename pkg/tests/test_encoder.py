import numpy as np
import pytest

from visprune.encoder import (
    EncoderSpec,
    build_encoder,
    forward_block,
    image_tokens,
    initial_output,
    run_encoder,
)
from visprune.errors import InvalidConfig
from visprune.linalg import numerical_rank


def spec(**kw):
    base = dict(encoder_id="e", num_blocks=3, num_heads=2, token_count=10, dim=16, seed=5)
    base.update(kw)
    return EncoderSpec(**base)


def test_same_spec_gives_identical_weights():
    assert build_encoder(spec()).checksum() == build_encoder(spec()).checksum()


def test_seed_changes_weights():
    assert build_encoder(spec(seed=1)).checksum() != build_encoder(spec(seed=2)).checksum()


def test_run_seed_changes_weights():
    assert build_encoder(spec(), run_seed=0).checksum() != build_encoder(spec(), run_seed=1).checksum()


def test_synthetic_rank_caps_every_block():
    s = spec(synthetic_rank=4, token_count=40)
    state = build_encoder(s)
    for seed in range(3):
        outs = run_encoder(state, image_tokens(s, seed))
        assert all(numerical_rank(o.features) <= 4 for o in outs)


def test_unconstrained_encoder_is_full_rank():
    s = spec(token_count=40)
    outs = run_encoder(build_encoder(s), image_tokens(s, 0))
    assert all(numerical_rank(o.features) == 16 for o in outs)


def test_single_token_shape_preserved():
    s = spec(token_count=1)
    state = build_encoder(s)
    out = forward_block(state, 0, initial_output(state, image_tokens(s, 0)))
    assert out.features.shape == (1, 16)
    assert out.keys.shape == (1, 16)
    assert out.kept_global_indices.tolist() == [0]


def test_forward_is_deterministic():
    s = spec()
    state = build_encoder(s)
    a = run_encoder(state, image_tokens(s, 3))
    b = run_encoder(state, image_tokens(s, 3))
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features)
        assert np.array_equal(x.cls_query, y.cls_query)


def test_attention_rows_sum_to_one():
    s = spec(token_count=12)
    state = build_encoder(s)
    for out in run_encoder(state, image_tokens(s, 1), keep_attention=True):
        assert out.attention.shape == (2, 13, 13)
        assert np.max(np.abs(out.attention.sum(axis=-1) - 1)) <= 1e-9


def test_forward_never_changes_token_count():
    s = spec(token_count=7)
    state = build_encoder(s)
    inp = initial_output(state, image_tokens(s, 0))
    for b in range(3):
        inp = forward_block(state, b, inp)
        assert inp.rows == 7 and inp.keys.shape[0] == 7


@pytest.mark.parametrize(
    "bad",
    [
        dict(dim=15),
        dict(num_blocks=2),
        dict(token_count=0),
        dict(synthetic_rank=0),
        dict(synthetic_rank=17),
        dict(encoder_id=""),
    ],
)
def test_invalid_specs_rejected(bad):
    with pytest.raises(InvalidConfig):
        build_encoder(spec(**bad))


def test_block_index_checked():
    state = build_encoder(spec())
    with pytest.raises(InvalidConfig):
        forward_block(state, 3, initial_output(state, image_tokens(state.spec, 0)))
