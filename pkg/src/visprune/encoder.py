"""Seeded toy vision encoders with a cls token.

Each encoder is a stack of pre-norm transformer blocks over ``[cls; visual
tokens]``.  Weights come from Philox streams keyed by (run seed, encoder
seed, block, role), so an identical spec always yields bit-identical
weights.  Setting ``synthetic_rank = r`` confines the residual stream to a
fixed r-dimensional subspace: the patch embedding and both block output
projections (attention out and MLP down) factor through an ``r x dim``
matrix, so every block's visual feature matrix has rank at most r.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, InvalidInput, NumericalError
from .nn import BlockWeights, transformer_block
from .seeding import stream


@dataclass(frozen=True)
class EncoderSpec:
    encoder_id: str
    num_blocks: int
    num_heads: int
    token_count: int
    dim: int
    seed: int = 0
    synthetic_rank: int | None = None
    mlp_ratio: int = 4
    # 0 gives uniform attention everywhere (used by diagnostics checks)
    attn_scale: float = 1.0

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def d_ff(self) -> int:
        return self.dim * self.mlp_ratio

    def validate(self) -> None:
        if not self.encoder_id:
            raise InvalidConfig("encoder_id must be non-empty")
        if self.num_heads < 1 or self.dim < 1 or self.dim % self.num_heads:
            raise InvalidConfig(
                f"{self.encoder_id}: dim {self.dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_blocks < 3:
            raise InvalidConfig(f"{self.encoder_id}: num_blocks must be >= 3")
        if self.token_count < 1:
            raise InvalidConfig(f"{self.encoder_id}: token_count must be >= 1")
        if self.mlp_ratio < 1:
            raise InvalidConfig(f"{self.encoder_id}: mlp_ratio must be >= 1")
        if self.seed < 0:
            raise InvalidConfig(f"{self.encoder_id}: seed must be non-negative")
        if self.attn_scale < 0 or not np.isfinite(self.attn_scale):
            raise InvalidConfig(f"{self.encoder_id}: attn_scale must be finite and >= 0")
        if self.synthetic_rank is not None and not 1 <= self.synthetic_rank <= self.dim:
            raise InvalidConfig(f"{self.encoder_id}: synthetic_rank must lie in [1, dim]")


@dataclass(frozen=True)
class EncoderState:
    spec: EncoderSpec
    run_seed: int
    embed: np.ndarray | None
    cls_token: np.ndarray
    blocks: tuple[BlockWeights, ...]

    def checksum(self) -> str:
        h = hashlib.sha256()
        arrays = [self.cls_token] + ([self.embed] if self.embed is not None else [])
        for b in self.blocks:
            arrays.extend(b.arrays())
        for a in arrays:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class BlockOutput:
    features: np.ndarray
    cls_token: np.ndarray
    kept_global_indices: np.ndarray
    cls_query: np.ndarray | None = None
    keys: np.ndarray | None = None
    attention: np.ndarray | None = field(default=None, repr=False)

    @property
    def rows(self) -> int:
        return self.features.shape[0]

    def gather(self, local: np.ndarray) -> "BlockOutput":
        """Keep rows ``local`` (ascending) of features, keys and index map."""
        local = np.asarray(local, dtype=np.int64)
        return BlockOutput(
            features=self.features[local],
            cls_token=self.cls_token,
            kept_global_indices=self.kept_global_indices[local],
            cls_query=self.cls_query,
            keys=None if self.keys is None else self.keys[local],
        )


def _gauss(key, shape, scale) -> np.ndarray:
    return stream(*key).standard_normal(shape) * scale


def _subspace(spec: EncoderSpec, run_seed: int) -> np.ndarray:
    g = _gauss((run_seed, spec.seed, 0, "subspace"), (spec.dim, spec.dim), 1.0)
    q, _ = np.linalg.qr(g)
    return q[:, : spec.synthetic_rank]


def build_encoder(spec: EncoderSpec, run_seed: int = 0) -> EncoderState:
    spec.validate()
    d, f = spec.dim, spec.d_ff
    s = spec.seed
    basis = _subspace(spec, run_seed) if spec.synthetic_rank is not None else None
    blocks = []
    for b in range(spec.num_blocks):
        w_q = _gauss((run_seed, s, b, "w_q"), (d, d), d**-0.5)
        w_k = _gauss((run_seed, s, b, "w_k"), (d, d), d**-0.5)
        w_v = _gauss((run_seed, s, b, "w_v"), (d, d), d**-0.5)
        if basis is None:
            w_o = _gauss((run_seed, s, b, "w_o"), (d, d), d**-0.5)
            w_down = _gauss((run_seed, s, b, "w_down"), (f, d), f**-0.5)
        else:
            r = spec.synthetic_rank
            lift = np.sqrt(d / r)
            w_o = _gauss((run_seed, s, b, "w_o"), (d, r), d**-0.5 * lift) @ basis.T
            w_down = _gauss((run_seed, s, b, "w_down"), (f, r), f**-0.5 * lift) @ basis.T
        w_up = _gauss((run_seed, s, b, "w_up"), (d, f), d**-0.5)
        blocks.append(BlockWeights(w_q, w_k, w_v, w_o, w_up, w_down))
    cls = _gauss((run_seed, s, 0, "cls"), (d,), 1.0)
    embed = None
    if basis is not None:
        embed = basis @ basis.T * np.sqrt(d / spec.synthetic_rank)
        cls = cls @ embed
    return EncoderState(spec, run_seed, embed, cls, tuple(blocks))


def image_tokens(spec: EncoderSpec, image_seed: int, run_seed: int = 0) -> np.ndarray:
    """Raw token grid for one synthetic image as seen by this encoder."""
    return _gauss((run_seed, spec.seed, image_seed, "image"), (spec.token_count, spec.dim), 1.0)


def initial_output(state: EncoderState, tokens: np.ndarray) -> BlockOutput:
    tokens = np.asarray(tokens, dtype=np.float64)
    spec = state.spec
    if tokens.ndim != 2 or tokens.shape[1] != spec.dim:
        raise InvalidConfig(
            f"{spec.encoder_id}: input tokens must be (n, {spec.dim}), got {tokens.shape}"
        )
    if not np.all(np.isfinite(tokens)):
        raise InvalidInput(f"{spec.encoder_id}: input tokens contain NaN or inf")
    x = tokens if state.embed is None else tokens @ state.embed
    return BlockOutput(
        features=x,
        cls_token=state.cls_token.copy(),
        kept_global_indices=np.arange(tokens.shape[0], dtype=np.int64),
    )


def forward_block(
    state: EncoderState, block_idx: int, inp: BlockOutput, keep_attention: bool = False
) -> BlockOutput:
    spec = state.spec
    if not 0 <= block_idx < spec.num_blocks:
        raise InvalidConfig(f"block index {block_idx} out of range")
    x = np.vstack([inp.cls_token[None, :], inp.features])
    out, q, k, probs = transformer_block(
        x, state.blocks[block_idx], spec.num_heads, head_scale=spec.attn_scale
    )
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"{spec.encoder_id}: non-finite activations in block {block_idx}")
    return BlockOutput(
        features=out[1:],
        cls_token=out[0],
        kept_global_indices=inp.kept_global_indices,
        cls_query=q[0] * spec.attn_scale,
        keys=k[1:],
        attention=probs if keep_attention else None,
    )


def run_encoder(
    state: EncoderState, tokens: np.ndarray, keep_attention: bool = False
) -> list[BlockOutput]:
    """Unpruned forward; one output per block."""
    out = initial_output(state, tokens)
    outputs = []
    for b in range(state.spec.num_blocks):
        out = forward_block(state, b, out, keep_attention=keep_attention)
        outputs.append(out)
    return outputs

