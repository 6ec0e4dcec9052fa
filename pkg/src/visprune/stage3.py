"""Text-guided pruning inside a toy causal decoder.

At each scheduled layer the attention row of the last instruction token is
read per head.  Heads are ranked by their visual attention value (total
attention mass on visual tokens); the top ``k_heads`` vote on token
importance, and in adaptive mode their summed mass also sets how many
tokens survive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidConfig, InvalidInput, InvalidK, NumericalError
from .linalg import top_k_indices
from .nn import BlockWeights, attention_probs, layer_norm, split_heads, transformer_block
from .seeding import digest, stream
from .trace import TraceEntry

FIXED = "fixed"
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class DecoderSpec:
    num_layers: int = 32
    dim: int = 64
    num_heads: int = 8
    mlp_ratio: int = 4
    seed: int = 0
    # per-head logit scales are drawn log-uniformly from [min, max]
    min_head_scale: float = 0.5
    max_head_scale: float = 4.0
    residual_scale: float = 0.5

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    @property
    def d_ff(self) -> int:
        return self.dim * self.mlp_ratio

    def validate(self) -> None:
        if self.num_layers < 1 or self.num_heads < 1 or self.dim % self.num_heads:
            raise InvalidConfig("decoder needs >= 1 layer and dim divisible by num_heads")
        if not 0 < self.min_head_scale <= self.max_head_scale:
            raise InvalidConfig("decoder head scales must satisfy 0 < min <= max")
        if self.mlp_ratio < 1 or self.residual_scale <= 0:
            raise InvalidConfig("decoder mlp_ratio and residual_scale must be positive")


@dataclass(frozen=True)
class DecoderState:
    spec: DecoderSpec
    layers: tuple[BlockWeights, ...]
    head_scales: np.ndarray  # (layers, heads)


def build_decoder(spec: DecoderSpec, run_seed: int = 0) -> DecoderState:
    """Seeded decoder whose key projection is a perturbed copy of the query
    projection, so tokens with similar states attend to each other."""
    spec.validate()
    d, f, s = spec.dim, spec.d_ff, spec.seed
    rs = spec.residual_scale
    layers = []
    for i in range(spec.num_layers):
        g = lambda role, shape, fan: stream(run_seed, s, i, role).standard_normal(shape) / np.sqrt(fan)
        w_q = g("w_q", (d, d), d)
        w_k = w_q + 0.25 * g("w_k", (d, d), d)
        layers.append(
            BlockWeights(
                w_q=w_q,
                w_k=w_k,
                w_v=g("w_v", (d, d), d),
                w_o=rs * g("w_o", (d, d), d),
                w_up=g("w_up", (d, f), d),
                w_down=rs * g("w_down", (f, d), f),
            )
        )
    u = stream(run_seed, s, "head_scales").uniform(size=(spec.num_layers, spec.num_heads))
    lo, hi = math.log(spec.min_head_scale), math.log(spec.max_head_scale)
    return DecoderState(spec, tuple(layers), np.exp(lo + u * (hi - lo)))


def make_prompt(
    visual: np.ndarray, visual_mass: float, seed: int, num_text: int = 16, run_seed: int = 0
) -> np.ndarray:
    """Synthetic instruction tokens, shape (num_text, dim).

    Text tokens scatter around one prompt direction.  The last instruction
    token interpolates between that direction (``visual_mass`` = 0) and the
    mean visual token (``visual_mass`` = 1), steering where it attends.
    """
    if not 0.0 <= visual_mass <= 1.0:
        raise InvalidConfig(f"visual_mass must lie in [0, 1], got {visual_mass}")
    if num_text < 1:
        raise InvalidConfig("a prompt needs at least one text token")
    visual = np.asarray(visual, dtype=np.float64)
    dim = visual.shape[1]
    rng = stream(run_seed, seed, "prompt")
    unit = lambda v: v * (np.sqrt(dim) / max(np.linalg.norm(v), 1e-12))
    t_dir = unit(rng.standard_normal(dim))
    text = np.array([unit(t_dir + 0.5 * unit(rng.standard_normal(dim))) for _ in range(num_text - 1)])
    v_dir = unit(visual.mean(axis=0)) if visual.shape[0] else np.zeros(dim)
    last = unit(visual_mass * v_dir + (1.0 - visual_mass) * t_dir)
    return np.vstack([text.reshape(-1, dim), last[None, :]])


@dataclass(frozen=True)
class CrossAttentionSnapshot:
    """Attention of the last instruction token, per head.

    ``attn[i, h]`` is the mass on visual token i; ``text_attn[j, h]`` the mass
    on text position j.  Each head's column sums over both add up to 1.
    """

    attn: np.ndarray
    text_attn: np.ndarray
    layer_idx: int = 0

    @property
    def num_heads(self) -> int:
        return self.attn.shape[1]

    @property
    def visual_mass_per_head(self) -> np.ndarray:
        return self.attn.sum(axis=0)

    def mass_error(self) -> float:
        total = self.attn.sum(axis=0) + self.text_attn.sum(axis=0)
        return float(np.max(np.abs(total - 1.0)))

    def validate(self, tol: float = 1e-9) -> None:
        if self.attn.ndim != 2 or self.text_attn.ndim != 2:
            raise InvalidInput("snapshot arrays must be 2-D")
        if self.text_attn.shape[1] != self.attn.shape[1]:
            raise InvalidInput("visual and text attention disagree on head count")
        if (self.attn < 0).any() or (self.text_attn < 0).any():
            raise InvalidInput("attention values must be non-negative")
        if self.mass_error() > tol:
            raise InvalidInput("per-head attention mass does not sum to 1")


def visual_attention_value(snapshot: CrossAttentionSnapshot) -> np.ndarray:
    return snapshot.attn.sum(axis=0)


def select_heads(vav, k_heads: int) -> list[int]:
    vav = np.asarray(vav, dtype=np.float64)
    if k_heads < 1 or k_heads > vav.shape[0]:
        raise InvalidK(f"k_heads={k_heads} out of range for {vav.shape[0]} heads")
    return top_k_indices(vav, k_heads).indices.tolist()


def importance_scores(snapshot: CrossAttentionSnapshot, selected_heads: Sequence[int]) -> np.ndarray:
    heads = list(selected_heads)
    if not heads or any(h < 0 or h >= snapshot.num_heads for h in heads):
        raise InvalidInput(f"invalid head selection {heads}")
    return snapshot.attn[:, heads].sum(axis=1)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def adaptive_retained_count(
    vav, selected_heads: Sequence[int], lam: float, n_tokens: int, min_keep: int
) -> int:
    """``round(lam * sum of selected-head VAV)`` clamped to [min_keep, n_tokens]."""
    if not lam > 0 or not math.isfinite(lam):
        raise InvalidConfig(f"lambda must be a positive finite number, got {lam}")
    level = math.fsum(float(vav[h]) for h in selected_heads)
    k = round_half_up(lam * level)
    return max(min(min_keep, n_tokens), min(k, n_tokens))


@dataclass
class RetentionDecision:
    selected_heads: list[int]
    importance: np.ndarray
    retained_count: int
    lam: float | None
    kept_indices: np.ndarray
    vav: np.ndarray
    warnings: list[str] = field(default_factory=list)


def decide(
    snapshot: CrossAttentionSnapshot,
    k_heads: int,
    mode: str,
    lam: float | None = None,
    fixed_count: int | None = None,
    min_keep: int = 16,
) -> RetentionDecision:
    n = snapshot.attn.shape[0]
    vav = visual_attention_value(snapshot)
    heads = select_heads(vav, k_heads)
    imp = importance_scores(snapshot, heads)
    warnings = []
    if mode == ADAPTIVE:
        k = adaptive_retained_count(vav, heads, lam, n, min_keep)
    elif mode == FIXED:
        k = int(fixed_count)
        if k > n:
            warnings.append(f"fixed count {k} clamped to {n} live tokens")
            k = n
    else:
        raise InvalidConfig(f"unknown stage-3 mode {mode!r}")
    kept = top_k_indices(imp, k).sorted_indices()
    return RetentionDecision(heads, imp, k, lam if mode == ADAPTIVE else None, kept, vav, warnings)


@dataclass
class Stage3Result:
    kept: np.ndarray  # rows of the stage-3 input that survive every prune layer
    decisions: list[RetentionDecision]
    entries: list[TraceEntry]
    live_counts: list[int]  # visual tokens entering each layer
    snapshots: list[CrossAttentionSnapshot]


def validate_schedule(
    spec: DecoderSpec, schedule: Sequence[int], mode: str, fixed_counts=None, lambdas=None
) -> None:
    sched = list(schedule)
    if any(a >= b for a, b in zip(sched, sched[1:])):
        raise InvalidConfig(f"stage-3 schedule must be strictly increasing: {sched}")
    if sched and (sched[0] < 0 or sched[-1] >= spec.num_layers):
        raise InvalidConfig(f"stage-3 schedule {sched} exceeds decoder depth {spec.num_layers}")
    if mode == FIXED:
        if fixed_counts is None or len(fixed_counts) != len(sched):
            raise InvalidConfig("fixed mode needs one count per prune layer")
        if any(a < b for a, b in zip(fixed_counts, fixed_counts[1:])):
            raise InvalidConfig("fixed counts must be non-increasing")
        if any(c < 0 for c in fixed_counts):
            raise InvalidConfig("fixed counts must be non-negative")
    elif mode == ADAPTIVE:
        if lambdas is None or len(lambdas) != len(sched):
            raise InvalidConfig("adaptive mode needs one lambda per prune layer")
        if any(not (lam > 0 and math.isfinite(lam)) for lam in lambdas):
            raise InvalidConfig("lambdas must be positive and finite")
    else:
        raise InvalidConfig(f"unknown stage-3 mode {mode!r}")


def last_token_snapshot(
    decoder: DecoderState, layer: int, x: np.ndarray, n_visual: int
) -> CrossAttentionSnapshot:
    spec = decoder.spec
    w = decoder.layers[layer]
    h = layer_norm(x)
    qh = split_heads(h[-1:] @ w.w_q, spec.num_heads)
    kh = split_heads(h @ w.w_k, spec.num_heads)
    # the last row of causal attention sees every position, so no mask is needed
    probs = attention_probs(qh, kh, decoder.head_scales[layer], causal=False)[:, 0, :]
    return CrossAttentionSnapshot(probs[:, :n_visual].T.copy(), probs[:, n_visual:].T.copy(), layer)


def run_stage3(
    visual: np.ndarray,
    text: np.ndarray,
    decoder: DecoderState,
    schedule: Sequence[int] = (4, 12, 20),
    k_heads: int = 4,
    mode: str = FIXED,
    lambdas: Sequence[float] | None = None,
    fixed_counts: Sequence[int] | None = None,
    min_keep: int = 16,
    stop_after: int | None = None,
) -> Stage3Result:
    """Prefill ``[visual; text]`` through the decoder, pruning visual tokens
    before each scheduled layer.

    The snapshot for a prune layer is that layer's own attention on the
    unpruned context; the layer then runs on the pruned context.
    ``stop_after`` ends the pass after that many prune layers.
    """
    spec = decoder.spec
    validate_schedule(spec, schedule, mode, fixed_counts, lambdas)
    visual = np.asarray(visual, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    if visual.ndim != 2 or text.ndim != 2 or visual.shape[1] != spec.dim or text.shape[1] != spec.dim:
        raise InvalidInput(f"decoder inputs must have {spec.dim} columns")
    if text.shape[0] < 1:
        raise InvalidInput("stage 3 needs at least one text token")
    x = np.vstack([visual, text])
    alive = np.arange(visual.shape[0])
    at = {layer: i for i, layer in enumerate(schedule)}
    decisions, entries, live, snaps = [], [], [], []
    for layer in range(spec.num_layers):
        if layer in at:
            if stop_after is not None and at[layer] >= stop_after:
                break
            i = at[layer]
            nv = alive.size
            snap = last_token_snapshot(decoder, layer, x, nv)
            dec = decide(
                snap,
                k_heads,
                mode,
                lam=None if lambdas is None else float(lambdas[i]),
                fixed_count=None if fixed_counts is None else int(fixed_counts[i]),
                min_keep=min_keep,
            )
            x = np.vstack([x[:nv][dec.kept_indices], x[nv:]])
            alive = alive[dec.kept_indices]
            decisions.append(dec)
            snaps.append(snap)
            entries.append(
                TraceEntry(
                    stage=3,
                    stream="decoder",
                    position=layer,
                    criterion=f"head_filtered_attention_{mode}",
                    scores_digest=digest(dec.importance),
                    kept=dec.kept_indices.tolist(),
                    count_before=nv,
                    count_after=int(dec.kept_indices.size),
                    warnings=dec.warnings,
                    extra={
                        "vav": dec.vav.tolist(),
                        "selected_heads": dec.selected_heads,
                        "retained_count": dec.retained_count,
                        "lambda": dec.lam,
                    },
                )
            )
        live.append(int(alive.size))
        x, *_ = transformer_block(
            x, decoder.layers[layer], spec.num_heads, decoder.head_scales[layer], causal=True
        )
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite decoder activations at layer {layer}")
    return Stage3Result(alive, decisions, entries, live, snaps)


def synthetic_snapshot(
    n_visual: int, n_text: int, n_heads: int, visual_mass: float, seed: int
) -> CrossAttentionSnapshot:
    """Snapshot whose head h puts ``visual_mass * w_h`` on visual tokens.

    Head weights ``w_h`` in (0, 1] and the within-segment spread depend only
    on ``seed``, so VAV scales linearly with ``visual_mass`` across a family.
    """
    rng = stream(seed, "synthetic_snapshot")
    w = rng.uniform(0.05, 1.0, size=n_heads)
    vis = rng.exponential(size=(n_visual, n_heads))
    txt = rng.exponential(size=(n_text, n_heads))
    m = visual_mass * w
    attn = vis / vis.sum(axis=0) * m
    text_attn = txt / txt.sum(axis=0) * (1.0 - m)
    return CrossAttentionSnapshot(attn, text_attn)
