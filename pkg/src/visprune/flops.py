"""Analytic FLOP counts for encoding, projection and decoder prefill.

Convention: one multiply-accumulate is 2 FLOPs; each softmax, norm or
nonlinearity element is 5 FLOPs.  Residual additions, the attention
scale and the cost of computing selection scores are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import InvalidConfig, InvalidTrace
from .trace import PruneTrace

FLOPS_PER_MAC = 2
FLOPS_PER_ELEMENTWISE = 5
CONVENTION = (
    "1 multiply-accumulate = 2 FLOPs; softmax/norm/nonlinearity = 5 FLOPs per element; "
    "residual adds and selection scoring excluded"
)


@dataclass(frozen=True)
class LayerShape:
    dim: int
    num_heads: int
    d_ff: int

    def validate(self) -> None:
        if min(self.dim, self.num_heads, self.d_ff) < 1:
            raise InvalidConfig(f"layer shape must be positive: {self}")


def block_macs(n: int, dim: int, d_ff: int) -> int:
    """Multiplies in one pre-norm block: projections, QK^T, AV and the MLP."""
    return 4 * n * dim * dim + 2 * n * n * dim + 2 * n * dim * d_ff


def block_elementwise(n: int, dim: int, num_heads: int, d_ff: int) -> int:
    """Softmax entries, two norms over every token and the MLP nonlinearity."""
    return num_heads * n * n + 2 * n * dim + n * d_ff


def block_flops(n: int, shape: LayerShape) -> int:
    n = int(n)
    if n < 0:
        raise InvalidConfig("token count must be non-negative")
    return FLOPS_PER_MAC * block_macs(n, shape.dim, shape.d_ff) + FLOPS_PER_ELEMENTWISE * block_elementwise(
        n, shape.dim, shape.num_heads, shape.d_ff
    )


def encoder_flops(shape: LayerShape, token_counts_per_block: Sequence[int]) -> int:
    """Sum of block costs, each at that block's live token count (cls included by the caller)."""
    return sum(block_flops(n, shape) for n in token_counts_per_block)


def prefill_flops(shape: LayerShape, num_layers: int, visual_count, text_count: int) -> int:
    """Decoder prefill over visual + text tokens.

    ``visual_count`` is one count for every layer or a per-layer sequence.
    """
    if isinstance(visual_count, (int,)) or not hasattr(visual_count, "__len__"):
        counts = [int(visual_count)] * num_layers
    else:
        counts = [int(c) for c in visual_count]
        if len(counts) != num_layers:
            raise InvalidConfig(f"{len(counts)} visual counts for {num_layers} layers")
    if text_count < 0 or any(c < 0 for c in counts):
        raise InvalidConfig("token counts must be non-negative")
    return sum(block_flops(c + text_count, shape) for c in counts)


def projector_flops(n: int, in_dim: int, hidden_dim: int, out_dim: int) -> int:
    return FLOPS_PER_MAC * n * (in_dim * hidden_dim + hidden_dim * out_dim) + FLOPS_PER_ELEMENTWISE * n * hidden_dim


@dataclass(frozen=True)
class EncoderCost:
    encoder_id: str
    shape: LayerShape
    num_blocks: int
    token_count: int
    prune_blocks: tuple[int, ...]
    projector_hidden: int
    has_cls: bool = True


@dataclass(frozen=True)
class CostModel:
    """Everything the cost model needs about one pipeline configuration."""

    encoders: tuple[EncoderCost, ...]
    projector_out: int
    decoder: LayerShape
    decoder_layers: int
    decoder_schedule: tuple[int, ...]
    text_tokens: int
    reference_visual_tokens: int
    # decoder visual tokens without pruning; defaults to all encoder tokens
    baseline_decoder_visual: int | None = None

    @property
    def unpruned_decoder_visual(self) -> int:
        if self.baseline_decoder_visual is not None:
            return self.baseline_decoder_visual
        return sum(e.token_count for e in self.encoders)


@dataclass
class CostReport:
    per_stage_flops: dict[str, int]
    baseline_per_stage: dict[str, int]
    decoder_visual_counts: list[int]
    reference_visual_tokens: int
    convention: str = CONVENTION
    encoder_live_counts: dict[str, list[int]] = field(default_factory=dict)

    @property
    def total_flops(self) -> int:
        return sum(self.per_stage_flops.values())

    @property
    def baseline_total(self) -> int:
        return sum(self.baseline_per_stage.values())

    @property
    def reduction_fraction(self) -> float:
        return 1.0 - self.total_flops / self.baseline_total if self.baseline_total else 0.0

    @property
    def mean_decoder_visual(self) -> float:
        c = self.decoder_visual_counts
        return sum(c) / len(c) if c else 0.0

    @property
    def token_reduction(self) -> float:
        return 1.0 - self.mean_decoder_visual / self.reference_visual_tokens

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "per_stage_flops": dict(self.per_stage_flops),
            "baseline_per_stage": dict(self.baseline_per_stage),
            "total_flops": self.total_flops,
            "baseline_total": self.baseline_total,
            "reduction_fraction": self.reduction_fraction,
            "decoder_visual_counts": list(self.decoder_visual_counts),
            "mean_decoder_visual": self.mean_decoder_visual,
            "reference_visual_tokens": self.reference_visual_tokens,
            "token_reduction": self.token_reduction,
            "encoder_live_counts": {k: list(v) for k, v in self.encoder_live_counts.items()},
        }

    def table(self) -> str:
        rows = [f"# {self.convention}", f"{'stage':<12}{'pruned':>22}{'baseline':>22}"]
        for k in self.per_stage_flops:
            rows.append(f"{k:<12}{self.per_stage_flops[k]:>22,}{self.baseline_per_stage[k]:>22,}")
        rows.append(f"{'total':<12}{self.total_flops:>22,}{self.baseline_total:>22,}")
        rows.append(f"reduction_fraction {self.reduction_fraction:.4f}")
        rows.append(f"mean decoder visual tokens {self.mean_decoder_visual:.2f}")
        rows.append(f"token_reduction {self.token_reduction:.4f}")
        return "\n".join(rows)


def live_counts(start: int, length: int, prunes: Mapping[int, int], after: bool) -> list[int]:
    """Token count at each of ``length`` positions.

    ``prunes`` maps position to the count it prunes to; with ``after`` the
    new count applies from the next position, otherwise from that one.
    """
    out, cur = [], start
    for p in range(length):
        if not after and p in prunes:
            cur = prunes[p]
        out.append(cur)
        if after and p in prunes:
            cur = prunes[p]
    return out


def _stream_prunes(trace: PruneTrace, stream: str, expected: Sequence[int], start: int) -> dict[int, int]:
    entries = trace.for_stream(stream)
    positions = [e.position for e in entries]
    if positions != list(expected):
        raise InvalidTrace(f"{stream}: trace positions {positions}, expected {list(expected)}")
    if entries and entries[0].count_before != start:
        raise InvalidTrace(f"{stream}: first entry starts at {entries[0].count_before}, expected {start}")
    return {e.position: e.count_after for e in entries}


def pipeline_cost(model: CostModel, trace: PruneTrace, decoder_schedule: Sequence[int] | None = None) -> CostReport:
    """FLOPs of the run recorded in ``trace`` against the unpruned baseline.

    The trace must hold every stage-1 prune of every encoder, one fusion
    entry and the decoder prunes of ``decoder_schedule`` (default: the
    model's full schedule).
    """
    trace.check_chain()
    sched = model.decoder_schedule if decoder_schedule is None else tuple(decoder_schedule)
    enc_pruned = enc_base = proj_pruned = proj_base = 0
    fused_in = 0
    enc_live = {}
    for e in model.encoders:
        prunes = _stream_prunes(trace, f"encoder:{e.encoder_id}", e.prune_blocks, e.token_count)
        counts = live_counts(e.token_count, e.num_blocks, prunes, after=True)
        final = prunes[e.prune_blocks[-1]] if e.prune_blocks else e.token_count
        enc_live[e.encoder_id] = counts
        cls = 1 if e.has_cls else 0
        enc_pruned += encoder_flops(e.shape, [c + cls for c in counts])
        enc_base += encoder_flops(e.shape, [e.token_count + cls] * e.num_blocks)
        proj_pruned += projector_flops(final, e.shape.dim, e.projector_hidden, model.projector_out)
        proj_base += projector_flops(e.token_count, e.shape.dim, e.projector_hidden, model.projector_out)
        fused_in += final
    fused = trace.for_stream("fused")
    if len(fused) != 1:
        raise InvalidTrace(f"expected one fusion entry, found {len(fused)}")
    if fused[0].count_before != fused_in:
        raise InvalidTrace(f"fusion saw {fused[0].count_before} tokens, encoders produced {fused_in}")
    dec_start = fused[0].count_after
    prunes = _stream_prunes(trace, "decoder", sched, dec_start)
    dec_counts = live_counts(dec_start, model.decoder_layers, prunes, after=False)
    base_counts = [model.unpruned_decoder_visual] * model.decoder_layers
    return CostReport(
        per_stage_flops={
            "encoders": enc_pruned,
            "projection": proj_pruned,
            "prefill": prefill_flops(model.decoder, model.decoder_layers, dec_counts, model.text_tokens),
        },
        baseline_per_stage={
            "encoders": enc_base,
            "projection": proj_base,
            "prefill": prefill_flops(model.decoder, model.decoder_layers, base_counts, model.text_tokens),
        },
        decoder_visual_counts=dec_counts,
        reference_visual_tokens=model.reference_visual_tokens,
        encoder_live_counts=enc_live,
    )


def merge_reports(reports: Sequence[CostReport]) -> CostReport:
    """Sum FLOPs over several runs; decoder counts are averaged layer-wise."""
    if not reports:
        raise InvalidTrace("no cost reports to merge")
    keys = list(reports[0].per_stage_flops)
    n_layers = len(reports[0].decoder_visual_counts)
    mean_counts = [sum(r.decoder_visual_counts[i] for r in reports) / len(reports) for i in range(n_layers)]
    return CostReport(
        per_stage_flops={k: sum(r.per_stage_flops[k] for r in reports) for k in keys},
        baseline_per_stage={k: sum(r.baseline_per_stage[k] for r in reports) for k in keys},
        decoder_visual_counts=mean_counts,
        reference_visual_tokens=reports[0].reference_visual_tokens,
    )


def counts_trace(
    model: CostModel,
    stage1: Mapping[str, Sequence[int]],
    stage2_k: int,
    stage3: Sequence[int],
) -> PruneTrace:
    """A count-only trace for analytic what-if costing (kept = leading indices)."""
    from .trace import TraceEntry

    trace = PruneTrace()

    def entry(stage, stream, pos, before, after):
        return TraceEntry(stage, stream, pos, "analytic", "", list(range(after)), before, after)

    total = 0
    for e in model.encoders:
        cur = e.token_count
        for b, k in zip(e.prune_blocks, stage1[e.encoder_id]):
            trace.entries.append(entry(1, f"encoder:{e.encoder_id}", b, cur, min(k, cur)))
            cur = min(k, cur)
        total += cur
    k2 = min(stage2_k, total)
    trace.entries.append(entry(2, "fused", 0, total, k2))
    cur = k2
    for layer, k in zip(model.decoder_schedule, stage3):
        trace.entries.append(entry(3, "decoder", layer, cur, min(k, cur)))
        cur = min(k, cur)
    return trace


def eagle_model() -> CostModel:
    """Large four-encoder layout: 24-block 1024-wide encoders at 4096 tokens
    each, a 32-layer 4096-wide decoder and 1024 unpruned visual tokens."""
    enc = tuple(
        EncoderCost(
            encoder_id=name,
            shape=LayerShape(1024, 16, 4096),
            num_blocks=24,
            token_count=4096,
            prune_blocks=(7, 15, 23),
            projector_hidden=4096,
        )
        for name in ("clip", "convnext", "pix2struct", "eva")
    )
    return CostModel(
        encoders=enc,
        projector_out=4096,
        decoder=LayerShape(4096, 32, 11008),
        decoder_layers=32,
        decoder_schedule=(4, 12, 20),
        text_tokens=64,
        reference_visual_tokens=1024,
        baseline_decoder_visual=1024,
    )


def eagle_report() -> CostReport:
    model = eagle_model()
    stage1 = {e.encoder_id: (3072, 2048, 1024) for e in model.encoders}
    return pipeline_cost(model, counts_trace(model, stage1, 576, (390, 172, 78)))
