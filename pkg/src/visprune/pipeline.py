"""End-to-end runs: probe, stage 1 per encoder, fusion, decoder pruning, cost.

A run covers a suite of images crossed with prompt visual masses.  Stages 1
and 2 run once per image; stage 3 runs once per (image, mass) item.  Work
may be spread over threads, but results are always merged in suite order,
so the report does not depend on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .config import PipelineConfig, config_to_dict
from .diagnostics import encoder_diagnostics, vav_distribution
from .encoder import EncoderState, build_encoder, image_tokens
from .errors import CalibrationError, ConfigError, InvalidConfig, StageError, VisPruneError
from .flops import CostReport, merge_reports, pipeline_cost
from .rank_probe import BudgetPlan, RankProfile, allocate_budget, probe_ranks
from .stage1 import Stage1Result, run_stage1
from .stage2 import FusedTokens, Projector, ProjectorSpec, build_projector, cooperative_prune, diversity_comparison, fuse
from .stage3 import ADAPTIVE, FIXED, DecoderState, Stage3Result, build_decoder, make_prompt, round_half_up, run_stage3
from .tensor_io import read_tensor
from .trace import PruneTrace, TraceEntry


@dataclass(frozen=True)
class Pipeline:
    config: PipelineConfig
    encoders: tuple[EncoderState, ...]
    projectors: dict[str, Projector]
    decoder: DecoderState


def build_pipeline(cfg: PipelineConfig) -> Pipeline:
    seed = cfg.seed
    encoders = tuple(build_encoder(spec, seed) for spec in cfg.encoder_specs())
    projectors = {
        e.id: build_projector(ProjectorSpec(e.id, e.dim, cfg.stage2.hidden_dim, cfg.decoder.dim, e.seed), seed)
        for e in cfg.encoders
    }
    return Pipeline(cfg, encoders, projectors, build_decoder(cfg.decoder.to_spec(), seed))


@dataclass(frozen=True)
class SuiteImage:
    label: str
    tokens: dict[str, np.ndarray]


def suite_images(pipe: Pipeline) -> list[SuiteImage]:
    cfg = pipe.config
    images = [
        SuiteImage(f"seed:{s}", {st.spec.encoder_id: image_tokens(st.spec, s, cfg.seed) for st in pipe.encoders})
        for s in cfg.suite.image_seeds
    ]
    base = Path(cfg.base_dir)
    for i, files in enumerate(cfg.suite.images):
        tokens = {}
        for st in pipe.encoders:
            spec = st.spec
            t = read_tensor(base / files[spec.encoder_id])
            if t.shape != (spec.token_count, spec.dim):
                raise ConfigError(
                    f"suite.images[{i}].{spec.encoder_id}: tensor shape {t.shape}, "
                    f"expected ({spec.token_count}, {spec.dim})"
                )
            tokens[spec.encoder_id] = t
        images.append(SuiteImage(f"file:{i}", tokens))
    return images


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_probe(pipe: Pipeline) -> RankProfile:
    cfg = pipe.config
    return probe_ranks(pipe.encoders, cfg.probe.seeds, cfg.rel_tol)


def plan_budgets(pipe: Pipeline, profile: RankProfile) -> BudgetPlan:
    cfg = pipe.config
    if sorted(profile.encoder_ids) != sorted(cfg.encoder_ids):
        raise ConfigError(f"probe covers encoders {profile.encoder_ids}, config defines {cfg.encoder_ids}")
    for e in cfg.encoders:
        if len(profile.mean[e.id]) != e.num_blocks:
            raise ConfigError(f"probe has {len(profile.mean[e.id])} blocks for {e.id}, config {e.num_blocks}")
    schedules = {e.id: cfg.schedule_for(e) for e in cfg.encoders}
    n_points = len(cfg.stage1_totals)
    points = [{eid: s.prune_blocks[p] for eid, s in schedules.items()} for p in range(n_points)]
    # rank profile order decides apportionment order; use config order
    ordered = RankProfile(
        {eid: profile.mean[eid] for eid in cfg.encoder_ids},
        {eid: profile.std[eid] for eid in cfg.encoder_ids},
        profile.batch_size,
        profile.rel_tol,
    )
    return allocate_budget(
        ordered,
        points,
        cfg.stage1_totals,
        cfg.stage1.min_tokens_per_encoder,
        token_counts={e.id: e.token_count for e in cfg.encoders},
    )


@dataclass
class ImageResult:
    image: SuiteImage
    stage1: dict[str, Stage1Result]
    fused: FusedTokens
    kept: FusedTokens
    entries: list[TraceEntry]
    diversity: dict | None


def run_image(pipe: Pipeline, plan: BudgetPlan, image: SuiteImage, compare: bool = True) -> ImageResult:
    cfg = pipe.config
    entries: list[TraceEntry] = []
    results = {}
    parts = []
    for st in pipe.encoders:
        eid = st.spec.encoder_id
        try:
            res = run_stage1(st, image.tokens[eid], cfg.schedule_for(_enc_cfg(cfg, eid)), plan.budgets_for(eid))
        except VisPruneError as exc:
            raise StageError(f"stage1:{eid}", len(entries), exc) from exc
        results[eid] = res
        entries.extend(res.entries)
        out = res.output
        parts.append((eid, pipe.projectors[eid].project(out.features), out.kept_global_indices))
    try:
        fused = fuse(parts)
        kept, entry = cooperative_prune(fused, cfg.stage2_k, cfg.stage2.iterative)
        diversity = diversity_comparison(fused, cfg.stage2_k, cfg.seed) if compare else None
    except VisPruneError as exc:
        raise StageError("stage2", len(entries), exc) from exc
    entries.append(entry)
    return ImageResult(image, results, fused, kept, entries, diversity)


def _enc_cfg(cfg: PipelineConfig, eid: str):
    return next(e for e in cfg.encoders if e.id == eid)


@dataclass(frozen=True)
class SuiteItem:
    index: int
    image_index: int
    visual_mass: float


def suite_items(cfg: PipelineConfig, n_images: int) -> list[SuiteItem]:
    masses = cfg.suite.visual_masses
    return [
        SuiteItem(i * len(masses) + j, i, float(m))
        for i in range(n_images)
        for j, m in enumerate(masses)
    ]


def run_item(
    pipe: Pipeline,
    img: ImageResult,
    item: SuiteItem,
    mode: str,
    lambdas: Sequence[float] | None,
    stop_after: int | None = None,
) -> Stage3Result:
    cfg = pipe.config
    visual = img.kept.features
    text = make_prompt(visual, item.visual_mass, item.index, cfg.decoder.text_tokens, cfg.seed)
    s3 = cfg.stage3
    try:
        return run_stage3(
            visual,
            text,
            pipe.decoder,
            schedule=s3.schedule,
            k_heads=s3.k_heads,
            mode=mode,
            lambdas=lambdas,
            fixed_counts=s3.fixed_counts,
            min_keep=s3.min_keep,
            stop_after=stop_after,
        )
    except VisPruneError as exc:
        raise StageError("stage3", len(img.entries), exc) from exc


def item_trace(img: ImageResult, res: Stage3Result) -> PruneTrace:
    trace = PruneTrace(list(img.entries) + list(res.entries))
    trace.check_chain()
    return trace


def final_origin(img: ImageResult, res: Stage3Result) -> list[list]:
    """(encoder id, original token index) of every token surviving all stages."""
    return [[img.kept.origin[r][0], img.kept.origin[r][1]] for r in res.kept]


def _resolve_mode(cfg: PipelineConfig, mode: str | None) -> tuple[str, list[float] | None]:
    mode = mode or cfg.stage3.mode
    if mode not in (FIXED, ADAPTIVE):
        raise InvalidConfig(f"unknown mode {mode!r}")
    lambdas = None if cfg.stage3.lambdas is None else list(cfg.stage3.lambdas)
    if mode == ADAPTIVE and lambdas is None:
        raise ConfigError("stage3.lambdas: adaptive mode needs lambdas (run calibrate)")
    return mode, lambdas


def run_pipeline(
    cfg: PipelineConfig,
    profile: RankProfile | None = None,
    mode: str | None = None,
    jobs: int = 1,
) -> dict:
    """Execute the full pipeline over the suite and return the report dict."""
    mode, lambdas = _resolve_mode(cfg, mode)
    pipe = build_pipeline(cfg)
    if profile is None:
        profile = run_probe(pipe)
    plan = plan_budgets(pipe, profile)
    images = suite_images(pipe)
    img_results = _map(lambda im: run_image(pipe, plan, im, cfg.stage2.compare), images, jobs)
    items = suite_items(cfg, len(images))
    s3_results = _map(lambda it: run_item(pipe, img_results[it.image_index], it, mode, lambdas), items, jobs)

    model = cfg.cost_model()
    costs: list[CostReport] = []
    item_reports = []
    for it, res in zip(items, s3_results):
        img = img_results[it.image_index]
        trace = item_trace(img, res)
        cost = pipeline_cost(model, trace)
        costs.append(cost)
        item_reports.append(
            {
                "index": it.index,
                "image": img.image.label,
                "visual_mass": it.visual_mass,
                "prompt_seed": it.index,
                "stage3_trace": [e.to_dict() for e in res.entries],
                "retained_per_layer": [d.retained_count for d in res.decisions],
                "decoder_visual_counts": res.live_counts,
                "final_origin": final_origin(img, res),
                "flops_reduction": cost.reduction_fraction,
            }
        )
    image_reports = [
        {
            "label": r.image.label,
            "trace": [e.to_dict() for e in r.entries],
            "stage1_final": {eid: s.output.rows for eid, s in r.stage1.items()},
            "stage2_kept": r.kept.rows,
            "diversity": r.diversity,
        }
        for r in img_results
    ]
    merged = merge_reports(costs)
    n_layers = len(cfg.stage3.schedule)
    retained = {
        "stage1_per_encoder": {
            eid: float(np.mean([r.stage1[eid].output.rows for r in img_results])) for eid in cfg.encoder_ids
        },
        "stage2": float(np.mean([r.kept.rows for r in img_results])),
        "stage3_per_layer": [
            float(np.mean([res.decisions[i].retained_count for res in s3_results])) for i in range(n_layers)
        ],
        "final": float(np.mean([res.kept.size for res in s3_results])),
    }
    families: dict[str, list] = {}
    for it, res in zip(items, s3_results):
        if res.snapshots:
            families.setdefault(f"{it.visual_mass:.6g}", []).append(res.snapshots[0])
    diag = {
        "encoders": {
            st.spec.encoder_id: encoder_diagnostics(st, [images[0].tokens[st.spec.encoder_id]], cfg.diagnostics.topk)
            for st in pipe.encoders
        },
        "vav_by_visual_mass": vav_distribution(families, cfg.stage3.k_heads) if families else {},
    }
    warnings = [
        f"{img.image.label} {e.stream}@{e.position}: {w}" for img in img_results for e in img.entries for w in e.warnings
    ]
    warnings += [
        f"item {it.index} decoder@{e.position}: {w}" for it, res in zip(items, s3_results) for e in res.entries for w in e.warnings
    ]
    return {
        "tool": {"name": "visprune", "version": __version__},
        "seeds": {
            "run_seed": cfg.seed,
            "probe_seeds": cfg.probe.seeds,
            "image_seeds": list(cfg.suite.image_seeds),
            "prompt_seeds": [it.index for it in items],
        },
        "mode": mode,
        "config": config_to_dict(cfg),
        "rank_profile": profile.to_dict(),
        "budget_plan": plan.to_dict(),
        "images": image_reports,
        "items": item_reports,
        "retained": retained,
        "cost": merged.to_dict(),
        "diagnostics": diag,
        "warnings": warnings,
    }


def run_diagnostics(cfg: PipelineConfig, jobs: int = 1) -> dict:
    """Encoder entropy / top-k tau over every suite image, plus first-layer
    VAV statistics per prompt visual mass."""
    pipe = build_pipeline(cfg)
    images = suite_images(pipe)
    enc = {
        st.spec.encoder_id: encoder_diagnostics(st, [im.tokens[st.spec.encoder_id] for im in images], cfg.diagnostics.topk)
        for st in pipe.encoders
    }
    out = {"tool": {"name": "visprune", "version": __version__}, "encoders": enc, "vav_by_visual_mass": {}}
    if not cfg.stage3.schedule:
        return out
    plan = plan_budgets(pipe, run_probe(pipe))
    img_results = _map(lambda im: run_image(pipe, plan, im, compare=False), images, jobs)
    items = suite_items(cfg, len(images))
    res = _map(lambda it: run_item(pipe, img_results[it.image_index], it, FIXED, None, stop_after=1), items, jobs)
    families: dict[str, list] = {}
    for it, r in zip(items, res):
        families.setdefault(f"{it.visual_mass:.6g}", []).append(r.snapshots[0])
    out["vav_by_visual_mass"] = vav_distribution(families, cfg.stage3.k_heads)
    return out


# ---- lambda calibration ---------------------------------------------------

OK, CEILING, FLOOR = "ok", "ceiling", "floor"
_BISECT_STEPS = 200


@dataclass(frozen=True)
class LayerCalibration:
    layer: int
    target: float
    lam: float
    mean: float
    status: str
    levels: tuple[float, ...]  # selected-head VAV sum per suite item
    counts: tuple[int, ...]  # tokens entering the layer per suite item

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "target": self.target,
            "lambda": self.lam,
            "mean_retained": self.mean,
            "status": self.status,
            "levels": list(self.levels),
            "counts": list(self.counts),
        }


def mean_retained(lam: float, levels: Sequence[float], counts: Sequence[int], min_keep: int) -> float:
    ks = [max(min(min_keep, n), min(round_half_up(lam * s), n)) for s, n in zip(levels, counts)]
    return math.fsum(ks) / len(ks)


def calibrate_layer(
    levels: Sequence[float], counts: Sequence[int], target: float, min_keep: int, layer: int, tolerance: float = 0.10
) -> LayerCalibration:
    """Smallest-error lambda for one prune layer by deterministic bisection.

    Retained counts are a non-decreasing step function of lambda, so the
    search brackets the crossing of the target and keeps whichever side is
    closer.  Targets at the clamps are reported with status ceiling/floor.
    """
    if not levels:
        raise CalibrationError("empty calibration suite")
    floor_mean = math.fsum(min(min_keep, n) for n in counts) / len(counts)
    positive = [(s, n) for s, n in zip(levels, counts) if s > 0]
    if not positive:
        raise CalibrationError(f"layer {layer}: no visual attention in any item, counts stuck at the floor")
    lam_top = max((n - 0.5) / s for s, n in positive) * 2.0
    ceil_mean = mean_retained(lam_top, levels, counts, min_keep)

    def done(lam, status):
        m = mean_retained(lam, levels, counts, min_keep)
        if abs(m - target) > tolerance * target:
            raise CalibrationError(
                f"layer {layer}: target {target} unattainable, nearest mean {m:.2f} ({status})"
            )
        return LayerCalibration(layer, float(target), lam, m, status, tuple(levels), tuple(counts))

    if target >= ceil_mean:
        return done(max((n - 0.5) / s for s, n in positive), CEILING)
    if target <= floor_mean:
        lam_floor = min((min(min_keep, n) + 0.5) / s for s, n in positive) * 0.5
        return done(lam_floor, FLOOR)
    lo, hi = 0.0, lam_top
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if mean_retained(mid, levels, counts, min_keep) < target:
            lo = mid
        else:
            hi = mid
    m_lo = mean_retained(lo, levels, counts, min_keep) if lo > 0 else -math.inf
    m_hi = mean_retained(hi, levels, counts, min_keep)
    lam = lo if target - m_lo < m_hi - target else hi
    return done(lam, OK)


def calibrate(
    cfg: PipelineConfig,
    targets: Sequence[float] | None = None,
    profile: RankProfile | None = None,
    tolerance: float = 0.10,
    jobs: int = 1,
) -> list[LayerCalibration]:
    """Per-layer lambdas so the suite's mean adaptive counts hit ``targets``.

    Layers are calibrated in order.  A layer's snapshot does not depend on
    its own lambda, so each layer needs one decoder pass per item and the
    search itself is closed-form.
    """
    targets = list(cfg.stage3.targets if targets is None else targets)
    sched = list(cfg.stage3.schedule)
    if len(targets) != len(sched):
        raise ConfigError(f"stage3.targets: {len(targets)} targets for {len(sched)} prune layers")
    pipe = build_pipeline(cfg)
    if profile is None:
        profile = run_probe(pipe)
    plan = plan_budgets(pipe, profile)
    images = suite_images(pipe)
    img_results = _map(lambda im: run_image(pipe, plan, im, compare=False), images, jobs)
    items = suite_items(cfg, len(images))
    lambdas: list[float] = []
    out = []
    for i, (layer, target) in enumerate(zip(sched, targets)):
        trial = lambdas + [1.0] * (len(sched) - i)
        res = _map(
            lambda it: run_item(pipe, img_results[it.image_index], it, ADAPTIVE, trial, stop_after=i + 1),
            items,
            jobs,
        )
        levels, counts = [], []
        for r in res:
            d = r.decisions[i]
            levels.append(math.fsum(float(d.vav[h]) for h in d.selected_heads))
            counts.append(int(d.importance.size))
        cal = calibrate_layer(levels, counts, target, cfg.stage3.min_keep, layer, tolerance)
        lambdas.append(cal.lam)
        out.append(cal)
    return out
