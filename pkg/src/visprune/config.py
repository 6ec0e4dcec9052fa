"""Pipeline configuration: TOML in, validated dataclasses out.

Every table is strict: unknown keys raise ConfigError naming the key path.
``serialize`` writes the canonical form with all defaults filled, and
``parse_config(serialize(c)) == c`` for every valid config.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoder import EncoderSpec
from .errors import ConfigError, InvalidConfig
from .flops import CostModel, EncoderCost, LayerShape
from .stage1 import PhaseSchedule
from .stage3 import ADAPTIVE, FIXED, DecoderSpec

DEFAULT_STAGE2_K = 576


@dataclass(frozen=True)
class EncoderConfig:
    id: str
    num_blocks: int = 12
    num_heads: int = 4
    token_count: int = 256
    dim: int = 32
    seed: int = 0
    synthetic_rank: int | None = None
    mlp_ratio: int = 4
    attn_scale: float = 1.0

    def to_spec(self) -> EncoderSpec:
        return EncoderSpec(
            encoder_id=self.id,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            token_count=self.token_count,
            dim=self.dim,
            seed=self.seed,
            synthetic_rank=self.synthetic_rank,
            mlp_ratio=self.mlp_ratio,
            attn_scale=self.attn_scale,
        )


@dataclass(frozen=True)
class ProbeConfig:
    batch_size: int = 8
    first_seed: int = 1000

    @property
    def seeds(self) -> list[int]:
        return list(range(self.first_seed, self.first_seed + self.batch_size))


@dataclass(frozen=True)
class Stage1Config:
    # retained total per prune point; empty means keep every token
    totals: tuple[int, ...] = ()
    min_tokens_per_encoder: int = 1
    # encoder id -> blocks after which to prune; default: last block of each phase
    prune_blocks: Mapping[str, tuple[int, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class Stage2Config:
    # None keeps min(576, tokens surviving stage 1)
    k: int | None = None
    hidden_dim: int = 128
    iterative: bool = False
    compare: bool = True


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 32
    dim: int = 64
    num_heads: int = 8
    mlp_ratio: int = 4
    seed: int = 0
    min_head_scale: float = 0.5
    max_head_scale: float = 4.0
    residual_scale: float = 0.5
    text_tokens: int = 16

    def to_spec(self) -> DecoderSpec:
        return DecoderSpec(
            num_layers=self.num_layers,
            dim=self.dim,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            seed=self.seed,
            min_head_scale=self.min_head_scale,
            max_head_scale=self.max_head_scale,
            residual_scale=self.residual_scale,
        )


@dataclass(frozen=True)
class Stage3Config:
    mode: str = FIXED
    schedule: tuple[int, ...] = (4, 12, 20)
    fixed_counts: tuple[int, ...] = (390, 172, 78)
    lambdas: tuple[float, ...] | None = None
    k_heads: int = 4
    min_keep: int = 16
    # calibration targets for the mean adaptive count per prune layer
    targets: tuple[int, ...] = (396, 170, 76)


@dataclass(frozen=True)
class SuiteConfig:
    image_seeds: tuple[int, ...] = (0,)
    visual_masses: tuple[float, ...] = (0.5,)
    # external images: encoder id -> tensor file (relative to the config file)
    images: tuple[Mapping[str, str], ...] = ()


@dataclass(frozen=True)
class DiagnosticsConfig:
    topk: int = 64


@dataclass(frozen=True)
class PipelineConfig:
    encoders: tuple[EncoderConfig, ...]
    seed: int = 0
    rel_tol: float = 1e-6
    reference_visual_tokens: int = 1024
    report_path: str | None = None
    probe: ProbeConfig = ProbeConfig()
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Config = Stage2Config()
    decoder: DecoderConfig = DecoderConfig()
    stage3: Stage3Config = Stage3Config()
    suite: SuiteConfig = SuiteConfig()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()
    # directory that relative tensor paths resolve against; not serialized
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self) -> None:
        _validate(self)

    @property
    def encoder_ids(self) -> list[str]:
        return [e.id for e in self.encoders]

    def encoder_specs(self) -> list[EncoderSpec]:
        return [e.to_spec() for e in self.encoders]

    def schedule_for(self, enc: EncoderConfig) -> PhaseSchedule:
        return PhaseSchedule.default(enc.num_blocks, self.stage1.prune_blocks.get(enc.id))

    @property
    def stage1_totals(self) -> list[int]:
        if self.stage1.totals:
            return list(self.stage1.totals)
        n_points = len(self.schedule_for(self.encoders[0]).prune_blocks)
        return [sum(e.token_count for e in self.encoders)] * n_points

    @property
    def stage2_k(self) -> int:
        if self.stage2.k is not None:
            return self.stage2.k
        return min(DEFAULT_STAGE2_K, self.stage1_totals[-1])

    def with_overrides(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def with_stage3(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, stage3=dataclasses.replace(self.stage3, **changes))

    def cost_model(self) -> CostModel:
        encs = []
        for e in self.encoders:
            encs.append(
                EncoderCost(
                    encoder_id=e.id,
                    shape=LayerShape(e.dim, e.num_heads, e.dim * e.mlp_ratio),
                    num_blocks=e.num_blocks,
                    token_count=e.token_count,
                    prune_blocks=self.schedule_for(e).prune_blocks,
                    projector_hidden=self.stage2.hidden_dim,
                )
            )
        d = self.decoder
        return CostModel(
            encoders=tuple(encs),
            projector_out=d.dim,
            decoder=LayerShape(d.dim, d.num_heads, d.dim * d.mlp_ratio),
            decoder_layers=d.num_layers,
            decoder_schedule=tuple(self.stage3.schedule),
            text_tokens=d.text_tokens,
            reference_visual_tokens=self.reference_visual_tokens,
        )

    def validate(self) -> None:
        _validate(self)


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _validate(c: PipelineConfig) -> None:
    if not c.encoders:
        _fail("encoders", "at least one encoder is required")
    ids = c.encoder_ids
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        _fail("encoders", f"encoder ids must be unique, repeated: {dup}")
    for i, e in enumerate(c.encoders):
        try:
            e.to_spec().validate()
        except InvalidConfig as exc:
            _fail(f"encoders[{i}]", str(exc))
    if c.seed < 0:
        _fail("seed", "must be non-negative")
    if not 0.0 < c.rel_tol < 1.0:
        _fail("rel_tol", "must lie in (0, 1)")
    if c.reference_visual_tokens < 1:
        _fail("reference_visual_tokens", "must be >= 1")
    if c.probe.batch_size < 1 or c.probe.first_seed < 0:
        _fail("probe", "batch_size must be >= 1 and first_seed >= 0")

    s1 = c.stage1
    for eid in s1.prune_blocks:
        if eid not in ids:
            _fail(f"stage1.prune_blocks.{eid}", "refers to an undefined encoder")
    points = set()
    for e in c.encoders:
        try:
            points.add(len(c.schedule_for(e).prune_blocks))
        except InvalidConfig as exc:
            _fail(f"stage1.prune_blocks.{e.id}", str(exc))
    if len(points) != 1:
        _fail("stage1.prune_blocks", "every encoder needs the same number of prune points")
    n_points = points.pop()
    if s1.min_tokens_per_encoder < 0:
        _fail("stage1.min_tokens_per_encoder", "must be >= 0")
    totals = c.stage1_totals
    if len(totals) != n_points:
        _fail("stage1.totals", f"{len(totals)} totals for {n_points} prune points")
    floor = len(c.encoders) * s1.min_tokens_per_encoder
    full = sum(e.token_count for e in c.encoders)
    for i, t in enumerate(totals):
        if not floor <= t <= full:
            _fail(f"stage1.totals[{i}]", f"{t} outside [{floor}, {full}]")
    if any(a < b for a, b in zip(totals, totals[1:])):
        _fail("stage1.totals", "must be non-increasing")

    s2 = c.stage2
    if s2.k is not None and not 0 <= s2.k <= totals[-1]:
        _fail("stage2.k", f"{s2.k} outside [0, {totals[-1]}] (tokens left after stage 1)")
    if s2.hidden_dim < 1:
        _fail("stage2.hidden_dim", "must be >= 1")

    try:
        c.decoder.to_spec().validate()
    except InvalidConfig as exc:
        _fail("decoder", str(exc))
    if c.decoder.text_tokens < 1:
        _fail("decoder.text_tokens", "must be >= 1")

    s3 = c.stage3
    if s3.mode not in (FIXED, ADAPTIVE):
        _fail("stage3.mode", f"must be {FIXED!r} or {ADAPTIVE!r}")
    sched = list(s3.schedule)
    if any(a >= b for a, b in zip(sched, sched[1:])):
        _fail("stage3.schedule", "must be strictly increasing")
    if sched and (sched[0] < 0 or sched[-1] >= c.decoder.num_layers):
        _fail("stage3.schedule", f"layers must lie in [0, {c.decoder.num_layers})")
    if len(s3.fixed_counts) != len(sched):
        _fail("stage3.fixed_counts", "one count per prune layer is required")
    if any(x < 0 for x in s3.fixed_counts) or any(
        a < b for a, b in zip(s3.fixed_counts, s3.fixed_counts[1:])
    ):
        _fail("stage3.fixed_counts", "must be non-negative and non-increasing")
    if s3.lambdas is not None:
        if len(s3.lambdas) != len(sched):
            _fail("stage3.lambdas", "one lambda per prune layer is required")
        if any(not (x > 0 and math.isfinite(x)) for x in s3.lambdas):
            _fail("stage3.lambdas", "must be positive and finite")
    if s3.mode == ADAPTIVE and s3.lambdas is None:
        _fail("stage3.lambdas", "adaptive mode needs lambdas (run calibrate)")
    if not 1 <= s3.k_heads <= c.decoder.num_heads:
        _fail("stage3.k_heads", f"must lie in [1, {c.decoder.num_heads}] decoder heads")
    if s3.min_keep < 0:
        _fail("stage3.min_keep", "must be >= 0")
    if s3.targets and len(s3.targets) != len(sched):
        _fail("stage3.targets", "one target per prune layer is required")

    su = c.suite
    if not su.image_seeds and not su.images:
        _fail("suite", "needs image_seeds or images")
    if any(s < 0 for s in su.image_seeds):
        _fail("suite.image_seeds", "must be non-negative")
    if not su.visual_masses or any(not 0.0 <= m <= 1.0 for m in su.visual_masses):
        _fail("suite.visual_masses", "needs values in [0, 1]")
    for i, img in enumerate(su.images):
        if sorted(img) != sorted(ids):
            _fail(f"suite.images[{i}]", "must name a tensor file for every encoder")
    if c.diagnostics.topk < 1:
        _fail("diagnostics.topk", "must be >= 1")


# ---- parsing -------------------------------------------------------------

_INT, _FLOAT, _STR, _BOOL = "int", "float", "str", "bool"


def _scalar(value, kind: str, path: str):
    if kind == _INT:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(path, f"expected an integer, got {value!r}")
        return value
    if kind == _FLOAT:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(path, f"expected a number, got {value!r}")
        return float(value)
    if kind == _STR:
        if not isinstance(value, str):
            _fail(path, f"expected a string, got {value!r}")
        return value
    if not isinstance(value, bool):
        _fail(path, f"expected true/false, got {value!r}")
    return value


def _list(value, kind: str, path: str) -> tuple:
    if not isinstance(value, list):
        _fail(path, f"expected a list, got {value!r}")
    return tuple(_scalar(v, kind, f"{path}[{i}]") for i, v in enumerate(value))


def _table(raw, path: str, schema: dict[str, tuple[str, bool]]) -> dict:
    """Check a TOML table against ``schema`` (key -> (kind, is_list))."""
    if not isinstance(raw, dict):
        _fail(path or "<root>", "expected a table")
    out = {}
    for key, value in raw.items():
        kpath = f"{path}.{key}" if path else key
        if key not in schema:
            _fail(kpath, "unknown key")
        kind, is_list = schema[key]
        out[key] = _list(value, kind, kpath) if is_list else _scalar(value, kind, kpath)
    return out


_ENCODER = {
    "id": (_STR, False),
    "num_blocks": (_INT, False),
    "num_heads": (_INT, False),
    "token_count": (_INT, False),
    "dim": (_INT, False),
    "seed": (_INT, False),
    "synthetic_rank": (_INT, False),
    "mlp_ratio": (_INT, False),
    "attn_scale": (_FLOAT, False),
}
_PROBE = {"batch_size": (_INT, False), "first_seed": (_INT, False)}
_STAGE1 = {"totals": (_INT, True), "min_tokens_per_encoder": (_INT, False)}
_STAGE2 = {
    "k": (_INT, False),
    "hidden_dim": (_INT, False),
    "iterative": (_BOOL, False),
    "compare": (_BOOL, False),
}
_DECODER = {
    "num_layers": (_INT, False),
    "dim": (_INT, False),
    "num_heads": (_INT, False),
    "mlp_ratio": (_INT, False),
    "seed": (_INT, False),
    "min_head_scale": (_FLOAT, False),
    "max_head_scale": (_FLOAT, False),
    "residual_scale": (_FLOAT, False),
    "text_tokens": (_INT, False),
}
_STAGE3 = {
    "mode": (_STR, False),
    "schedule": (_INT, True),
    "fixed_counts": (_INT, True),
    "lambdas": (_FLOAT, True),
    "k_heads": (_INT, False),
    "min_keep": (_INT, False),
    "targets": (_INT, True),
}
_SUITE = {"image_seeds": (_INT, True), "visual_masses": (_FLOAT, True)}
_DIAG = {"topk": (_INT, False)}
_ROOT = {
    "seed": (_INT, False),
    "rel_tol": (_FLOAT, False),
    "reference_visual_tokens": (_INT, False),
    "report_path": (_STR, False),
}
_SECTIONS = ("encoders", "probe", "stage1", "stage2", "decoder", "stage3", "suite", "diagnostics")


def config_from_dict(raw: Mapping[str, Any], base_dir: str = ".") -> PipelineConfig:
    raw = dict(raw)
    sections = {k: raw.pop(k) for k in _SECTIONS if k in raw}
    root = _table(raw, "", _ROOT)

    encs = sections.get("encoders")
    if not isinstance(encs, list) or not encs:
        _fail("encoders", "expected a non-empty array of tables")
    encoders = []
    for i, e in enumerate(encs):
        t = _table(e, f"encoders[{i}]", _ENCODER)
        if "id" not in t:
            _fail(f"encoders[{i}].id", "missing")
        encoders.append(EncoderConfig(**t))

    s1raw = dict(sections.get("stage1", {}))
    pb_raw = s1raw.pop("prune_blocks", {})
    s1 = _table(s1raw, "stage1", _STAGE1)
    if not isinstance(pb_raw, dict):
        _fail("stage1.prune_blocks", "expected a table of encoder id -> block list")
    s1["prune_blocks"] = {k: _list(v, _INT, f"stage1.prune_blocks.{k}") for k, v in pb_raw.items()}

    suraw = dict(sections.get("suite", {}))
    images_raw = suraw.pop("images", [])
    su = _table(suraw, "suite", _SUITE)
    if not isinstance(images_raw, list):
        _fail("suite.images", "expected an array of tables")
    su["images"] = tuple(
        {k: _scalar(v, _STR, f"suite.images[{i}].{k}") for k, v in _table_dict(img, f"suite.images[{i}]").items()}
        for i, img in enumerate(images_raw)
    )

    cfg = PipelineConfig(
        encoders=tuple(encoders),
        probe=ProbeConfig(**_table(sections.get("probe", {}), "probe", _PROBE)),
        stage1=Stage1Config(**s1),
        stage2=Stage2Config(**_table(sections.get("stage2", {}), "stage2", _STAGE2)),
        decoder=DecoderConfig(**_table(sections.get("decoder", {}), "decoder", _DECODER)),
        stage3=Stage3Config(**_table(sections.get("stage3", {}), "stage3", _STAGE3)),
        suite=SuiteConfig(**su),
        diagnostics=DiagnosticsConfig(**_table(sections.get("diagnostics", {}), "diagnostics", _DIAG)),
        base_dir=base_dir,
        **root,
    )
    return cfg


def _table_dict(value, path: str) -> dict:
    if not isinstance(value, dict):
        _fail(path, "expected a table")
    return value


def parse_config(text: str, base_dir: str = ".") -> PipelineConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"<toml>: {exc}") from exc
    return config_from_dict(raw, base_dir)


def load_config(path) -> PipelineConfig:
    p = Path(path)
    return parse_config(p.read_text(encoding="utf-8"), base_dir=str(p.parent))


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Canonical plain-data form: defaults filled, None values omitted."""

    def clean(obj):
        if dataclasses.is_dataclass(obj):
            out = {}
            for f in dataclasses.fields(obj):
                if f.name == "base_dir":
                    continue
                v = getattr(obj, f.name)
                if v is not None:
                    out[f.name] = clean(v)
            return out
        if isinstance(obj, Mapping):
            return {str(k): clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    d = clean(cfg)
    if not d["stage1"]["prune_blocks"]:
        del d["stage1"]["prune_blocks"]
    if not d["suite"]["images"]:
        del d["suite"]["images"]
    return d


def serialize(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))
