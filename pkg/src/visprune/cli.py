"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 runtime or numerical error,
3 I/O error.  Warnings never change the exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import load_config, serialize
from .diagnostics import diagnostics_csv
from .errors import ConfigError, VisPruneError
from .flops import counts_trace, eagle_report, pipeline_cost
from .pipeline import build_pipeline, calibrate, plan_budgets, run_diagnostics, run_pipeline, run_probe
from .rank_probe import RankProfile
from .report import dumps

REPORT_DIR_ENV = "VISPRUNE_REPORT_DIR"


def _out_path(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    base = os.environ.get(REPORT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    return p


def _emit(text: str, path: str | None) -> None:
    p = _out_path(path)
    if p is None:
        sys.stdout.write(text)
        return
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigError("--seed: must be non-negative")
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _profile(path: str | None) -> RankProfile | None:
    if path is None:
        return None
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--probe: not valid JSON: {exc}") from exc
    return RankProfile.from_dict(data.get("rank_profile", data))


def cmd_probe(args) -> int:
    cfg = _config(args)
    profile = run_probe(build_pipeline(cfg))
    _emit(dumps({"rank_profile": profile.to_dict(), "seeds": {"run_seed": cfg.seed, "probe_seeds": cfg.probe.seeds}}), args.out)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_pipeline(cfg, _profile(args.probe), args.mode, args.jobs)
    _emit(dumps(report), args.out or cfg.report_path)
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_diag(args) -> int:
    cfg = _config(args)
    diag = run_diagnostics(cfg, args.jobs)
    _emit(dumps(diag), args.out)
    if args.csv:
        _emit(diagnostics_csv(diag["encoders"]), args.csv)
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    targets = None
    if args.targets:
        try:
            targets = [float(t) for t in args.targets.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--targets: {exc}") from exc
    cals = calibrate(cfg, targets, _profile(args.probe), args.tolerance, args.jobs)
    lambdas = [c.lam for c in cals]
    _emit(dumps({"lambdas": lambdas, "layers": [c.to_dict() for c in cals]}), args.out)
    if args.write_config:
        new = cfg.with_stage3(lambdas=tuple(lambdas))
        _emit(serialize(new), args.write_config)
    for c in cals:
        print(f"layer {c.layer}: lambda={c.lam!r} mean={c.mean:.2f} target={c.target:g} [{c.status}]", file=sys.stderr)
    return 0


def cmd_flops(args) -> int:
    if args.preset == "eagle":
        report = eagle_report()
    else:
        cfg = _config(args)
        pipe = build_pipeline(cfg)
        plan = plan_budgets(pipe, _profile(args.probe) or run_probe(pipe))
        model = cfg.cost_model()
        stage1 = {eid: plan.budgets_for(eid) for eid in cfg.encoder_ids}
        report = pipeline_cost(model, counts_trace(model, stage1, cfg.stage2_k, cfg.stage3.fixed_counts))
    print(report.table(), file=sys.stderr)
    _emit(dumps(report.to_dict()), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"visprune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML pipeline config")
        p.add_argument("--out", help="output path (default: stdout)")
        p.add_argument("--seed", type=int, help="run seed, overrides the config")
        return p

    common(sub.add_parser("probe", help="measure per-block feature ranks")).set_defaults(fn=cmd_probe)

    p = common(sub.add_parser("run", help="run all three stages and write a report"))
    p.add_argument("--probe", help="rank profile JSON from `probe`")
    p.add_argument("--mode", choices=["fixed", "adaptive"], help="stage-3 retention mode")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.set_defaults(fn=cmd_run)

    p = common(sub.add_parser("diag", help="attention entropy, top-k tau and VAV statistics"))
    p.add_argument("--csv", help="also write per-block CSV here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_diag)

    p = common(sub.add_parser("calibrate", help="fit per-layer lambdas to target mean counts"))
    p.add_argument("--probe")
    p.add_argument("--targets", help="comma-separated targets (default: stage3.targets)")
    p.add_argument("--tolerance", type=float, default=0.10)
    p.add_argument("--write-config", help="write the config with the fitted lambdas here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_calibrate)

    p = common(sub.add_parser("flops", help="analytic cost of the configured budgets"), config_required=False)
    p.add_argument("--probe")
    p.add_argument("--preset", choices=["eagle"], help="built-in large layout instead of --config")
    p.set_defaults(fn=cmd_flops)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "flops" and not args.preset and not args.config:
        parser.error("flops needs --config or --preset")
    try:
        return args.fn(args)
    except VisPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
