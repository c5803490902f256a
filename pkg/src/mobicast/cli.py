"""Command-line surface: dataset ingestion and synthesis, correlation tables,
grid training and evaluation, meta-training, and report merging.

Every command that produces a directory also writes a run.json manifest there
(command line, resolved configuration, its hash, seed, package and bundle
format versions, completion status), which is enough to rerun the command.
No manifest field depends on wall-clock time, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import re
import sys

from . import __version__
from .dataio import (
    BUNDLE_FORMAT_VERSION,
    RawCountryData,
    SyntheticConfig,
    align_and_filter,
    generate_synthetic,
    load_bundle,
    load_cases,
    load_mobility,
    load_region_map,
    save_bundle,
)
from .errors import ContractError, DataError, MobicastError
from .evaluation import (
    MODEL_NAMES,
    ErrorReport,
    EvalConfig,
    ProtocolGrid,
    atomic_write_text,
    build_model,
    case_stat_lines,
    case_stats_table,
    correlation_lines,
    correlation_table,
    emit_report,
    evaluate_from_checkpoints,
    load_report_rows,
    rolling_evaluate,
)
from .meta import MetaConfig, maml_meta_train, save_meta_state
from .rng import derive_seed
from .train import TrainConfig

MANIFEST_NAME = "run.json"
DATA_DIR_ENV = "MOBICAST_DATA"


# ---------------------------------------------------------------- run config

@dataclasses.dataclass(frozen=True)
class RunConfig:
    """One run's resolved settings: defaults, then config file, then flags."""
    train: TrainConfig = TrainConfig()
    meta: MetaConfig = MetaConfig()
    grid: ProtocolGrid = ProtocolGrid()
    models: tuple = ("MPNN",)
    seed: int = 0
    jobs: int = 1
    ar_order: int = 7
    ar_differencing: int = 1

    def __post_init__(self):
        names = tuple(str(m).upper() for m in self.models)
        object.__setattr__(self, "models", names)
        if not names:
            raise ContractError("models must name at least one model")
        for name in names:
            if name not in MODEL_NAMES:
                raise ContractError(f"unknown model {name!r}; choose from "
                                    f"{', '.join(MODEL_NAMES)}")

    def eval_config(self) -> EvalConfig:
        return EvalConfig(train=self.train, meta=self.meta, seed=self.seed,
                          jobs=self.jobs, ar_order=self.ar_order,
                          ar_differencing=self.ar_differencing)


def config_to_dict(cfg: RunConfig) -> dict:
    grid = cfg.grid
    return {
        "train": dataclasses.asdict(cfg.train),
        "meta": dataclasses.asdict(cfg.meta),
        "grid": {"t_start": grid.t_start, "t_end": grid.t_end, "dt": grid.dt,
                 "horizons": None if grid.horizons is None
                 else list(grid.horizons)},
        "models": list(cfg.models),
        "seed": cfg.seed,
        "jobs": cfg.jobs,
        "ar_order": cfg.ar_order,
        "ar_differencing": cfg.ar_differencing,
    }


def config_digest(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _sub_config(cls, doc, section: str):
    if not isinstance(doc, dict):
        raise ContractError(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ContractError(f"unknown {section} config keys: {', '.join(unknown)}")
    return cls(**doc)


def run_config_from_dict(doc) -> RunConfig:
    if not isinstance(doc, dict):
        raise ContractError("run config must be a JSON object")
    known = {"train", "meta", "grid", "models", "seed", "jobs",
             "ar_order", "ar_differencing"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ContractError(f"unknown config keys: {', '.join(unknown)}")
    grid_doc = doc.get("grid", {})
    if isinstance(grid_doc, dict):
        grid_doc = dict(grid_doc)
        if isinstance(grid_doc.get("horizons"), list):
            grid_doc["horizons"] = tuple(grid_doc["horizons"])
    kwargs = {
        "train": _sub_config(TrainConfig, doc.get("train", {}), "train"),
        "meta": _sub_config(MetaConfig, doc.get("meta", {}), "meta"),
        "grid": _sub_config(ProtocolGrid, grid_doc, "grid"),
    }
    for key in ("seed", "jobs", "ar_order", "ar_differencing"):
        if key in doc:
            kwargs[key] = doc[key]
    if "models" in doc:
        if not isinstance(doc["models"], list):
            raise ContractError("config key 'models' must be a list of names")
        kwargs["models"] = tuple(doc["models"])
    return RunConfig(**kwargs)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ContractError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON: {exc}") from exc
    return run_config_from_dict(doc)


def resolve_run_config(args) -> RunConfig:
    """Defaults, overlaid by --config file, overlaid by explicit flags."""
    path = getattr(args, "config", None)
    cfg = load_run_config(path) if path else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        updates["jobs"] = args.jobs
    if getattr(args, "model", None):
        updates["models"] = tuple(args.model)
    grid = cfg.grid
    if getattr(args, "t", None) is not None:
        grid = dataclasses.replace(grid, t_start=args.t, t_end=args.t)
    if getattr(args, "t_start", None) is not None:
        grid = dataclasses.replace(grid, t_start=args.t_start)
    if getattr(args, "t_end", None) is not None:
        grid = dataclasses.replace(grid, t_end=args.t_end)
    if getattr(args, "dt", None) is not None:
        grid = dataclasses.replace(grid, dt=args.dt, horizons=None)
    if getattr(args, "horizon", None):
        grid = dataclasses.replace(grid, horizons=tuple(args.horizon))
    if grid != cfg.grid:
        updates["grid"] = grid
    return dataclasses.replace(cfg, **updates) if updates else cfg


# ---------------------------------------------------------------- plumbing

def data_dir() -> str:
    return os.environ.get(DATA_DIR_ENV, "")


def resolve_input(path: str) -> str:
    """Relative input paths resolve against the default data directory."""
    base = data_dir()
    if base and not os.path.isabs(path):
        return os.path.join(base, path)
    return path


def load_bundles(paths) -> list:
    return [load_bundle(resolve_input(p)) for p in paths]


def write_manifest(out_dir: str, command, config_doc: dict, seed, status: str,
                   extra: dict | None = None) -> None:
    doc = {
        "command": list(command),
        "config": config_doc,
        "config_hash": config_digest(config_doc),
        "seed": seed,
        "package_version": __version__,
        "bundle_format_version": BUNDLE_FORMAT_VERSION,
        "status": status,
    }
    if extra:
        doc.update(extra)
    atomic_write_text(os.path.join(out_dir, MANIFEST_NAME),
                      json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _read_regions_file(path: str) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            regions = [ln.strip() for ln in fh
                       if ln.strip() and not ln.startswith("#")]
    except OSError as exc:
        raise DataError(f"cannot read regions file {path}: {exc}") from exc
    if not regions:
        raise DataError(f"{path}: no region ids")
    return regions


# ---------------------------------------------------------------- commands

def cmd_ingest(args, argv) -> int:
    regions = _read_regions_file(resolve_input(args.regions_file))
    region_map = (load_region_map(resolve_input(args.region_map))
                  if args.region_map else None)
    mobility = load_mobility(resolve_input(args.mobility), regions, region_map)
    dates, matrix, stats = load_cases(resolve_input(args.cases), regions,
                                      region_map=region_map)
    raw = RawCountryData(country=args.country, regions=tuple(regions),
                         mobility=mobility, case_dates=tuple(dates),
                         cases=matrix)
    dataset = align_and_filter(raw, min_total_cases=args.min_total_cases)
    save_bundle(dataset, args.out)
    config_doc = {"country": args.country, "cases": args.cases,
                  "mobility": args.mobility, "regions_file": args.regions_file,
                  "region_map": args.region_map,
                  "min_total_cases": args.min_total_cases}
    write_manifest(args.out, argv, config_doc, None, "complete", {
        "regions_kept": dataset.n, "days": dataset.t_total,
        "values_clamped": stats.clamped, "values_missing": stats.missing})
    print(f"wrote bundle {args.out}: {dataset.n} regions, "
          f"{dataset.t_total} days")
    return 0


def cmd_synth(args, argv) -> int:
    cfg = SyntheticConfig(n_regions=args.regions, n_days=args.days,
                          n_countries=args.countries, base_rate=args.base_rate,
                          self_loop_strength=args.self_loop,
                          underreporting=args.underreporting,
                          noise_seed=args.seed, jitter=not args.no_jitter)
    datasets = generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    for ds in datasets:
        save_bundle(ds, os.path.join(args.out, ds.country))
    write_manifest(args.out, argv, dataclasses.asdict(cfg), args.seed,
                   "complete", {"countries": [ds.country for ds in datasets]})
    print(f"wrote {len(datasets)} synthetic bundles under {args.out}")
    return 0


def cmd_correlate(args, argv) -> int:
    datasets = load_bundles(args.bundle)
    shifts = tuple(range(1, args.max_shift + 1))
    correlations = []
    stats = []
    for ds in datasets:
        correlations.extend(correlation_table(ds, shifts=shifts))
        stats.extend(case_stats_table(ds))
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "correlations.csv"),
                      "\n".join(correlation_lines(correlations)) + "\n")
    atomic_write_text(os.path.join(args.out, "case_stats.csv"),
                      "\n".join(case_stat_lines(stats)) + "\n")
    config_doc = {"bundles": list(args.bundle), "max_shift": args.max_shift}
    write_manifest(args.out, argv, config_doc, None, "complete")
    print(f"wrote correlations for {len(datasets)} countries to {args.out}")
    return 0


def _finish_grid_run(args, argv, cfg: RunConfig, report: ErrorReport,
                     datasets) -> int:
    paths = emit_report(report, args.out)
    status = "complete" if not report.skipped else "partial"
    write_manifest(args.out, argv, config_to_dict(cfg), cfg.seed, status, {
        "rows": len(report.rows), "skipped_cells": len(report.skipped),
        "countries": [ds.country for ds in datasets]})
    print(f"wrote {paths['rows']} ({len(report.rows)} rows, "
          f"{len(report.skipped)} skipped cells)")
    if report.skipped:
        for country, model, t, j, reason in report.skipped:
            print(f"skipped country={country} model={model} T={t} j={j}: "
                  f"{reason}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args, argv) -> int:
    cfg = resolve_run_config(args)
    datasets = load_bundles(args.bundle)
    checkpoint_dir = args.checkpoints or os.path.join(args.out, "checkpoints")
    os.makedirs(args.out, exist_ok=True)
    try:
        report = rolling_evaluate(datasets, list(cfg.models), cfg.grid,
                                  cfg.eval_config(),
                                  checkpoint_dir=checkpoint_dir)
    except MobicastError as exc:
        write_manifest(args.out, argv, config_to_dict(cfg), cfg.seed,
                       "failed", {"error": str(exc)})
        raise
    return _finish_grid_run(args, argv, cfg, report, datasets)


def cmd_evaluate(args, argv) -> int:
    cfg = resolve_run_config(args)
    datasets = load_bundles(args.bundle)
    os.makedirs(args.out, exist_ok=True)
    try:
        if args.checkpoints:
            report = evaluate_from_checkpoints(
                datasets, list(cfg.models), cfg.grid, cfg.eval_config(),
                resolve_input(args.checkpoints))
        else:
            report = rolling_evaluate(datasets, list(cfg.models), cfg.grid,
                                      cfg.eval_config())
    except MobicastError as exc:
        write_manifest(args.out, argv, config_to_dict(cfg), cfg.seed,
                       "failed", {"error": str(exc)})
        raise
    return _finish_grid_run(args, argv, cfg, report, datasets)


def cmd_meta_train(args, argv) -> int:
    cfg = resolve_run_config(args)
    datasets = load_bundles(args.bundle)
    pool = [ds for ds in datasets if ds.country != args.target]
    if not pool:
        raise ContractError("meta-training needs at least one bundle for a "
                            "country other than the target")
    meta_cfg = dataclasses.replace(
        cfg.meta, d=cfg.train.d,
        seed=derive_seed(cfg.seed, "meta", args.target))
    model = build_model("MPNN", cfg.train)
    state = maml_meta_train(pool, model, meta_cfg)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.target}__MPNN_TL__meta.ckpt")
    save_meta_state(path, state, model, [ds.country for ds in pool], meta_cfg)
    write_manifest(args.out, argv, config_to_dict(cfg), cfg.seed, "complete",
                   {"target": args.target,
                    "pool": [ds.country for ds in pool]})
    print(f"wrote {path}")
    return 0


_SKIP_LINE = re.compile(
    r"^# skipped country=(?P<c>.*) model=(?P<m>\S+) "
    r"T=(?P<t>\d+) j=(?P<j>\d+): (?P<reason>.*)$")


def _parse_skip_line(line: str, path: str):
    m = _SKIP_LINE.match(line)
    if not m:
        raise DataError(f"{path}: unrecognized skip line {line!r}")
    return (m["c"], m["m"], int(m["t"]), int(m["j"]), m["reason"])


def cmd_report(args, argv) -> int:
    rows = []
    skipped = []
    for src in args.inputs:
        path = os.path.join(resolve_input(src), "rows.csv")
        got, skip_lines = load_report_rows(path)
        rows.extend(got)
        skipped.extend(_parse_skip_line(ln, path) for ln in skip_lines)
    paths = emit_report(ErrorReport(rows=rows, skipped=skipped), args.out)
    write_manifest(args.out, argv, {"inputs": list(args.inputs)}, None,
                   "complete", {"rows": len(rows),
                                "skipped_cells": len(skipped)})
    print(f"merged {len(args.inputs)} reports into {paths['rows']}")
    return 0


# ---------------------------------------------------------------- parser

def _add_run_flags(p: argparse.ArgumentParser, with_models: bool = True,
                   with_grid: bool = True) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="JSON run configuration (unknown keys rejected)")
    p.add_argument("--seed", type=int, default=None,
                   help="global seed (default 0)")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel grid cells (default 1)")
    if with_models:
        p.add_argument("--model", action="append", metavar="NAME",
                       help="model to run, repeatable; one of "
                            + ", ".join(MODEL_NAMES))
    if with_grid:
        p.add_argument("--t", type=int, default=None,
                       help="single anchor day T")
        p.add_argument("--t-start", type=int, default=None,
                       help="first anchor day (default 14)")
        p.add_argument("--t-end", type=int, default=None,
                       help="last anchor day (default: data end)")
        p.add_argument("--dt", type=int, default=None,
                       help="forecast horizons 1..dt (default 14)")
        p.add_argument("--horizon", action="append", type=int, metavar="J",
                       help="explicit horizon, repeatable (overrides --dt)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobicast",
        description="Forecast daily epidemic case counts per region from "
                    "inter-region mobility graphs.",
        epilog=f"Relative bundle paths resolve against ${DATA_DIR_ENV} "
               f"when it is set.")
    parser.add_argument("--version", action="version",
                        version=f"mobicast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("ingest", help="build a dataset bundle from raw CSVs")
    p.add_argument("--country", required=True)
    p.add_argument("--cases", required=True, metavar="CSV",
                   help="date,region,new_cases")
    p.add_argument("--mobility", required=True, metavar="CSV",
                   help="date[,time_of_day],origin,destination,count")
    p.add_argument("--regions-file", required=True, metavar="FILE",
                   help="region ids, one per line")
    p.add_argument("--region-map", metavar="CSV",
                   help="source_name,region_id renames")
    p.add_argument("--min-total-cases", type=int, default=10,
                   help="drop regions below this case total (default 10)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("synth", help="generate seeded synthetic bundles")
    p.add_argument("--regions", type=int, default=30)
    p.add_argument("--days", type=int, default=90)
    p.add_argument("--countries", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-rate", type=float, default=1.25)
    p.add_argument("--self-loop", type=float, default=3.0)
    p.add_argument("--underreporting", type=float, default=0.5)
    p.add_argument("--no-jitter", action="store_true")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("correlate",
                       help="mobility/case shift correlations and case stats")
    p.add_argument("--bundle", action="append", required=True, metavar="DIR")
    p.add_argument("--max-shift", type=int, default=14)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(handler=cmd_correlate)

    p = sub.add_parser("train",
                       help="train the grid, write checkpoints and a report")
    p.add_argument("--bundle", action="append", required=True, metavar="DIR")
    p.add_argument("--checkpoints", metavar="DIR",
                   help="checkpoint directory (default OUT/checkpoints)")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("meta-train",
                       help="meta-train a shared initialization for a target "
                            "country from the other bundles")
    p.add_argument("--bundle", action="append", required=True, metavar="DIR")
    p.add_argument("--target", required=True, metavar="COUNTRY",
                   help="country the initialization is for (its bundle, if "
                        "listed, is excluded from the pool)")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_run_flags(p, with_models=False, with_grid=False)
    p.set_defaults(handler=cmd_meta_train)

    p = sub.add_parser("evaluate",
                       help="score the grid from checkpoints, or retrain "
                            "in place when no checkpoint directory is given")
    p.add_argument("--bundle", action="append", required=True, metavar="DIR")
    p.add_argument("--checkpoints", metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_run_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="merge report directories into one")
    p.add_argument("inputs", nargs="+", metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args, argv)
    except MobicastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
