"""Rolling-origin evaluation: the (T, horizon) protocol driver, error and
correlation metrics, and CSV/JSON report emission."""

from __future__ import annotations

import concurrent.futures
import json
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .baselines import ar_fit, ar_predict, avg_predict, avg_window_predict, last_day_predict
from .dataio import CountryDataset
from .errors import CheckpointError, ContractError, DataError, InsufficientDataError
from .graphs import assemble_samples
from .meta import MetaConfig, maml_meta_train, save_meta_state, tl_base_train
from .models import BaselineLSTMModel, MPNNLSTMModel, MPNNModel
from .rng import derive_seed
from .train import (
    PROTOCOL_START_DAY,
    TrainConfig,
    load_checkpoint,
    make_splits,
    predict,
    save_checkpoint,
    train_model,
)

MODEL_NAMES = ("AVG", "AVG_WINDOW", "LAST_DAY", "AR", "LSTM", "MPNN",
               "MPNN_LSTM", "MPNN_TL", "TL_BASE")
BASELINE_MODELS = frozenset({"AVG", "AVG_WINDOW", "LAST_DAY", "AR"})
SUMMARY_RANGES = ((1, 3), (1, 7), (1, 14))


@dataclass(frozen=True)
class ProtocolGrid:
    """Rolling anchors T and horizons to evaluate; every (T, j) with
    T + j within the data is one independently trained cell."""
    t_start: int = PROTOCOL_START_DAY
    t_end: Optional[int] = None   # inclusive; capped at T_total - 1
    dt: int = 14
    horizons: Optional[tuple] = None  # explicit horizon set, overrides 1..dt

    def __post_init__(self):
        if self.t_start < PROTOCOL_START_DAY:
            raise ContractError(
                f"t_start must be >= {PROTOCOL_START_DAY}, got {self.t_start}")
        if self.t_end is not None and self.t_end < self.t_start:
            raise ContractError("t_end must be >= t_start")
        if self.dt < 1:
            raise ContractError(f"dt must be >= 1, got {self.dt}")
        if self.horizons is not None:
            hs = tuple(self.horizons)
            if not hs or any(j < 1 for j in hs) or len(set(hs)) != len(hs):
                raise ContractError("horizons must be distinct and >= 1")
            object.__setattr__(self, "horizons", tuple(sorted(hs)))

    def horizon_values(self) -> tuple:
        return self.horizons if self.horizons is not None else tuple(
            range(1, self.dt + 1))

    def cells(self, t_total: int) -> list:
        """All (t, j) pairs of this grid whose target day fits in t_total."""
        t_hi = t_total - 1 if self.t_end is None else min(self.t_end, t_total - 1)
        return [(t, j) for t in range(self.t_start, t_hi + 1)
                for j in self.horizon_values() if t + j <= t_total]


@dataclass(frozen=True)
class EvalConfig:
    train: TrainConfig = TrainConfig()
    meta: MetaConfig = MetaConfig()
    seed: int = 0
    jobs: int = 1
    ar_order: int = 7
    ar_differencing: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ContractError(f"jobs must be >= 1, got {self.jobs}")
        if self.ar_order < 1 or self.ar_differencing not in (0, 1):
            raise ContractError("ar_order must be >= 1 and ar_differencing 0 or 1")


@dataclass(frozen=True)
class ReportRow:
    country: str
    model: str
    t: int
    horizon: int
    region: str
    prediction: float
    actual: float

    @property
    def abs_error(self) -> float:
        return abs(self.prediction - self.actual)


@dataclass
class ErrorReport:
    rows: list
    skipped: list                      # (country, model, t, j, reason)
    correlations: Optional[list] = None  # (country, region, shift, value|None)
    case_stats: Optional[list] = None    # (country, day, date, mean, std, max_diff)


# ---------------------------------------------------------------- metrics

def error_metric(rows) -> float:
    """Mean absolute error over all (region, test day) entries."""
    rows = list(rows)
    if not rows:
        raise ContractError("error_metric of an empty row set")
    return float(np.mean([r.abs_error for r in rows]))


def per_horizon_errors(rows) -> dict:
    """(model, horizon) -> mean absolute error."""
    groups = {}
    for r in rows:
        groups.setdefault((r.model, r.horizon), []).append(r.abs_error)
    return {key: float(np.mean(vals)) for key, vals in sorted(groups.items())}


def range_summary(rows, ranges=SUMMARY_RANGES) -> dict:
    """Per-model mean error over horizon ranges, keyed like "1-14".

    Each range averages over every available row whose horizon falls inside
    it, so horizons contribute in proportion to their completed cells.
    """
    out = {}
    for model in sorted({r.model for r in rows}):
        entry = {}
        for lo, hi in ranges:
            in_range = [r for r in rows
                        if r.model == model and lo <= r.horizon <= hi]
            if in_range:
                entry[f"{lo}-{hi}"] = error_metric(in_range)
        out[model] = entry
    return out


@dataclass
class RelativeErrorResult:
    per_region: dict   # (country, region) -> ratio, or None if all windows skipped
    pooled: float
    terms: int
    skipped: int       # windows dropped for zero actual cases


def relative_error(rows, w: int = 5) -> RelativeErrorResult:
    """Deviation of w-day predicted case sums from actual sums, per region.

    At every anchor T carrying all horizons 1..w, the w predictions are
    summed and compared with the actual sum; windows with zero actual cases
    are skipped and counted.  Anchors missing any of the w horizons do not
    form windows.
    """
    rows = list(rows)
    if w < 1:
        raise ContractError(f"window must be >= 1, got {w}")
    if not rows:
        raise ContractError("relative_error of an empty row set")
    models = {r.model for r in rows}
    if len(models) != 1:
        raise ContractError(f"rows must come from one model, got {sorted(models)}")
    table = {}
    for r in rows:
        table.setdefault((r.country, r.region), {}).setdefault(r.t, {})[
            r.horizon] = (r.prediction, r.actual)
    per_region = {}
    pooled_terms = []
    skipped = 0
    for key in sorted(table):
        terms = []
        complete = 0
        for t in sorted(table[key]):
            by_horizon = table[key][t]
            if any(h not in by_horizon for h in range(1, w + 1)):
                continue
            complete += 1
            predicted = sum(by_horizon[h][0] for h in range(1, w + 1))
            actual = sum(by_horizon[h][1] for h in range(1, w + 1))
            if actual == 0:
                skipped += 1
                continue
            terms.append(abs(predicted - actual) / actual)
        if terms:
            per_region[key] = float(np.mean(terms))
            pooled_terms.extend(terms)
        elif complete:
            per_region[key] = None
    if not pooled_terms:
        raise DataError("relative error undefined: every window was skipped "
                        "or incomplete")
    return RelativeErrorResult(per_region=per_region,
                               pooled=float(np.mean(pooled_terms)),
                               terms=len(pooled_terms), skipped=skipped)


def pearson_shift_correlation(m, c, s: int):
    """Pearson correlation of movement m against cases c shifted s days later.

    Returns None (a missing value, not zero) when either window is constant.
    """
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if s < 0:
        raise ContractError(f"shift must be >= 0, got {s}")
    length = min(m.size, c.size)
    if length - s < 2:
        raise ContractError(f"need more than {s + 1} days for shift {s}, "
                            f"have {length}")
    x = m[:length - s]
    y = c[s:length]
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt(np.sum(dx * dx)))
    sy = float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.sum(dx * dy) / (sx * sy))


def mobility_totals(dataset: CountryDataset) -> np.ndarray:
    """Per-region daily movement volume: incoming + outgoing with the
    within-region loop counted once; shape (n, days)."""
    out = np.empty((dataset.n, dataset.t_total))
    for day in range(1, dataset.t_total + 1):
        m = dataset.mobility_on(day)
        out[:, day - 1] = m.sum(axis=1) + m.sum(axis=0) - np.diag(m)
    return out


def correlation_table(dataset: CountryDataset, shifts=tuple(range(1, 15))) -> list:
    """(country, region, shift, correlation|None) rows over the given shifts."""
    totals = mobility_totals(dataset)
    cases = dataset.case_window(dataset.t_total, dataset.t_total)
    rows = []
    for v, region in enumerate(dataset.regions):
        for s in shifts:
            rows.append((dataset.country, region, s,
                         pearson_shift_correlation(totals[v], cases[v], s)))
    return rows


def case_stats_table(dataset: CountryDataset) -> list:
    """(country, day, date, mean, std, max_diff) per day across regions."""
    rows = []
    for day in range(1, dataset.t_total + 1):
        vals = dataset.cases_on(day)
        rows.append((dataset.country, day, dataset.dates[day - 1],
                     float(vals.mean()), float(vals.std()),
                     float(vals.max() - vals.min())))
    return rows


# ------------------------------------------------------- protocol driver

def build_model(name: str, cfg: TrainConfig):
    if name in ("MPNN", "MPNN_TL", "TL_BASE"):
        return MPNNModel(d=cfg.d, k_layers=cfg.k_layers, hidden=cfg.hidden,
                         dropout_rate=cfg.dropout)
    if name == "MPNN_LSTM":
        return MPNNLSTMModel(d=cfg.d, k_layers=cfg.k_layers, hidden=cfg.hidden,
                             dropout_rate=cfg.dropout, seq_len=cfg.seq_len,
                             feature_mode=cfg.feature_mode)
    if name == "LSTM":
        return BaselineLSTMModel(d=cfg.d, hidden=cfg.hidden)
    raise ContractError(f"unknown trainable model {name!r}")


def variant_for(name: str) -> str:
    return "sequence" if name == "MPNN_LSTM" else "static"


def checkpoint_name(country: str, model: str, t: int, j: int) -> str:
    return f"{country}__{model}__T{t}_j{j}.ckpt"


def _baseline_cell(name: str, dataset: CountryDataset, t: int, j: int,
                   cfg: EvalConfig) -> np.ndarray:
    history = dataset.case_window(t, t)
    out = np.empty(dataset.n)
    for v in range(dataset.n):
        series = history[v]
        if name == "AVG":
            out[v] = avg_predict(series, j)
        elif name == "AVG_WINDOW":
            out[v] = avg_window_predict(series, d=cfg.train.d, j=j)
        elif name == "LAST_DAY":
            out[v] = last_day_predict(series, j)
        else:
            fit = ar_fit(series, p=cfg.ar_order,
                         differencing=cfg.ar_differencing)
            out[v] = ar_predict(fit, series, j=j)
    return out


# Worker-process context for parallel grid evaluation; populated once per
# worker by the pool initializer so tasks stay tiny.
_CELL_CTX = None


def _init_cell_worker(payload):
    global _CELL_CTX
    _CELL_CTX = payload


@dataclass(frozen=True)
class _CellContext:
    datasets: tuple
    config: EvalConfig
    shared_params: dict      # country -> ModelState of the transfer initialization
    shared_errors: dict      # country -> why no transfer initialization exists
    checkpoint_dir: Optional[str]

    def dataset(self, country: str) -> CountryDataset:
        for ds in self.datasets:
            if ds.country == country:
                return ds
        raise ContractError(f"unknown country {country!r}")


def _run_cell(task):
    return evaluate_cell(_CELL_CTX, *task)


def evaluate_cell(ctx: _CellContext, country: str, model_name: str, t: int,
                  j: int):
    """One protocol cell: train/fit, predict day t+j, return rows or a skip.

    Returns (task, rows, None) on success and (task, None, reason) when the
    cell lacks the data its model needs.
    """
    task = (country, model_name, t, j)
    dataset = ctx.dataset(country)
    cfg = ctx.config
    try:
        if model_name in BASELINE_MODELS:
            preds = _baseline_cell(model_name, dataset, t, j, cfg)
            actual = dataset.cases_on(t + j)
        else:
            cell_seed = derive_seed(cfg.seed, country, t, j)
            train_cfg = replace(cfg.train, seed=cell_seed)
            model = build_model(model_name, cfg.train)
            if model_name == "TL_BASE":
                ckpt = tl_base_train(list(ctx.datasets), country, t, j, model,
                                     train_cfg)
                splits = make_splits(dataset, t, j, cfg.train.d)
            elif model_name == "MPNN_TL":
                shared = ctx.shared_params.get(country)
                if shared is None:
                    return task, None, ctx.shared_errors.get(
                        country, "transfer initialization needs at least "
                                 "one other country")
                splits = make_splits(dataset, t, j, cfg.train.d)
                ckpt = train_model(splits, model, train_cfg, init_state=shared)
            else:
                splits = make_splits(dataset, t, j, cfg.train.d,
                                     variant=variant_for(model_name),
                                     s=cfg.train.seq_len)
                ckpt = train_model(splits, model, train_cfg)
            preds = predict(ckpt, splits.test)
            actual = np.asarray(splits.test.target, dtype=np.float64).reshape(-1)
            if ctx.checkpoint_dir is not None:
                path = os.path.join(ctx.checkpoint_dir,
                                    checkpoint_name(country, model_name, t, j))
                save_checkpoint(path, ckpt, extra_meta={
                    "country": country, "model_name": model_name,
                    "t": t, "horizon": j, "cell_seed": cell_seed})
    except DataError as exc:  # includes InsufficientDataError
        return task, None, str(exc)
    rows = [ReportRow(country, model_name, t, j, dataset.regions[v],
                      float(preds[v]), float(actual[v]))
            for v in range(dataset.n)]
    return task, rows, None


def _check_request(datasets, models):
    if not datasets:
        raise ContractError("evaluation needs at least one country")
    names = [ds.country for ds in datasets]
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate countries in {names}")
    for name in models:
        if name not in MODEL_NAMES:
            raise ContractError(f"unknown model {name!r}; choose from "
                                f"{', '.join(MODEL_NAMES)}")
    if not models:
        raise ContractError("evaluation needs at least one model")


def _grid_tasks(datasets, models, grid):
    tasks = []
    for ds in datasets:
        cells = grid.cells(ds.t_total)
        for model in models:
            tasks.extend((ds.country, model, t, j) for t, j in cells)
    if not tasks:
        raise ContractError("protocol grid is empty for every requested country")
    return tasks


def _transfer_initializations(datasets, models, config, checkpoint_dir):
    """Meta-train one shared initialization per target country (lazily:
    only when the transfer model was requested and foreigners exist).
    Returns (states, errors): a country missing from both had no foreign
    countries; one in errors had foreigners but no usable task grid."""
    shared = {}
    errors = {}
    if "MPNN_TL" not in models:
        return shared, errors
    meta_cfg_base = replace(config.meta, d=config.train.d)
    for target in datasets:
        foreign = [ds for ds in datasets if ds.country != target.country]
        if not foreign:
            continue
        meta_cfg = replace(meta_cfg_base,
                           seed=derive_seed(config.seed, "meta", target.country))
        model = build_model("MPNN", config.train)
        try:
            state = maml_meta_train(foreign, model, meta_cfg)
        except InsufficientDataError as exc:
            errors[target.country] = f"meta-training failed: {exc}"
            continue
        shared[target.country] = state
        if checkpoint_dir is not None:
            save_meta_state(
                os.path.join(checkpoint_dir,
                             f"{target.country}__MPNN_TL__meta.ckpt"),
                state, model, [ds.country for ds in foreign], meta_cfg)
    return shared, errors


def rolling_evaluate(datasets, models, grid: ProtocolGrid, config: EvalConfig,
                     checkpoint_dir: Optional[str] = None) -> ErrorReport:
    """Train and score every requested (country, model, T, horizon) cell.

    Each cell trains its own model with a seed derived from (seed, country,
    T, horizon), so cells are reproducible independently of execution order;
    `config.jobs` > 1 spreads cells over worker processes.  Cells without
    enough data are skipped and recorded, not failed.
    """
    _check_request(datasets, models)
    tasks = _grid_tasks(datasets, models, grid)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
    shared, shared_errors = _transfer_initializations(datasets, models, config,
                                                      checkpoint_dir)
    ctx = _CellContext(datasets=tuple(datasets), config=config,
                       shared_params=shared, shared_errors=shared_errors,
                       checkpoint_dir=checkpoint_dir)
    if config.jobs == 1:
        results = [evaluate_cell(ctx, *task) for task in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(
                max_workers=config.jobs, initializer=_init_cell_worker,
                initargs=(ctx,)) as pool:
            results = list(pool.map(_run_cell, tasks, chunksize=1))
    rows = []
    skipped = []
    for task, cell_rows, reason in results:
        if cell_rows is None:
            skipped.append((*task, reason))
        else:
            rows.extend(cell_rows)
    return ErrorReport(rows=rows, skipped=skipped)


def evaluate_from_checkpoints(datasets, models, grid: ProtocolGrid,
                              config: EvalConfig,
                              checkpoint_dir: str) -> ErrorReport:
    """Score the grid from previously saved checkpoints, without retraining.

    Baseline families are recomputed (they have no checkpoints); every
    trainable cell must have its checkpoint file present, and a missing one
    is an error naming the cell.
    """
    _check_request(datasets, models)
    tasks = _grid_tasks(datasets, models, grid)
    ctx = _CellContext(datasets=tuple(datasets), config=config,
                       shared_params={}, shared_errors={}, checkpoint_dir=None)
    rows = []
    skipped = []
    for task in tasks:
        country, model_name, t, j = task
        dataset = ctx.dataset(country)
        if model_name in BASELINE_MODELS:
            _, cell_rows, reason = evaluate_cell(ctx, *task)
            if cell_rows is None:
                skipped.append((*task, reason))
            else:
                rows.extend(cell_rows)
            continue
        path = os.path.join(checkpoint_dir,
                            checkpoint_name(country, model_name, t, j))
        if not os.path.exists(path):
            raise CheckpointError(
                f"missing checkpoint for cell country={country} "
                f"model={model_name} T={t} j={j}: {path}")
        ckpt = load_checkpoint(path)
        try:
            test = assemble_samples(dataset, config.train.d, j, t_end=t,
                                    variant=variant_for(model_name),
                                    s=config.train.seq_len,
                                    include_test=True)[-1]
        except DataError as exc:
            skipped.append((*task, str(exc)))
            continue
        preds = predict(ckpt, test)
        actual = np.asarray(test.target, dtype=np.float64).reshape(-1)
        rows.extend(ReportRow(country, model_name, t, j, dataset.regions[v],
                              float(preds[v]), float(actual[v]))
                    for v in range(dataset.n))
    return ErrorReport(rows=rows, skipped=skipped)


# ---------------------------------------------------------------- reports

def _float_cell(x) -> str:
    return repr(float(x))


def atomic_write_text(path: str, text: str) -> None:
    """Write a report artifact through a temp file so readers never see halves."""
    tmp = path + ".tmp"
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write report file {path}: {exc}") from exc


def correlation_lines(correlations) -> list:
    """correlations.csv lines; regions are country-qualified, missing values
    are empty cells."""
    lines = ["region,shift,pearson"]
    for country, region, shift, value in correlations or []:
        cell = "" if value is None else _float_cell(value)
        lines.append(f"{country}/{region},{shift},{cell}")
    return lines


def case_stat_lines(case_stats) -> list:
    lines = ["country,day,date,mean,std,max_diff"]
    lines.extend(
        f"{country},{day},{date},{_float_cell(mean)},{_float_cell(std)},"
        f"{_float_cell(diff)}"
        for country, day, date, mean, std, diff in case_stats or [])
    return lines


def emit_report(report: ErrorReport, out_dir: str) -> dict:
    """Write rows.csv, summary.json, correlations.csv, and case_stats.csv.

    Output is byte-deterministic for a fixed report.  Skipped cells appear
    as comment lines above the rows.csv header; missing correlations are
    empty cells; absent correlation/case-stat sections give header-only
    files.  Returns the path of each artifact.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out_dir}: {exc}") from exc
    paths = {}

    lines = [f"# skipped country={c} model={m} T={t} j={j}: {reason}"
             for c, m, t, j, reason in report.skipped]
    lines.append("country,model,T,horizon,region,prediction,actual,abs_error")
    lines.extend(
        f"{r.country},{r.model},{r.t},{r.horizon},{r.region},"
        f"{_float_cell(r.prediction)},{_float_cell(r.actual)},"
        f"{_float_cell(r.abs_error)}"
        for r in report.rows)
    paths["rows"] = os.path.join(out_dir, "rows.csv")
    atomic_write_text(paths["rows"], "\n".join(lines) + "\n")

    summary = range_summary(report.rows) if report.rows else {}
    paths["summary"] = os.path.join(out_dir, "summary.json")
    atomic_write_text(paths["summary"],
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")

    paths["correlations"] = os.path.join(out_dir, "correlations.csv")
    atomic_write_text(paths["correlations"],
                      "\n".join(correlation_lines(report.correlations)) + "\n")

    paths["case_stats"] = os.path.join(out_dir, "case_stats.csv")
    atomic_write_text(paths["case_stats"],
                      "\n".join(case_stat_lines(report.case_stats)) + "\n")
    return paths


def load_report_rows(path: str):
    """Rows and skip lines back from an emitted rows.csv."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read report file {path}: {exc}") from exc
    skipped_lines = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    if not body or body[0] != "country,model,T,horizon,region,prediction,actual,abs_error":
        raise DataError(f"{path}: not a rows.csv report")
    rows = []
    for ln in body[1:]:
        parts = ln.split(",")
        if len(parts) != 8:
            raise DataError(f"{path}: malformed row {ln!r}")
        rows.append(ReportRow(parts[0], parts[1], int(parts[2]), int(parts[3]),
                              parts[4], float(parts[5]), float(parts[6])))
    return rows, skipped_lines
