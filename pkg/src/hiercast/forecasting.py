"""Per-series AR(p) base forecasts and the external-forecast import path.

Each series gets its own autoregressive model fitted by least squares on
the training window, with the lag order chosen by blocked cross-validation.
Forecasts are one-step-ahead and teacher-forced: the prediction for time t
always conditions on the true values at t-1..t-p, never on earlier
predictions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import FoldSpec, SeriesPanel
from .errors import ContractError, InputError

__all__ = [
    "ARModel",
    "ForecastSet",
    "ForecasterCache",
    "SOURCE_INTERNAL",
    "SOURCE_EXTERNAL",
    "DEFAULT_P_GRID",
    "fit_ar",
    "one_step_forecasts",
    "select_lag",
    "import_forecasts",
    "feasible_lags",
    "build_forecasters",
    "forecast_panel",
]

SOURCE_INTERNAL = "internal-AR"
SOURCE_EXTERNAL = "external-file"

DEFAULT_P_GRID = (1, 2, 4, 8)

RIDGE_JITTER = 1e-8


@dataclass(frozen=True)
class ARModel:
    """AR(p) fit for one series: y_t ~ intercept + sum_k coef[k] * y_{t-1-k}."""

    p: int
    coefficients: np.ndarray
    intercept: float
    series_index: int

    def __post_init__(self):
        if self.p < 1:
            raise ContractError(f"lag order must be >= 1, got {self.p}")
        if self.coefficients.shape != (self.p,):
            raise ContractError("coefficient count does not match lag order")


@dataclass(frozen=True)
class ForecastSet:
    """One-step-ahead forecasts for every series over a time window."""

    values: np.ndarray
    window: range
    source: str

    def __post_init__(self):
        if self.values.shape[1] != len(self.window):
            raise ContractError("forecast matrix width does not match window")
        self.values.setflags(write=False)


def _usable_targets(train_window, p: int, n_steps: int) -> np.ndarray:
    """Targets t in the window whose lags t-1..t-p are also all in the window."""
    in_window = np.zeros(n_steps, dtype=bool)
    idx = np.fromiter((int(t) for t in train_window), dtype=int)
    in_window[idx] = True
    ok = in_window.copy()
    for lag in range(1, p + 1):
        shifted = np.zeros(n_steps, dtype=bool)
        shifted[lag:] = in_window[:-lag]
        ok &= shifted
    return np.flatnonzero(ok)


def _lag_matrix(series: np.ndarray, targets: np.ndarray, p: int) -> np.ndarray:
    cols = [series[targets - 1 - k] for k in range(p)]
    return np.column_stack(cols)


def fit_ar(series: np.ndarray, train_window, p: int) -> ARModel:
    """Least-squares AR(p) fit on the usable rows of a (possibly gapped) window.

    Rows whose lags would cross a gap in the window are dropped. The normal
    equations get a 1e-8 ridge on the Gram diagonal so constant series still
    produce a well-posed, deterministic fit.
    """
    series = np.asarray(series, dtype=float)
    if p < 1:
        raise ContractError(f"lag order must be >= 1, got {p}")
    if not np.all(np.isfinite(series)):
        raise ContractError("series contains non-finite values")

    targets = _usable_targets(train_window, p, series.shape[0])
    if targets.size < p + 2:
        raise ContractError(
            f"AR({p}) needs at least {p + 2} usable rows, window provides {targets.size}"
        )

    X = np.column_stack([np.ones(targets.size), _lag_matrix(series, targets, p)])
    y = series[targets]
    gram = X.T @ X
    gram[np.diag_indices_from(gram)] += RIDGE_JITTER
    beta = np.linalg.solve(gram, X.T @ y)
    return ARModel(
        p=p,
        coefficients=beta[1:],
        intercept=float(beta[0]),
        series_index=-1,
    )


def one_step_forecasts(model: ARModel, series: np.ndarray, window) -> np.ndarray:
    """Teacher-forced predictions for each t in the window from true lags."""
    series = np.asarray(series, dtype=float)
    if window.start < model.p:
        raise ContractError(
            f"window starts at {window.start}, AR({model.p}) needs {model.p} preceding values"
        )
    if window.stop > series.shape[0]:
        raise ContractError("window extends past the end of the series")
    targets = np.arange(window.start, window.stop)
    if targets.size == 0:
        return np.empty(0)
    lags = _lag_matrix(series, targets, model.p)
    return model.intercept + lags @ model.coefficients


def feasible_lags(p_grid, folds: FoldSpec, n_steps: int) -> tuple[int, ...]:
    """Subset of the grid fittable on every fold's training window."""
    keep = []
    for p in sorted(set(int(p) for p in p_grid)):
        ok = all(
            _usable_targets(fold.train_times(), p, n_steps).size >= p + 2
            for fold in folds.folds
        )
        if ok:
            keep.append(p)
    return tuple(keep)


def select_lag(panel: SeriesPanel, series_index: int, p_grid, folds: FoldSpec) -> int:
    """Pick the lag order minimizing mean validation MAE across folds.

    Ties go to the smaller p.
    """
    grid = sorted(set(int(p) for p in p_grid))
    if not grid:
        raise ContractError("empty lag grid")
    series = panel.values[series_index]

    best_p = None
    best_score = None
    for p in grid:
        fold_maes = []
        for fold in folds.folds:
            model = fit_ar(series, fold.train_times(), p)
            val = fold.val_range
            start = max(val.start, p)
            if start >= val.stop:
                continue
            preds = one_step_forecasts(model, series, range(start, val.stop))
            fold_maes.append(float(np.mean(np.abs(preds - series[start:val.stop]))))
        if not fold_maes:
            raise ContractError(
                f"lag {p} leaves no scorable validation steps in any fold"
            )
        score = float(np.mean(fold_maes))
        if best_score is None or score < best_score:
            best_p, best_score = p, score
    return best_p


@dataclass(frozen=True)
class ForecasterCache:
    """AR models for the full training window and refits for every CV fold.

    fold_models[f][i] is the model for series i fitted on fold f's training
    window, so downstream validation never sees a model trained on its own
    validation steps.
    """

    selected_p: tuple[int, ...]
    full_models: tuple[ARModel, ...]
    fold_models: tuple[tuple[ARModel, ...], ...]
    folds: FoldSpec

    @property
    def max_p(self) -> int:
        return max(self.selected_p)


def build_forecasters(panel: SeriesPanel, p_grid=DEFAULT_P_GRID, folds: FoldSpec = None) -> ForecasterCache:
    """Select a lag per series, then fit full-window and per-fold models."""
    from .dataset import blocked_folds

    if folds is None:
        folds = blocked_folds(panel, k=min(10, panel.train_len // 2))
    grid = feasible_lags(p_grid, folds, panel.n_steps)
    if not grid:
        raise ContractError(
            f"no lag in {sorted(set(p_grid))} is fittable on the fold train windows"
        )

    selected = []
    full_models = []
    per_fold: list[list[ARModel]] = [[] for _ in folds.folds]
    train_times = np.arange(panel.train_len)
    for i in range(panel.hierarchy.n_series):
        p = select_lag(panel, i, grid, folds)
        selected.append(p)
        series = panel.values[i]
        m = fit_ar(series, train_times, p)
        full_models.append(ARModel(m.p, m.coefficients, m.intercept, i))
        for f, fold in enumerate(folds.folds):
            mf = fit_ar(series, fold.train_times(), p)
            per_fold[f].append(ARModel(mf.p, mf.coefficients, mf.intercept, i))

    return ForecasterCache(
        selected_p=tuple(selected),
        full_models=tuple(full_models),
        fold_models=tuple(tuple(ms) for ms in per_fold),
        folds=folds,
    )


def forecast_panel(models, panel: SeriesPanel, window) -> ForecastSet:
    """Teacher-forced forecasts for all series over one window."""
    window = range(window.start, window.stop)
    n = panel.hierarchy.n_series
    if len(models) != n:
        raise ContractError(f"{len(models)} models for {n} series")
    out = np.empty((n, len(window)))
    for i, model in enumerate(models):
        out[i] = one_step_forecasts(model, panel.values[i], window)
    return ForecastSet(values=out, window=window, source=SOURCE_INTERNAL)


def import_forecasts(path, panel: SeriesPanel) -> ForecastSet:
    """Read `series_id,timestamp,forecast` rows (raw units) into a ForecastSet.

    The covered timestamps must form one contiguous block of the panel's
    timeline, identical for every series; values are divided by the panel's
    global scale on the way in.
    """
    h = panel.hierarchy
    per_series: dict[str, dict[str, float]] = {}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read forecast file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["series_id", "timestamp", "forecast"]
        if header is None or [f.strip() for f in header] != expected:
            raise InputError(f"{path}: expected header {','.join(expected)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            sid, ts, raw = (f.strip() for f in row)
            try:
                value = float(raw)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad forecast {raw!r}") from None
            if not np.isfinite(value):
                raise InputError(f"{path}:{lineno}: non-finite forecast")
            if ts in per_series.setdefault(sid, {}):
                raise InputError(f"{path}:{lineno}: duplicate ({sid}, {ts})")
            per_series[sid][ts] = value

    missing = [s for s in h.nodes if s not in per_series]
    if missing:
        raise InputError(f"forecast file missing series: {', '.join(map(repr, missing))}")
    extra = sorted(set(per_series) - set(h.nodes))
    if extra:
        raise InputError(f"forecast file has unknown series: {', '.join(map(repr, extra))}")

    ts_index = {ts: t for t, ts in enumerate(panel.timestamps)}
    covered = None
    for sid, by_ts in per_series.items():
        unknown = sorted(set(by_ts) - set(ts_index))
        if unknown:
            raise InputError(f"series {sid!r}: timestamps not in panel: {unknown}")
        idx = sorted(ts_index[ts] for ts in by_ts)
        if covered is None:
            covered = idx
        elif idx != covered:
            raise InputError(f"series {sid!r} covers a different window than the others")
    if covered != list(range(covered[0], covered[-1] + 1)):
        raise InputError("forecast timestamps do not form a contiguous window")

    window = range(covered[0], covered[-1] + 1)
    out = np.empty((h.n_series, len(window)))
    for i, sid in enumerate(h.nodes):
        by_ts = per_series[sid]
        for t in window:
            out[i, t - window.start] = by_ts[panel.timestamps[t]]
    out /= panel.global_scale
    return ForecastSet(values=out, window=window, source=SOURCE_EXTERNAL)
