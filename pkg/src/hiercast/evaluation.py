"""Scoring, significance testing, the fold-based reconciler validation
protocol, and random hyperparameter search.

Overall scores pool the per-observation errors of every series at every
level; per-level tables restrict the same formulas to one level's series.
The validation protocol refits nothing on validation data: each fold uses
forecasting models fitted on that fold's training window only, and the
reconciler trains purely on training-window forecast/actual pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import t as _student_t

from .dataset import FoldSpec, SeriesPanel, naive_scale as panel_naive_scale
from .errors import ContractError
from .forecasting import ForecasterCache, forecast_panel
from .hierarchy import Hierarchy, summing_matrix
from .neural import (
    LOSS_MASE,
    LOSS_MLAE,
    LOSS_REG_MASE,
    EncoderConfig,
    loss as encoder_loss,
    reconcile,
    scale_factors,
    train,
)

__all__ = [
    "EvalReport",
    "HyperGrid",
    "SearchTrial",
    "METRIC_MASE",
    "METRIC_MLAE",
    "mase_score",
    "mlae_score",
    "per_level_scores",
    "pointwise_errors",
    "paired_t_test",
    "significance_stars",
    "cv_evaluate",
    "random_search",
    "build_report",
    "export_report",
    "write_search_log",
]

METRIC_MASE = "mase"
METRIC_MLAE = "mlae"


def _as_matrix(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.ndim != 2:
        raise ContractError(f"{name} must be 1-D or 2-D, got shape {out.shape}")
    return out


def _check_naive(q, n: int, exclude_zero_scale: bool):
    q = np.asarray(q, dtype=float)
    if q.shape != (n,):
        raise ContractError(f"naive errors must have {n} entries, got {q.shape}")
    zero = np.flatnonzero(q <= 0.0)
    if zero.size and not exclude_zero_scale:
        raise ContractError(
            f"zero naive error for series index {zero.tolist()}; these series "
            "are constant on the training window (pass exclude_zero_scale=True "
            "to drop them, or score with mlae)"
        )
    keep = np.flatnonzero(q > 0.0)
    if keep.size == 0:
        raise ContractError("every series has zero naive error")
    return q, keep


def mase_score(pred, actual, naive_scale, exclude_zero_scale: bool = False) -> float:
    """Mean over all (series, step) of absolute error over the naive error."""
    pred = _as_matrix(pred, "pred")
    actual = _as_matrix(actual, "actual")
    if pred.shape != actual.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    q, keep = _check_naive(naive_scale, pred.shape[0], exclude_zero_scale)
    err = np.abs(pred[keep] - actual[keep]) / q[keep][:, None]
    return float(err.mean())


def mlae_score(pred, actual) -> float:
    """Mean over all (series, step) of log(1 + absolute error)."""
    pred = _as_matrix(pred, "pred")
    actual = _as_matrix(actual, "actual")
    if pred.shape != actual.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    return float(np.log1p(np.abs(pred - actual)).mean())


def pointwise_errors(metric: str, pred, actual, naive_scale=None) -> np.ndarray:
    """Flat vector of per-(series, step) errors, the unit the t-test pairs on."""
    pred = _as_matrix(pred, "pred")
    actual = _as_matrix(actual, "actual")
    if pred.shape != actual.shape:
        raise ContractError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    err = np.abs(pred - actual)
    if metric == METRIC_MLAE:
        return np.log1p(err).ravel()
    if metric == METRIC_MASE:
        q, _ = _check_naive(naive_scale, pred.shape[0], exclude_zero_scale=False)
        return (err / q[:, None]).ravel()
    raise ContractError(f"unknown metric {metric!r}")


def per_level_scores(pred, actual, h: Hierarchy, naive_scale) -> dict[str, tuple[float, ...]]:
    """Overall formulas restricted to each level's series."""
    pred = _as_matrix(pred, "pred")
    actual = _as_matrix(actual, "actual")
    if pred.shape[0] != h.n_series:
        raise ContractError(f"expected {h.n_series} series, got {pred.shape[0]}")
    q = np.asarray(naive_scale, dtype=float)
    mase_rows = []
    mlae_rows = []
    for lv in range(h.n_levels):
        idx = list(h.level_members(lv))
        mase_rows.append(mase_score(pred[idx], actual[idx], q[idx]))
        mlae_rows.append(mlae_score(pred[idx], actual[idx]))
    return {METRIC_MASE: tuple(mase_rows), METRIC_MLAE: tuple(mlae_rows)}


def paired_t_test(errors_a, errors_b) -> tuple[float, float]:
    """Two-sided paired t-test on per-observation error vectors.

    Returns (t, p) for the differences a - b with K-1 degrees of freedom.
    Zero-variance differences give p = 0 when the mean is nonzero (the
    methods differ identically at every point) and t = 0, p = 1 when the
    vectors are equal.
    """
    a = np.asarray(errors_a, dtype=float).ravel()
    b = np.asarray(errors_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch: {a.shape} vs {b.shape}")
    k = a.size
    if k < 2:
        raise ContractError(f"need at least 2 paired observations, got {k}")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return float(np.inf if mean > 0 else -np.inf), 0.0
    t_stat = mean / (sd / np.sqrt(k))
    p = 2.0 * float(_student_t.sf(abs(t_stat), k - 1))
    return float(t_stat), min(p, 1.0)


def significance_stars(p: float) -> str:
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return ""


def cv_evaluate(
    config: EncoderConfig,
    panel: SeriesPanel,
    folds: FoldSpec,
    cache: ForecasterCache,
) -> float:
    """Mean validation score of one encoder configuration across folds.

    Per fold: base forecasts come from that fold's own forecasting models;
    the encoder trains on training-window samples whose forecast inputs
    involve no validation-window actuals (teacher forcing reads back max_p
    steps, so samples within max_p steps after the validation window are
    dropped); scoring uses the validation steps only. The per-series scale
    and naive-error statistics are computed on the fold's training window,
    never on validation data.
    """
    if cache.folds is not folds and cache.folds != folds:
        raise ContractError("forecaster cache was built for different folds")
    h = panel.hierarchy
    s_mat = summing_matrix(h)
    p_max = cache.max_p
    full_window = range(p_max, panel.train_len)

    scores = []
    for fi, fold in enumerate(folds.folds):
        fc = forecast_panel(cache.fold_models[fi], panel, full_window)
        val = fold.val_range
        train_times = [
            t
            for t in fold.train_times()
            if t >= p_max and not (val.start + 1 <= t <= val.stop - 1 + p_max)
        ]
        if not train_times:
            raise ContractError(
                f"fold {fi} leaves no usable training samples "
                f"(validation {val.start}..{val.stop - 1}, max lag {p_max})"
            )
        fold_train = fold.train_times()
        scale = scale_factors(panel, times=fold_train)
        naive = panel_naive_scale(panel, times=fold_train)
        enc = train(
            config, h, panel, fc,
            sample_times=train_times, scale=scale, naive=naive,
        )
        val_times = [t for t in val if t >= p_max]
        if not val_times:
            continue
        cols = [t - p_max for t in val_times]
        preds = reconcile(enc, s_mat, fc.values[:, cols])
        actual = panel.values[:, val_times]
        scores.append(encoder_loss(preds, actual, config.loss, naive))
    if not scores:
        raise ContractError("no fold produced a scorable validation window")
    return float(np.mean(scores))


@dataclass(frozen=True)
class HyperGrid:
    """Axes of the random hyperparameter search."""

    dropout: tuple = (0.0, 0.1, 0.2)
    learning_rate: tuple = (1e-3, 1e-4, 1e-5)
    weight_decay: tuple = (1e-1, 3e-2, 1e-2)
    epochs: tuple = (50, 100, 200, 500)
    hidden_layers: tuple = (0, 1, 2, 3)

    @property
    def size(self) -> int:
        return (
            len(self.dropout)
            * len(self.learning_rate)
            * len(self.weight_decay)
            * len(self.epochs)
            * len(self.hidden_layers)
        )


@dataclass(frozen=True)
class SearchTrial:
    trial: int
    dropout: float
    learning_rate: float
    weight_decay: float
    epochs: int
    hidden_layers: int
    score: float


def random_search(
    grid: HyperGrid,
    panel: SeriesPanel,
    folds: FoldSpec,
    cache: ForecasterCache,
    base_config: EncoderConfig = None,
    n: int = 100,
    seed: int = 0,
) -> tuple[EncoderConfig, tuple[SearchTrial, ...]]:
    """Draw n combinations uniformly with replacement and return the best.

    The winner minimizes the mean CV score; ties break toward fewer
    epochs, then fewer hidden layers, then the earlier draw. The full
    trial log is returned alongside.
    """
    if n < 1:
        raise ContractError(f"need at least one trial, got {n}")
    if base_config is None:
        base_config = EncoderConfig()
    rng = np.random.default_rng(seed)

    log: list[SearchTrial] = []
    best_key = None
    best_config = None
    for i in range(n):
        combo = {
            "dropout": grid.dropout[rng.integers(len(grid.dropout))],
            "learning_rate": grid.learning_rate[rng.integers(len(grid.learning_rate))],
            "weight_decay": grid.weight_decay[rng.integers(len(grid.weight_decay))],
            "epochs": int(grid.epochs[rng.integers(len(grid.epochs))]),
            "hidden_layers": int(grid.hidden_layers[rng.integers(len(grid.hidden_layers))]),
        }
        config = replace(base_config, **combo)
        score = cv_evaluate(config, panel, folds, cache)
        log.append(SearchTrial(trial=i, score=score, **combo))
        key = (score, combo["epochs"], combo["hidden_layers"])
        if best_key is None or key < best_key:
            best_key, best_config = key, config
    return best_config, tuple(log)


# --- reporting -------------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    """Scores for several reconciliation methods on one evaluation window."""

    methods: tuple[str, ...]
    overall: dict[str, dict[str, float]]
    levels: dict[str, dict[str, tuple[float, ...]]]
    level_counts: tuple[int, ...]
    proposed: str | None
    significance: dict[str, tuple] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)


def build_report(
    panel: SeriesPanel,
    predictions: dict[str, np.ndarray],
    window,
    proposed: str = None,
    metadata: dict = None,
) -> EvalReport:
    """Score every method on one window and test the proposed one.

    `predictions` maps method name to an (N, W) matrix aligned with
    `window`. When `proposed` names one of the methods and others exist,
    a paired two-sided t-test compares its per-observation errors with
    the best other method's, separately per metric.
    """
    if not predictions:
        raise ContractError("no predictions to evaluate")
    h = panel.hierarchy
    times = list(window)
    if not times or times[0] < 0 or times[-1] >= panel.n_steps:
        raise ContractError(f"window {window} outside the panel time range")
    actual = panel.values[:, times]
    naive = panel_naive_scale(panel)

    methods = tuple(predictions)
    overall: dict[str, dict[str, float]] = {}
    levels: dict[str, dict[str, tuple[float, ...]]] = {}
    for name, pred in predictions.items():
        pred = _as_matrix(pred, name)
        if pred.shape != actual.shape:
            raise ContractError(
                f"{name}: prediction shape {pred.shape} does not match window {actual.shape}"
            )
        overall[name] = {
            METRIC_MASE: mase_score(pred, actual, naive),
            METRIC_MLAE: mlae_score(pred, actual),
        }
        levels[name] = per_level_scores(pred, actual, h, naive)

    significance: dict[str, tuple] = {}
    if proposed is not None and proposed in predictions and len(methods) > 1:
        for metric in (METRIC_MASE, METRIC_MLAE):
            others = [m for m in methods if m != proposed]
            best_other = min(others, key=lambda m: overall[m][metric])
            e_prop = pointwise_errors(
                metric, predictions[proposed], actual, naive
            )
            e_best = pointwise_errors(
                metric, predictions[best_other], actual, naive
            )
            t_stat, p = paired_t_test(e_prop, e_best)
            significance[metric] = (best_other, t_stat, p, significance_stars(p))

    return EvalReport(
        methods=methods,
        overall=overall,
        levels=levels,
        level_counts=h.level_counts(),
        proposed=proposed if proposed in predictions else None,
        significance=significance,
        metadata=dict(metadata or {}),
    )


def _fmt(x: float) -> str:
    return format(x, ".6g")


def _meta_lines(report: EvalReport) -> list[str]:
    lines = [f"# {k}: {v}" for k, v in sorted(report.metadata.items())]
    for metric, (other, t_stat, p, stars) in sorted(report.significance.items()):
        lines.append(
            f"# t-test ({metric}): {report.proposed} vs {other}: "
            f"t={_fmt(t_stat)}, p={_fmt(p)}, stars={stars or 'none'}"
        )
    return lines


def render_overall_csv(report: EvalReport) -> str:
    """Method columns, one row per metric; stars mark the proposed cell."""
    lines = _meta_lines(report)
    lines.append("metric," + ",".join(report.methods))
    for metric in (METRIC_MASE, METRIC_MLAE):
        cells = []
        for m in report.methods:
            cell = _fmt(report.overall[m][metric])
            if m == report.proposed and metric in report.significance:
                cell += report.significance[metric][3]
            cells.append(cell)
        lines.append(f"{metric}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def render_levels_csv(report: EvalReport) -> str:
    """Method columns, one row per metric and level."""
    lines = _meta_lines(report)
    lines.append("metric," + ",".join(report.methods))
    for metric in (METRIC_MASE, METRIC_MLAE):
        for lv in range(len(report.level_counts)):
            row = [f"{metric} - level {lv}"]
            row.extend(_fmt(report.levels[m][metric][lv]) for m in report.methods)
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def export_report(report: EvalReport, overall_path, levels_path) -> None:
    from .dataset import _atomic_write

    _atomic_write(overall_path, render_overall_csv(report))
    _atomic_write(levels_path, render_levels_csv(report))


def write_search_log(log, path) -> None:
    """CSV dump of the search trials: trial,dropout,lr,wd,epochs,layers,score."""
    from .dataset import _atomic_write

    lines = ["trial,dropout,lr,wd,epochs,layers,score"]
    for t in log:
        lines.append(
            f"{t.trial},{t.dropout!r},{t.learning_rate!r},{t.weight_decay!r},"
            f"{t.epochs},{t.hidden_layers},{t.score!r}"
        )
    _atomic_write(path, "\n".join(lines) + "\n")
