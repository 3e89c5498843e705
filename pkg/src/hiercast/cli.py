"""Command-line pipeline: ingest -> forecast -> reconcile -> evaluate / search.

Every stage reads and writes plain CSV artifacts plus small JSON manifests
inside one working directory, so any stage can be replaced by an external
tool. All writes are atomic and, for a fixed seed, byte-reproducible.

Exit codes: 0 ok, 2 input error, 3 contract violation, 4 numeric failure.
"""

from __future__ import annotations

import csv
import functools
import json
import os
import sys

import click
import numpy as np

from . import dataset as ds
from .baselines import (
    SHRINK_DIAGONAL,
    bu_matrix,
    error_covariance,
    oc_matrix,
    reconcile_linear,
    tdfp_reconcile,
    tdhp_matrix,
    tm_matrix,
)
from .errors import ContractError, HiercastError, InputError, NumericError
from .evaluation import (
    HyperGrid,
    build_report,
    export_report,
    random_search,
    write_search_log,
)
from .forecasting import (
    DEFAULT_P_GRID,
    ForecastSet,
    build_forecasters,
    forecast_panel,
    import_forecasts,
)
from .hierarchy import is_coherent, summing_matrix
from .neural import (
    ARCH_FC,
    ARCH_SHRUNK,
    LOSS_MASE,
    LOSS_MLAE,
    LOSS_REG_MASE,
    EncoderConfig,
    load_model,
    reconcile as neural_reconcile,
    save_model,
    train_ensemble,
)

FORECAST_FILE = "forecasts.csv"
FORECAST_MANIFEST = "forecast_manifest.json"
MODEL_FILE = "model.hcm"
BEST_CONFIG_FILE = "best_config.json"
SEARCH_LOG_FILE = "search_log.csv"

COHERENCE_CHECK_TOL = 1e-9

BASELINE_ORDER = ("bu", "tdhp", "tdfp", "oc", "tm", "trainable")


def _fail(exc: HiercastError, code: int):
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    click.echo(line, err=True)
    sys.exit(code)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InputError as exc:
            _fail(exc, 2)
        except NumericError as exc:
            _fail(exc, 4)
        except ContractError as exc:
            _fail(exc, 3)
        except HiercastError as exc:
            _fail(exc, 3)

    return wrapper


@click.group()
def cli():
    """Hierarchical forecasting with exact reconciliation."""


@cli.command("ingest")
@click.option("--values", "values_path", required=True, type=click.Path())
@click.option("--hierarchy", "hierarchy_path", required=True, type=click.Path())
@click.option("--test-len", type=int, required=True)
@click.option(
    "--mode",
    type=click.Choice([ds.MODE_BOTTOM_ONLY, ds.MODE_ALL_LEVELS]),
    default=ds.MODE_BOTTOM_ONLY,
    show_default=True,
)
@click.option("--out-dir", required=True, type=click.Path())
@_handle_errors
def cmd_ingest(values_path, hierarchy_path, test_len, mode, out_dir):
    """Validate raw inputs and write the scaled panel workspace."""
    panel = ds.ingest(values_path, hierarchy_path, test_len, mode)
    ds.save_panel(panel, out_dir)
    h = panel.hierarchy
    counts = ",".join(str(c) for c in h.level_counts())
    click.echo(f"series: {h.n_series} ({h.n_bottom} bottom)")
    click.echo(f"levels ({counts})")
    click.echo(f"train {panel.train_len} steps, test {panel.test_len} steps")
    click.echo(f"global scale: {panel.global_scale!r}")


def _forecast_rows(panel, fc: ForecastSet) -> str:
    lines = ["series_id,timestamp,forecast"]
    raw = fc.values * panel.global_scale
    for i, sid in enumerate(panel.hierarchy.nodes):
        for w, t in enumerate(fc.window):
            lines.append(f"{sid},{panel.timestamps[t]},{float(raw[i, w])!r}")
    return "\n".join(lines) + "\n"


@cli.command("forecast")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--from-file", "external", type=click.Path(), default=None,
              help="Import externally produced forecasts instead of fitting.")
@click.option("--folds", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def cmd_forecast(out_dir, external, folds, seed):
    """Produce one-step base forecasts for every series."""
    panel = ds.load_panel(out_dir)
    if external is not None:
        fc = import_forecasts(external, panel)
        manifest = {
            "source": fc.source,
            "window_start": fc.window.start,
            "window_stop": fc.window.stop,
            "seed": seed,
        }
    else:
        fold_spec = ds.blocked_folds(panel, folds)
        cache = build_forecasters(panel, DEFAULT_P_GRID, fold_spec)
        window = range(cache.max_p, panel.n_steps)
        fc = forecast_panel(cache.full_models, panel, window)
        manifest = {
            "source": fc.source,
            "window_start": window.start,
            "window_stop": window.stop,
            "folds": folds,
            "p_grid": list(DEFAULT_P_GRID),
            "selected_p": {
                sid: cache.selected_p[i]
                for i, sid in enumerate(panel.hierarchy.nodes)
            },
            "seed": seed,
        }
    ds._atomic_write(os.path.join(out_dir, FORECAST_FILE), _forecast_rows(panel, fc))
    ds._atomic_write(
        os.path.join(out_dir, FORECAST_MANIFEST),
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    )
    click.echo(
        f"forecasts for steps {fc.window.start}..{fc.window.stop - 1} "
        f"({fc.source})"
    )


def _slice_forecasts(fc: ForecastSet, start: int, stop: int) -> ForecastSet:
    if start < fc.window.start or stop > fc.window.stop:
        raise ContractError(
            f"forecast window {fc.window.start}..{fc.window.stop - 1} does not "
            f"cover {start}..{stop - 1}"
        )
    lo = start - fc.window.start
    hi = stop - fc.window.start
    return ForecastSet(
        values=fc.values[:, lo:hi].copy(), window=range(start, stop), source=fc.source
    )


def _resolve_arch(arch: str, panel) -> str:
    if arch == "fc":
        return ARCH_FC
    if arch == "shrunk":
        return ARCH_SHRUNK
    if panel.hierarchy.n_series > 10 * panel.train_len:
        return ARCH_SHRUNK
    return ARCH_FC


def _pick_loss(metric: str, panel) -> str:
    if metric == "mlae":
        return LOSS_MLAE
    naive = ds.naive_scale(panel)
    if np.any(naive <= 0.0):
        click.echo(
            "note: constant training series present; training with "
            "regularized-mase instead of mase",
            err=True,
        )
        return LOSS_REG_MASE
    return LOSS_MASE


def _residual_covariance(panel, fc: ForecastSet):
    """Shrunk covariance of in-sample one-step errors on the training window."""
    stop = min(fc.window.stop, panel.train_len)
    insample = _slice_forecasts(fc, fc.window.start, stop)
    actual = panel.values[:, insample.window.start : insample.window.stop]
    residuals = insample.values - actual
    return error_covariance(residuals, SHRINK_DIAGONAL)


@cli.command("reconcile")
@click.option("--out-dir", required=True, type=click.Path())
@click.option(
    "--method",
    type=click.Choice(["bu", "tdhp", "tdfp", "oc", "tm", "trainable"]),
    required=True,
)
@click.option("--model", "model_path", type=click.Path(), default=None,
              help="Trained model file for --method trainable.")
@click.option("--metric", type=click.Choice(["mase", "mlae"]), default="mase",
              show_default=True)
@click.option("--ensemble", type=int, default=10, show_default=True)
@click.option("--arch", type=click.Choice(["auto", "fc", "shrunk"]), default="auto",
              show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def cmd_reconcile(out_dir, method, model_path, metric, ensemble, arch, seed):
    """Turn base forecasts into coherent test-window forecasts."""
    panel = ds.load_panel(out_dir)
    if panel.test_len == 0:
        raise InputError("panel has no test window; nothing to reconcile")
    fc_path = os.path.join(out_dir, FORECAST_FILE)
    raw_fc = import_forecasts(fc_path, panel)
    test = panel.test_window
    if raw_fc.window.start > test.start or raw_fc.window.stop < test.stop:
        raise InputError(
            f"forecasts cover {raw_fc.window.start}..{raw_fc.window.stop - 1}, "
            f"not the test window {test.start}..{test.stop - 1}"
        )
    test_fc = _slice_forecasts(raw_fc, test.start, test.stop)

    h = panel.hierarchy
    s_mat = summing_matrix(h)
    meta = {"method": method, "seed": seed}

    if method == "bu":
        recon = reconcile_linear(bu_matrix(h), s_mat, test_fc.values)
    elif method == "tdhp":
        recon = reconcile_linear(tdhp_matrix(h, panel), s_mat, test_fc.values)
    elif method == "tdfp":
        recon = tdfp_reconcile(h, test_fc.values)
    elif method == "oc":
        recon = reconcile_linear(oc_matrix(h), s_mat, test_fc.values)
    elif method == "tm":
        w = _residual_covariance(panel, raw_fc)
        recon = reconcile_linear(tm_matrix(h, w), s_mat, test_fc.values)
        meta["covariance"] = SHRINK_DIAGONAL
    else:
        if model_path is None:
            default_model = os.path.join(out_dir, MODEL_FILE)
            model_path = default_model if os.path.exists(default_model) else None
        if model_path is not None:
            model = load_model(model_path)
            meta["model"] = os.path.basename(model_path)
        else:
            arch_name = _resolve_arch(arch, panel)
            config = EncoderConfig(
                architecture=arch_name,
                loss=_pick_loss(metric, panel),
                ensemble_size=ensemble,
                seed=seed,
            )
            train_stop = min(raw_fc.window.stop, panel.train_len)
            train_fc = _slice_forecasts(raw_fc, raw_fc.window.start, train_stop)
            model = train_ensemble(config, h, panel, train_fc)
            meta.update(
                architecture=arch_name, loss=config.loss,
                ensemble=ensemble, epochs=config.epochs,
            )
        recon = neural_reconcile(model, s_mat, test_fc.values)

    raw = recon * panel.global_scale
    if not is_coherent(h, raw, COHERENCE_CHECK_TOL):
        raise ContractError(
            f"reconciled output for {method} violates coherence at "
            f"{COHERENCE_CHECK_TOL:g}; refusing to write it"
        )

    lines = [f"# {k}: {v}" for k, v in sorted(meta.items())]
    lines.append("series_id,timestamp,reconciled_forecast")
    for i, sid in enumerate(h.nodes):
        for w, t in enumerate(test):
            lines.append(f"{sid},{panel.timestamps[t]},{float(raw[i, w])!r}")
    out_path = os.path.join(out_dir, f"reconciled_{method}.csv")
    ds._atomic_write(out_path, "\n".join(lines) + "\n")
    click.echo(f"wrote {out_path} ({panel.test_len} steps, coherent)")


def _read_reconciled(path, panel):
    """Parse a reconciled CSV back into a scaled (N, test_len) matrix."""
    meta = {}
    per_series: dict[str, dict[str, float]] = {}
    header_seen = False
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if row[0].startswith("#"):
                text = ",".join(row).lstrip("#").strip()
                if ":" in text:
                    k, v = text.split(":", 1)
                    meta[k.strip()] = v.strip()
                continue
            if not header_seen:
                expected = ["series_id", "timestamp", "reconciled_forecast"]
                if [f.strip() for f in row] != expected:
                    raise InputError(
                        f"{path}:{lineno}: expected header {','.join(expected)}"
                    )
                header_seen = True
                continue
            if len(row) != 3:
                raise InputError(f"{path}:{lineno}: expected 3 fields")
            sid, ts, value = (f.strip() for f in row)
            try:
                per_series.setdefault(sid, {})[ts] = float(value)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad value {value!r}") from None
    if not header_seen:
        raise InputError(f"{path}: missing header row")

    h = panel.hierarchy
    test = panel.test_window
    out = np.empty((h.n_series, panel.test_len))
    for i, sid in enumerate(h.nodes):
        if sid not in per_series:
            raise InputError(f"{path}: missing series {sid!r}")
        by_ts = per_series[sid]
        for w, t in enumerate(test):
            ts = panel.timestamps[t]
            if ts not in by_ts:
                raise InputError(f"{path}: series {sid!r} missing timestamp {ts}")
            out[i, w] = by_ts[ts]
    return out / panel.global_scale, meta


@cli.command("evaluate")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--method", "methods", multiple=True,
              help="Methods to score; default: every reconciled file present.")
@_handle_errors
def cmd_evaluate(out_dir, methods):
    """Score reconciled forecasts on the test window and render the report."""
    panel = ds.load_panel(out_dir)
    if panel.test_len == 0:
        raise InputError("panel has no test window; nothing to evaluate")
    if not methods:
        found = [
            name[len("reconciled_") : -len(".csv")]
            for name in sorted(os.listdir(out_dir))
            if name.startswith("reconciled_") and name.endswith(".csv")
        ]
        methods = tuple(
            sorted(found, key=lambda m: (BASELINE_ORDER.index(m)
                                         if m in BASELINE_ORDER else len(BASELINE_ORDER), m))
        )
    if not methods:
        raise InputError(f"no reconciled_<method>.csv files in {out_dir}")

    predictions = {}
    metadata = {
        "global_scale": repr(panel.global_scale),
        "scaling": "values divided by the training-window mean absolute value",
        "window": f"test steps {panel.train_len}..{panel.n_steps - 1}",
        "t_test": "two-sided paired, pooled per (series, step)",
    }
    for m in methods:
        path = os.path.join(out_dir, f"reconciled_{m}.csv")
        preds, meta = _read_reconciled(path, panel)
        predictions[m] = preds
        for k, v in meta.items():
            if k != "method":
                metadata[f"{m}.{k}"] = v

    proposed = "trainable" if "trainable" in predictions else None
    report = build_report(
        panel, predictions, panel.test_window, proposed=proposed, metadata=metadata
    )
    overall_path = os.path.join(out_dir, "report_overall.csv")
    levels_path = os.path.join(out_dir, "report_levels.csv")
    export_report(report, overall_path, levels_path)

    from .figures import plot_level_scores, plot_overall_scores

    plot_overall_scores(report, os.path.join(out_dir, "report_overall.png"))
    plot_level_scores(report, os.path.join(out_dir, "report_levels.png"))

    click.echo(f"wrote {overall_path}")
    click.echo(f"wrote {levels_path}")
    for metric in ("mase", "mlae"):
        row = ", ".join(
            f"{m}={report.overall[m][metric]:.4g}" for m in report.methods
        )
        click.echo(f"{metric}: {row}")


@cli.command("search")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--metric", type=click.Choice(["mase", "mlae"]), default="mase",
              show_default=True)
@click.option("--trials", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--folds", type=int, default=10, show_default=True)
@click.option("--ensemble", type=int, default=10, show_default=True)
@click.option("--arch", type=click.Choice(["auto", "fc", "shrunk"]), default="auto",
              show_default=True)
@_handle_errors
def cmd_search(out_dir, metric, trials, seed, folds, ensemble, arch):
    """Random hyperparameter search under the fold protocol, then final training."""
    panel = ds.load_panel(out_dir)
    fold_spec = ds.blocked_folds(panel, folds)
    cache = build_forecasters(panel, DEFAULT_P_GRID, fold_spec)

    arch_name = _resolve_arch(arch, panel)
    base = EncoderConfig(
        architecture=arch_name,
        loss=_pick_loss(metric, panel),
        ensemble_size=ensemble,
        seed=seed,
    )
    grid = HyperGrid()
    best, log = random_search(
        grid, panel, fold_spec, cache, base_config=base, n=trials, seed=seed
    )
    write_search_log(log, os.path.join(out_dir, SEARCH_LOG_FILE))

    window = range(cache.max_p, panel.train_len)
    train_fc = forecast_panel(cache.full_models, panel, window)
    model = train_ensemble(best, panel.hierarchy, panel, train_fc)
    model_path = os.path.join(out_dir, MODEL_FILE)
    save_model(model, model_path)

    best_dump = {
        "architecture": best.architecture,
        "hidden_layers": best.hidden_layers,
        "dropout": best.dropout,
        "learning_rate": best.learning_rate,
        "weight_decay": best.weight_decay,
        "epochs": best.epochs,
        "batch_size": best.batch_size,
        "loss": best.loss,
        "ensemble_size": best.ensemble_size,
        "seed": best.seed,
        "search": {
            "metric": metric,
            "trials": trials,
            "seed": seed,
            "folds": folds,
            "grid_note": "axis values read as powers of ten",
        },
    }
    ds._atomic_write(
        os.path.join(out_dir, BEST_CONFIG_FILE),
        json.dumps(best_dump, indent=2, sort_keys=True) + "\n",
    )

    from .figures import plot_search_trials

    plot_search_trials(log, os.path.join(out_dir, "search_trials.png"))

    best_score = min(t.score for t in log)
    click.echo(f"best CV score ({metric}): {best_score:.6g} over {trials} trials")
    click.echo(
        f"winner: dropout={best.dropout}, lr={best.learning_rate}, "
        f"wd={best.weight_decay}, epochs={best.epochs}, layers={best.hidden_layers}"
    )
    click.echo(f"wrote {model_path}")


def main():
    cli(prog_name="hiercast")


if __name__ == "__main__":
    main()
