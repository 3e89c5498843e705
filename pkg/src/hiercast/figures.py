"""Figure rendering for the report path.

Everything draws through the Agg backend straight to PNG files, with
fixed dpi and no timestamps, so rerunning a pipeline with the same seed
reproduces the images byte for byte.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import METRIC_MASE, METRIC_MLAE, EvalReport

__all__ = [
    "plot_overall_scores",
    "plot_level_scores",
    "plot_search_trials",
]

_RC = {
    "figure.dpi": 150,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> None:
    tmp = f"{path}.tmp"
    fig.savefig(tmp, format="png")
    plt.close(fig)
    os.replace(tmp, path)


def plot_overall_scores(report: EvalReport, path) -> None:
    """Bar chart of each method's overall score, one panel per metric."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, metric in zip(axes, (METRIC_MASE, METRIC_MLAE)):
            names = list(report.methods)
            scores = [report.overall[m][metric] for m in names]
            bars = ax.bar(range(len(names)), scores, color="#4878d0")
            if report.proposed in names:
                bars[names.index(report.proposed)].set_color("#d65f5f")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=30, ha="right")
            title = metric
            if metric in report.significance:
                stars = report.significance[metric][3]
                if stars:
                    title = f"{metric} ({report.proposed} {stars})"
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def plot_level_scores(report: EvalReport, path) -> None:
    """Per-level score lines for every method, one panel per metric."""
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        n_levels = len(report.level_counts)
        for ax, metric in zip(axes, (METRIC_MASE, METRIC_MLAE)):
            for name in report.methods:
                ax.plot(
                    range(n_levels),
                    report.levels[name][metric],
                    marker="o",
                    markersize=3,
                    linewidth=1.2,
                    label=name,
                )
            ax.set_xticks(range(n_levels))
            ax.set_xlabel("level")
            ax.set_title(metric)
        axes[-1].legend(fontsize=7, frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_search_trials(log, path) -> None:
    """Scores by trial number with the winner highlighted."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        trials = [t.trial for t in log]
        scores = [t.score for t in log]
        ax.plot(trials, scores, "o", markersize=4, color="#4878d0", alpha=0.7)
        best = min(log, key=lambda t: (t.score, t.epochs, t.hidden_layers, t.trial))
        ax.plot([best.trial], [best.score], "o", markersize=7, color="#d65f5f")
        ax.annotate(
            f"best: {best.score:.4g}",
            (best.trial, best.score),
            textcoords="offset points",
            xytext=(6, 6),
            fontsize=8,
        )
        ax.set_xlabel("trial")
        ax.set_ylabel("mean CV score")
        fig.tight_layout()
        _save(fig, path)
