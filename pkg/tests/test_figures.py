import numpy as np
import pytest

from hiercast.evaluation import SearchTrial, build_report
from hiercast.figures import plot_level_scores, plot_overall_scores, plot_search_trials
from hiercast.hierarchy import aggregate

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


@pytest.fixture
def report(tree, panel):
    start, stop = panel.train_len, panel.n_steps
    actual = panel.values[:, start:stop]
    rng = np.random.default_rng(7)
    predictions = {}
    for name, noise in (("bu", 1.0), ("trainable", 0.3)):
        bottom = actual[list(tree.bottom_indices)] + rng.normal(0, noise, (4, stop - start))
        predictions[name] = np.column_stack(
            [aggregate(tree, bottom[:, j]) for j in range(stop - start)]
        )
    return build_report(panel, predictions, range(start, stop), proposed="trainable")


@pytest.fixture
def trials():
    rng = np.random.default_rng(3)
    return [
        SearchTrial(i, 0.1, 1e-3, 1e-2, 100, 1, float(rng.uniform(0.5, 2.0)))
        for i in range(8)
    ]


def test_overall_figure_is_a_png(report, tmp_path):
    path = tmp_path / "overall.png"
    plot_overall_scores(report, path)
    data = path.read_bytes()
    assert data[:8] == PNG_MAGIC
    assert len(data) > 1000


def test_level_figure_is_a_png(report, tmp_path):
    path = tmp_path / "levels.png"
    plot_level_scores(report, path)
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_search_figure_is_a_png(trials, tmp_path):
    path = tmp_path / "search.png"
    plot_search_trials(trials, path)
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_rerender_is_byte_identical(report, trials, tmp_path):
    for render, arg, name in (
        (plot_overall_scores, report, "a.png"),
        (plot_level_scores, report, "b.png"),
        (plot_search_trials, trials, "c.png"),
    ):
        path = tmp_path / name
        render(arg, path)
        first = path.read_bytes()
        render(arg, path)
        assert path.read_bytes() == first, name


def test_no_temp_files_left_behind(report, tmp_path):
    plot_overall_scores(report, tmp_path / "o.png")
    leftovers = [p.name for p in tmp_path.iterdir() if p.suffix != ".png"]
    assert leftovers == []
