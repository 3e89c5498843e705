import json

import numpy as np
import pytest
from click.testing import CliRunner

from hiercast.cli import cli

HIERARCHY = "A,B\nA,C\nB,D\nB,E\nC,F\nC,G\n"


def write_inputs(root, n_steps=40, rng=None):
    rng = rng or np.random.default_rng(26)
    (root / "hierarchy.csv").write_text(HIERARCHY)
    rows = ["series_id,timestamp,value"]
    t = np.arange(n_steps)
    for k, sid in enumerate("DEFG"):
        series = np.abs(10 + 3 * np.sin(2 * np.pi * t / 12 + k) + rng.normal(0, 0.5, n_steps))
        for step, v in enumerate(series):
            rows.append(f"{sid},t{step:03d},{float(v)!r}")
    (root / "values.csv").write_text("\n".join(rows) + "\n")


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def workspace(tmp_path, runner):
    """An ingested panel ready for the later stages."""
    write_inputs(tmp_path)
    out = tmp_path / "work"
    result = runner.invoke(
        cli,
        [
            "ingest",
            "--values", str(tmp_path / "values.csv"),
            "--hierarchy", str(tmp_path / "hierarchy.csv"),
            "--test-len", "6",
            "--out-dir", str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    return out


def forecasted(runner, workspace):
    result = runner.invoke(cli, ["forecast", "--out-dir", str(workspace), "--folds", "5"])
    assert result.exit_code == 0, result.output
    return workspace


class TestIngest:
    def test_summary_lines(self, tmp_path, runner):
        write_inputs(tmp_path)
        out = tmp_path / "work"
        result = runner.invoke(
            cli,
            [
                "ingest",
                "--values", str(tmp_path / "values.csv"),
                "--hierarchy", str(tmp_path / "hierarchy.csv"),
                "--test-len", "6",
                "--out-dir", str(out),
            ],
        )
        assert result.exit_code == 0
        assert "series: 7 (4 bottom)" in result.output
        assert "levels (1,2,4)" in result.output
        assert "train 34 steps, test 6 steps" in result.output
        for name in ("panel.csv", "hierarchy_edges.csv", "manifest.json"):
            assert (out / name).exists()

    def test_four_level_tree_summary(self, tmp_path, runner):
        edges = []
        leaves = []
        for s in range(4):
            edges.append(("top", f"s{s}"))
            for r in range(7):
                edges.append((f"s{s}", f"s{s}r{r}"))
                for l in range(2):
                    leaf = f"s{s}r{r}l{l}"
                    edges.append((f"s{s}r{r}", leaf))
                    leaves.append(leaf)
        (tmp_path / "h.csv").write_text("\n".join(f"{p},{c}" for p, c in edges) + "\n")
        rows = ["series_id,timestamp,value"]
        for leaf in leaves:
            for step in range(8):
                rows.append(f"{leaf},t{step},{1.0 + hash(leaf) % 5}")
        (tmp_path / "v.csv").write_text("\n".join(rows) + "\n")
        result = runner.invoke(
            cli,
            [
                "ingest",
                "--values", str(tmp_path / "v.csv"),
                "--hierarchy", str(tmp_path / "h.csv"),
                "--test-len", "2",
                "--out-dir", str(tmp_path / "w"),
            ],
        )
        assert result.exit_code == 0
        assert "series: 89 (56 bottom)" in result.output
        assert "levels (1,4,28,56)" in result.output

    def test_missing_leaf_fails_with_json_error(self, tmp_path, runner):
        write_inputs(tmp_path)
        values = (tmp_path / "values.csv").read_text().splitlines()
        kept = [ln for ln in values if not ln.startswith("G,")]
        (tmp_path / "values.csv").write_text("\n".join(kept) + "\n")
        result = runner.invoke(
            cli,
            [
                "ingest",
                "--values", str(tmp_path / "values.csv"),
                "--hierarchy", str(tmp_path / "hierarchy.csv"),
                "--test-len", "6",
                "--out-dir", str(tmp_path / "w"),
            ],
        )
        assert result.exit_code == 2
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert err["error"] == "InputError"
        assert "'G'" in err["message"]


class TestForecast:
    def test_internal_forecasts_and_manifest(self, workspace, runner):
        result = runner.invoke(cli, ["forecast", "--out-dir", str(workspace), "--folds", "5"])
        assert result.exit_code == 0
        assert "internal-AR" in result.output
        manifest = json.loads((workspace / "forecast_manifest.json").read_text())
        assert manifest["source"] == "internal-AR"
        assert sorted(manifest["selected_p"]) == list("ABCDEFG")
        assert all(p in (1, 2, 4, 8) for p in manifest["selected_p"].values())
        assert manifest["window_stop"] == 40
        header = (workspace / "forecasts.csv").read_text().splitlines()[0]
        assert header == "series_id,timestamp,forecast"

    def test_external_import(self, workspace, runner):
        rows = ["series_id,timestamp,forecast"]
        for sid in "ABCDEFG":
            for step in range(34, 40):
                rows.append(f"{sid},t{step:03d},5.0")
        ext = workspace / "external.csv"
        ext.write_text("\n".join(rows) + "\n")
        result = runner.invoke(
            cli, ["forecast", "--out-dir", str(workspace), "--from-file", str(ext)]
        )
        assert result.exit_code == 0
        manifest = json.loads((workspace / "forecast_manifest.json").read_text())
        assert manifest["source"] == "external-file"
        assert manifest["window_start"] == 34

    def test_missing_workspace(self, tmp_path, runner):
        result = runner.invoke(cli, ["forecast", "--out-dir", str(tmp_path / "nope")])
        assert result.exit_code == 2
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert err["error"] == "InputError"


class TestReconcile:
    @pytest.mark.parametrize("method", ["bu", "tdhp", "tdfp", "oc", "tm"])
    def test_baseline_methods_write_coherent_files(self, workspace, runner, method):
        forecasted(runner, workspace)
        result = runner.invoke(
            cli, ["reconcile", "--out-dir", str(workspace), "--method", method]
        )
        assert result.exit_code == 0, result.output
        assert "coherent" in result.output
        lines = (workspace / f"reconciled_{method}.csv").read_text().splitlines()
        assert f"# method: {method}" in lines
        body = [ln for ln in lines if not ln.startswith("#")]
        assert body[0] == "series_id,timestamp,reconciled_forecast"
        assert len(body) == 1 + 7 * 6

    def test_tm_records_covariance_choice(self, workspace, runner):
        forecasted(runner, workspace)
        runner.invoke(cli, ["reconcile", "--out-dir", str(workspace), "--method", "tm"])
        text = (workspace / "reconciled_tm.csv").read_text()
        assert "# covariance: diagonal-shrinkage" in text

    def test_trainable_without_model_trains_inline(self, workspace, runner):
        forecasted(runner, workspace)
        result = runner.invoke(
            cli,
            [
                "reconcile", "--out-dir", str(workspace),
                "--method", "trainable", "--ensemble", "2",
            ],
        )
        assert result.exit_code == 0, result.output
        text = (workspace / "reconciled_trainable.csv").read_text()
        assert "# architecture: fully-connected" in text
        assert "# ensemble: 2" in text
        assert "# model:" not in text

    def test_reruns_are_byte_identical(self, workspace, runner):
        forecasted(runner, workspace)
        args = ["reconcile", "--out-dir", str(workspace), "--method", "bu"]
        assert runner.invoke(cli, args).exit_code == 0
        first = (workspace / "reconciled_bu.csv").read_bytes()
        assert runner.invoke(cli, args).exit_code == 0
        assert (workspace / "reconciled_bu.csv").read_bytes() == first

    def test_unknown_method_is_a_usage_error(self, workspace, runner):
        result = runner.invoke(
            cli, ["reconcile", "--out-dir", str(workspace), "--method", "magic"]
        )
        assert result.exit_code == 2
        assert "Invalid value" in result.stderr

    def test_requires_forecasts(self, workspace, runner):
        result = runner.invoke(
            cli, ["reconcile", "--out-dir", str(workspace), "--method", "bu"]
        )
        assert result.exit_code == 2
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert "forecast" in err["message"]


class TestEvaluate:
    def prepare(self, workspace, runner):
        forecasted(runner, workspace)
        for method in ("bu", "tdfp"):
            assert (
                runner.invoke(
                    cli, ["reconcile", "--out-dir", str(workspace), "--method", method]
                ).exit_code
                == 0
            )
        assert (
            runner.invoke(
                cli,
                [
                    "reconcile", "--out-dir", str(workspace),
                    "--method", "trainable", "--ensemble", "2",
                ],
            ).exit_code
            == 0
        )

    def test_report_files_and_figures(self, workspace, runner):
        self.prepare(workspace, runner)
        result = runner.invoke(cli, ["evaluate", "--out-dir", str(workspace)])
        assert result.exit_code == 0, result.output
        assert "mase:" in result.output and "mlae:" in result.output
        overall = (workspace / "report_overall.csv").read_text()
        assert "metric,bu,tdfp,trainable" in overall
        assert "# t-test (mase): trainable vs " in overall
        levels = (workspace / "report_levels.csv").read_text()
        assert "mase - level 0," in levels
        for png in ("report_overall.png", "report_levels.png"):
            assert (workspace / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_method_subset(self, workspace, runner):
        self.prepare(workspace, runner)
        result = runner.invoke(
            cli,
            ["evaluate", "--out-dir", str(workspace), "--method", "bu", "--method", "tdfp"],
        )
        assert result.exit_code == 0
        overall = (workspace / "report_overall.csv").read_text()
        assert "metric,bu,tdfp" in overall
        assert "trainable" not in overall

    def test_no_reconciled_files(self, workspace, runner):
        result = runner.invoke(cli, ["evaluate", "--out-dir", str(workspace)])
        assert result.exit_code == 2
        err = json.loads(result.stderr.strip().splitlines()[-1])
        assert "reconciled" in err["message"]


class TestSearch:
    def test_artifacts(self, workspace, runner):
        forecasted(runner, workspace)
        result = runner.invoke(
            cli,
            [
                "search", "--out-dir", str(workspace),
                "--trials", "3", "--folds", "4", "--ensemble", "2", "--seed", "1",
            ],
        )
        assert result.exit_code == 0, result.output
        assert "best CV score" in result.output

        log_lines = (workspace / "search_log.csv").read_text().splitlines()
        assert log_lines[0] == "trial,dropout,lr,wd,epochs,layers,score"
        assert len(log_lines) == 4

        best = json.loads((workspace / "best_config.json").read_text())
        assert best["ensemble_size"] == 2
        assert best["search"]["trials"] == 3
        assert best["epochs"] in (50, 100, 200, 500)

        assert (workspace / "model.hcm").read_bytes()[:9] == b"HCENC001\n"
        assert (workspace / "search_trials.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_saved_model_feeds_reconcile(self, workspace, runner):
        forecasted(runner, workspace)
        assert (
            runner.invoke(
                cli,
                [
                    "search", "--out-dir", str(workspace),
                    "--trials", "2", "--folds", "4", "--ensemble", "2",
                ],
            ).exit_code
            == 0
        )
        result = runner.invoke(
            cli, ["reconcile", "--out-dir", str(workspace), "--method", "trainable"]
        )
        assert result.exit_code == 0, result.output
        text = (workspace / "reconciled_trainable.csv").read_text()
        assert "# model: model.hcm" in text
