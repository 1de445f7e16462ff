import json

import numpy as np
import pandas as pd
import pytest

from apcsmooth.cli import DEFAULTS, build_parser, compare_fits, config_hash, main, resolve
from apcsmooth.dataset import write_csv
from apcsmooth.results import FitResult

from conftest import synthetic_grid


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    data, _ = synthetic_grid(I=10, J=12, seed=8)
    path = tmp_path_factory.mktemp("cli") / "data.csv"
    write_csv(data, path)
    return path


@pytest.fixture(scope="module")
def crs_fit(data_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("crs")
    assert main(["fit", str(data_csv), "--basis", "crs", "--knots", "6,6,8", "--train-through", "2009", "--out", str(out)]) == 0
    return out


class TestFit:
    def test_outputs(self, crs_fit):
        fit = FitResult.from_csv(crs_fit / "fit.csv")
        assert len(fit) == 120
        assert (fit.window == "prediction").sum() == 20
        m = json.loads((crs_fit / "manifest.json").read_text())
        assert m["engine"]["name"] == "CRS"
        assert m["config"]["knots"] == "6,6,8"
        assert set(m["versions"]) >= {"apcsmooth", "numpy", "scipy", "pandas", "python"}
        assert m["diagnostics"]["converged"]

    def test_byte_identical_rerun(self, data_csv, crs_fit, tmp_path):
        main(["fit", str(data_csv), "--basis", "crs", "--knots", "6,6,8", "--train-through", "2009", "--out", str(tmp_path)])
        assert (tmp_path / "fit.csv").read_bytes() == (crs_fit / "fit.csv").read_bytes()
        h1 = json.loads((tmp_path / "manifest.json").read_text())["config_hash"]
        h2 = json.loads((crs_fit / "manifest.json").read_text())["config_hash"]
        assert h1 == h2

    def test_rw2_writes_hyper(self, data_csv, tmp_path):
        assert main(["fit", str(data_csv), "--engine", "rw2", "--pc-u", "3", "--out", str(tmp_path), "--dump-design"]) == 0
        hyper = json.loads((tmp_path / "hyper.json").read_text())
        assert hyper["pc_prior"] == {"U": 3.0, "alpha": 0.01}
        assert len(pd.read_csv(tmp_path / "design.csv")) == 120

    @pytest.mark.parametrize("flags", [
        ["--engine", "rw2", "--basis", "crs"],
        ["--engine", "rw2", "--knots", "5,5,5"],
        ["--engine", "spline", "--pc-u", "1"],
        ["--knots", "5,5"],
        ["--train-through", "1990"],
    ])
    def test_conflicting_flags_exit_2(self, data_csv, tmp_path, flags, capsys):
        assert main(["fit", str(data_csv), "--out", str(tmp_path), *flags]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_input_exit_2(self, tmp_path):
        assert main(["fit", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2


class TestConfigPrecedence:
    def test_defaults_config_flags(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"knots": "7,7,9", "basis": "bs", "out": "from-config"}))
        args = build_parser().parse_args(["fit", "d.csv", "--config", str(cfg), "--basis", "crs"])
        opts = resolve(args)
        assert opts["knots"] == "7,7,9"
        assert opts["basis"] == "crs"
        assert opts["out"] == "from-config"
        assert opts["half_count"] == DEFAULTS["fit"]["half_count"]
        assert opts["_explicit"] == ["basis", "data"]

    def test_bad_config_exit_2(self, data_csv, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("[1, 2]")
        assert main(["fit", str(data_csv), "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_hash_depends_on_inputs(self, data_csv, tmp_path):
        other = tmp_path / "other.csv"
        other.write_bytes(data_csv.read_bytes() + b"\n")
        assert config_hash({"a": 1}, [data_csv]) != config_hash({"a": 1}, [other])
        assert config_hash({"a": 1, "_explicit": ["a"]}, [data_csv]) == config_hash({"a": 1}, [data_csv])


class TestForecast:
    def test_forecast_rows(self, data_csv, tmp_path):
        assert main(["forecast", str(data_csv), "--basis", "crs", "--knots", "6,6,8", "--horizon", "2", "--out", str(tmp_path)]) == 0
        fc = FitResult.from_csv(tmp_path / "forecast.csv")
        assert len(fc) == 20 and set(fc.period) == {2010, 2011}

    def test_beyond_data_exit_2(self, data_csv, tmp_path, capsys):
        rc = main(["forecast", str(data_csv), "--train-through", "2010", "--horizon", "3", "--out", str(tmp_path)])
        assert rc == 2
        assert "exposures" in capsys.readouterr().err


class TestScoreCompare:
    def test_score_against_eta_true(self, crs_fit, tmp_path, capsys):
        fit = FitResult.from_csv(crs_fit / "fit.csv")
        truth = pd.DataFrame({"age": fit.age, "period": fit.period, "eta_true": fit.eta_hat})
        truth.to_csv(tmp_path / "truth.csv", index=False, float_format="%.17g")
        assert main(["score", "--fit", str(crs_fit / "fit.csv"), "--truth", str(tmp_path / "truth.csv"), "--out", str(tmp_path)]) == 0
        scores = json.loads((tmp_path / "scores.json").read_text())["scores"]
        assert scores["estimation"]["mae"] == 0.0 and scores["prediction"]["coverage"] == 1.0
        assert "x10^-2" in capsys.readouterr().out

    def test_score_against_dataset(self, crs_fit, data_csv, tmp_path):
        assert main(["score", "--fit", str(crs_fit / "fit.csv"), "--truth", str(data_csv), "--out", str(tmp_path)]) == 0
        payload = json.loads((tmp_path / "scores.json").read_text())
        assert payload["truth_source"].startswith("observed log rate")

    def test_compare_with_itself(self, crs_fit, tmp_path):
        f = str(crs_fit / "fit.csv")
        assert main(["compare", f, f, "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "manifest.json").read_text())["summary"]
        assert summary["correlation"] == pytest.approx(1.0) and summary["max_abs_diff"] == 0.0

    def test_compare_grid_mismatch(self, crs_fit, tmp_path):
        fit = FitResult.from_csv(crs_fit / "fit.csv")
        fit.subset(np.arange(len(fit)) < 50).to_csv(tmp_path / "short.csv")
        assert main(["compare", str(crs_fit / "fit.csv"), str(tmp_path / "short.csv"), "--out", str(tmp_path)]) == 2

    def test_compare_fits_values(self):
        a = FitResult("a", ["10-14"] * 3, [1, 2, 3], [0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [1.0, 2.0, 3.0], ["estimation"] * 3)
        b = FitResult("b", ["10-14"] * 3, [1, 2, 3], [0.0, 2.0, 4.0], [-1.0, 1.0, 3.0], [1.0, 3.0, 5.0], ["estimation"] * 3)
        df, s = compare_fits(a, b)
        assert s["correlation"] == pytest.approx(1.0) and s["max_abs_diff"] == 2.0
        np.testing.assert_array_equal(df["diff"], [0.0, 1.0, 2.0])


class TestSimulateAndPlot:
    def test_simulate(self, tmp_path):
        rc = main(["simulate", "--replicates", "1", "--engines", "CRS", "--knots", "6,6,8", "--save-data", "--out", str(tmp_path)])
        assert rc == 0
        scores = pd.read_csv(tmp_path / "scores.csv")
        assert set(scores.window) == {"estimation", "prediction"} and set(scores.engine) == {"CRS"}
        assert (tmp_path / "replicates" / "data_000.csv").exists()
        truth = pd.read_csv(tmp_path / "replicates" / "truth_000.csv")
        assert len(truth) == 15 * 21
        assert json.loads((tmp_path / "truth.json").read_text())["age"]["shape"] == "bump"

    def test_unknown_engine(self, tmp_path):
        assert main(["simulate", "--replicates", "1", "--engines", "GAM", "--out", str(tmp_path)]) == 2

    def test_plot_data(self, data_csv, crs_fit, tmp_path):
        assert main(["plot-data", str(data_csv), "--fit", str(crs_fit / "fit.csv"), "--out", str(tmp_path)]) == 0
        heat = pd.read_csv(tmp_path / "heatmap.csv")
        assert len(heat) == 10 * 12
        lines = pd.read_csv(tmp_path / "lineplot.csv")
        assert set(lines.engine) == {"CRS"} and len(lines) == 120
        assert lines["observed_log_rate"].notna().all()
