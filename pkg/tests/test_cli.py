import csv
import json

import numpy as np
import pytest

from ovbshift.cli import main


def _write(path, text):
    path.write_text(text)
    return str(path)


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def w1_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("w1")
    cfg = _write(d / "w1.cfg", "world = w1\nn = 50000\nm = 50000\nseed = 1\nemit_long = true\n")
    assert main(["synth", "--config", cfg, "--out", str(d / "data")]) == 0
    return d


@pytest.fixture(scope="module")
def gauss_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("gauss")
    cfg = _write(
        d / "g.cfg",
        "world = gaussian\ncoefficients = random\nomit_mask = 0,1,2,3,4,5\nshift = 0.3\nintercept = 3\n"
        "n = 2000\nm = 2000\nseed = 4\nemit_long = true\n",
    )
    assert main(["synth", "--config", cfg, "--out", str(d / "data")]) == 0
    return d


def _data(d, long=False):
    suffix = "_long" if long else ""
    return [str(d / "data" / f"source{suffix}.csv"), str(d / "data" / f"target{suffix}.csv")]


class TestSynth:
    def test_shape_and_determinism(self, tmp_path):
        cfg = _write(tmp_path / "c.cfg", "world = w1\nn = 1000\nm = 1000\nseed = 1\n")
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
        src = _rows(tmp_path / "a" / "source.csv")
        tgt = _rows(tmp_path / "a" / "target.csv")
        assert len(src) == len(tgt) == 1000
        assert {r["domain"] for r in src} == {"P"} and {r["domain"] for r in tgt} == {"Q"}
        for name in ("source.csv", "target.csv", "synth.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_coefficients(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.cfg", "world = gaussian\nd = 4\nk = 2\n")
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "coefficients" in capsys.readouterr().err

    def test_line_anchored_errors(self, tmp_path, capsys):
        cfg = _write(tmp_path / "c.cfg", "world = w1\n# comment\nthis line is wrong\n")
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert f"{cfg}:3:" in capsys.readouterr().err
        cfg = _write(tmp_path / "d.cfg", "world = w1\n\nn = many\n")
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert f"{cfg}:3: n:" in capsys.readouterr().err
        cfg = _write(tmp_path / "e.cfg", "wrld = w1\n")
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert f"{cfg}:1: wrld: unknown key" in capsys.readouterr().err

    def test_gaussian_outputs(self, gauss_dir):
        meta = json.loads((gauss_dir / "data" / "synth.json").read_text())
        assert meta["world"]["omitted_columns"] == [0, 1, 2, 3, 4, 5]
        header = _rows(gauss_dir / "data" / "source.csv")[0].keys()
        assert [h for h in header if h.startswith("feature_")] == [f"feature_{j}" for j in range(6, 10)]


class TestEvaluate:
    def test_w1_bound_and_inference(self, w1_dir, tmp_path):
        cfg = _write(tmp_path / "e.cfg", "weights = 1\nbias = 0\ns = 0.42426\nbootstrap_B = 300\n")
        assert main(["evaluate", "--config", cfg, "--data", *_data(w1_dir), "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep["worst_case"]["best_case"] == pytest.approx(-0.65, abs=0.03)
        assert 0.38 <= rep["test"]["s_star"] <= 0.47
        lo, hi = rep["test"]["s_range"]
        assert lo <= rep["test"]["s_star"] <= hi
        assert rep["model"]["source"] == "config"
        assert set(rep["provenance"]) == {"config_hash", "inputs", "seed", "version"}
        assert set(rep["provenance"]["inputs"]) == {"source.csv", "target.csv"}

    def test_general_form(self, w1_dir, tmp_path):
        cfg = _write(tmp_path / "e.cfg", "form = general\nweights = 1\ns = 0.42426\nbootstrap_B = 100\n")
        assert main(["evaluate", "--config", cfg, "--data", *_data(w1_dir), "--out", str(tmp_path / "o")]) == 0
        rep = json.loads((tmp_path / "o" / "report.json").read_text())
        assert rep["eval"]["sigma2"] == pytest.approx(0.125, abs=0.01)
        assert rep["worst_case"]["best_case"] == pytest.approx(-0.65, abs=0.03)

    def test_identical_domains(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(4000, 2))
        y = X @ [1.0, -1.0] + rng.normal(size=4000)
        for dom in "PQ":
            with open(tmp_path / f"{dom}.csv", "w") as fh:
                fh.write("feature_0,feature_1,label,domain\n")
                for x, t in zip(X, y):
                    fh.write(f"{float(x[0])!r},{float(x[1])!r},{float(t)!r},{dom}\n")
        cfg = _write(tmp_path / "e.cfg", "form = general\nweights = 1,-1\ns = 0.5\nbootstrap_B = 100\n")
        out = tmp_path / "o"
        assert main(["evaluate", "--config", cfg, "--data", str(tmp_path / "P.csv"), str(tmp_path / "Q.csv"), "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        ev = rep["eval"]
        assert ev["L_ipw"] == pytest.approx(ev["L_unadjusted"], abs=0.02)
        assert ev["nu2"] == pytest.approx(1.0, abs=0.02)
        assert rep["worst_case"]["bound_term"] == pytest.approx(0.5 * np.sqrt(ev["sigma2"]), rel=0.02)

    def test_defaults_to_dr_model_and_plots(self, gauss_dir, tmp_path):
        out = tmp_path / "o"
        assert main(["evaluate", "--set", "bootstrap_B=100", "--data", *_data(gauss_dir), "--out", str(out), "--plot"]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["model"]["source"] == "dr_fit"
        assert (out / "report.png").stat().st_size > 0

    def test_data_errors(self, tmp_path, capsys):
        bad = _write(tmp_path / "bad.csv", "feature_0,label\n1,2\n")
        assert main(["evaluate", "--data", bad, "--out", str(tmp_path / "o")]) == 3
        assert "domain" in capsys.readouterr().err
        bad = _write(tmp_path / "bad2.csv", "feature_0,label,domain\n1,2,P\n1,2,P\n1,,R\n")
        assert main(["evaluate", "--data", bad, "--out", str(tmp_path / "o")]) == 3
        assert "bad2.csv:4" in capsys.readouterr().err
        bad = _write(tmp_path / "bad3.csv", "feature_0,label,domain\nx,2,P\n")
        assert main(["evaluate", "--data", bad, "--out", str(tmp_path / "o")]) == 3
        unl = _write(tmp_path / "unl.csv", "feature_0,label,domain\n1,,P\n2,1,P\n1,,Q\n2,,Q\n")
        assert main(["evaluate", "--data", unl, "--out", str(tmp_path / "o")]) == 3

    def test_numerical_error(self, tmp_path, capsys):
        rng = np.random.default_rng(1)
        lines = ["feature_0,feature_1,label,domain"]
        for dom in "PQ":
            for _ in range(40):
                lines.append(f"1.0,{float(rng.normal())!r},{float(rng.normal())!r},{dom}")
        data = _write(tmp_path / "d.csv", "\n".join(lines) + "\n")
        assert main(["evaluate", "--set", "ridge_lambda=0", "--data", data, "--out", str(tmp_path / "o")]) == 4
        assert "rank deficient" in capsys.readouterr().err

    def test_config_validation(self, w1_dir, tmp_path, capsys):
        cfg = _write(tmp_path / "e.cfg", "s = 0.3\nrho_max = 0.5\n")
        assert main(["evaluate", "--config", cfg, "--data", *_data(w1_dir), "--out", str(tmp_path / "o")]) == 2
        assert "cy_max" in capsys.readouterr().err
        cfg = _write(tmp_path / "f.cfg", "model = missing.json\n")
        assert main(["evaluate", "--config", cfg, "--data", *_data(w1_dir), "--out", str(tmp_path / "o")]) == 2
        assert f"{cfg}:1: model: file not found" in capsys.readouterr().err


class TestOptimize:
    def test_worst_case_zero_equals_dr(self, gauss_dir, tmp_path):
        base = ["--set", "bootstrap_B=100", "--data", *_data(gauss_dir)]
        assert main(["optimize", *base, "--out", str(tmp_path / "dr")]) == 0
        assert main(["optimize", *base, "--set", "objective=worst_case", "--set", "s=0", "--out", str(tmp_path / "wc")]) == 0
        assert (tmp_path / "dr" / "model.json").read_bytes() == (tmp_path / "wc" / "model.json").read_bytes()

    def test_unadjusted_recovers_noiseless_weights(self, tmp_path):
        rng = np.random.default_rng(2)
        lines = ["feature_0,feature_1,label,domain"]
        for dom, shift in (("P", 0.0), ("Q", 0.5)):
            for x in rng.normal(size=(300, 2)) + shift:
                lines.append(f"{float(x[0])!r},{float(x[1])!r},{float(2 * x[0] - x[1] + 0.5)!r},{dom}")
        data = _write(tmp_path / "d.csv", "\n".join(lines) + "\n")
        out = tmp_path / "o"
        assert main(["optimize", "--set", "objective=unadjusted", "--set", "grad_tol=1e-11", "--set", "bootstrap_B=100",
                     "--data", data, "--out", str(out), "--plot"]) == 0
        model = json.loads((out / "model.json").read_text())
        assert model["weights"] == pytest.approx([2.0, -1.0], abs=1e-4)
        assert model["bias"] == pytest.approx(0.5, abs=1e-4)
        assert (out / "trace.png").exists()

    def test_robust_model_reported(self, gauss_dir, tmp_path):
        out = tmp_path / "o"
        args = ["optimize", "--set", "objective=worst_case", "--set", "s=0.5", "--set", "bootstrap_B=100"]
        assert main([*args, "--data", *_data(gauss_dir), "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["objective"]["name"] == "worst_case" and rep["objective"]["s"] == 0.5
        assert rep["trace"]["final_objective"] <= rep["trace"]["initial_objective"]


class TestSweepAndBenchmark:
    def test_benchmark_w1(self, w1_dir, tmp_path):
        out = tmp_path / "b"
        cfg = _write(tmp_path / "b.cfg", "weights = 1\n")
        assert main(["benchmark", "--config", cfg, "--data-long", *_data(w1_dir, True), "--data-short", *_data(w1_dir),
                     "--out", str(out)]) == 0
        est = json.loads((out / "sensitivity.json").read_text())
        assert (est["cy"], est["cd"], est["rho"]) == pytest.approx((1.0, 0.6, np.sqrt(0.5)), abs=0.1)
        assert est["short_columns"] == [0]

    def test_benchmark_containment(self, w1_dir, gauss_dir, tmp_path, capsys):
        code = main(["benchmark", "--data-long", *_data(w1_dir, True), "--data-short", *_data(gauss_dir), "--out", str(tmp_path)])
        assert code == 3
        assert "not contained" in capsys.readouterr().err

    def test_sweep(self, gauss_dir, tmp_path):
        bench = tmp_path / "b"
        assert main(["benchmark", "--data-long", *_data(gauss_dir, True), "--data-short", *_data(gauss_dir), "--out", str(bench)]) == 0
        cfg = _write(tmp_path / "s.cfg", f"s_grid = linspace:0:2:11\nbootstrap_B = 100\nbenchmark = {bench / 'sensitivity.json'}\n")
        out = tmp_path / "sw"
        assert main(["sweep", "--config", cfg, "--data", *_data(gauss_dir), "--out", str(out), "--plot"]) == 0
        rows = _rows(out / "sweep.csv")
        assert len(rows) == 11 and all(r["status"] == "ok" for r in rows)
        col = [float(r["worst_case_dr_model"]) for r in rows]
        assert np.all(np.diff(col) > 0)
        side = json.loads((out / "sweep.json").read_text())
        bench_s = json.loads((bench / "sensitivity.json").read_text())["s"]
        assert side["benchmark_s"] == bench_s
        assert (out / "sweep.png").exists()
        # row 0 is the DR model
        assert main(["optimize", "--set", "bootstrap_B=100", "--data", *_data(gauss_dir), "--out", str(tmp_path / "dr")]) == 0
        dr = json.loads((tmp_path / "dr" / "model.json").read_text())
        assert side["models"][0]["weights"] == dr["weights"] and side["models"][0]["bias"] == dr["bias"]
        assert float(rows[0]["worst_case"]) == float(rows[0]["L_dr_s"])


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        main(["evaluate", "--help"])
    out = capsys.readouterr().out
    for key in ("holdout_frac", "s_grid", "bootstrap_B", "--seed", "--plot"):
        assert key in out
