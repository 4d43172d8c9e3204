"""Tests for curve tables, configuration parsing, model files and the command line."""

import json
import subprocess
import sys

import numpy as np
import pytest

from simm import DataSet, FunctionalSample
from simm.cli import export_cov_tables, main
from simm.covariance import kernel_eval
from simm.io import (
    SCHEMA,
    ConfigError,
    DataError,
    fitted_from_dict,
    fitted_to_dict,
    load,
    load_fitted,
    parse_config,
    read_table,
    save,
)

SIM_CONFIG = """
[basis]
interior_knots = 5

[warp]
family = brownian-bridge
anchors = 3
tau = 0.15

[amplitude]
dimension = 2
kernel = matern
kappa = 0.2
scales = 0.05

[fit]
max_outer = 2
seed = 3

[simulate]
subjects = 3
samples_per_subject = 5
n_times = 20
sigma = 0.02
template_seed = 4
"""


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


@pytest.fixture
def sim_data(tmp_path):
    cfg = write(tmp_path / "sim.ini", SIM_CONFIG)
    out = str(tmp_path / "data.csv")
    assert main(["simulate", "--config", cfg, "--out", out]) == 0
    return cfg, out


class TestLoad:
    def test_shape(self, tmp_path):
        p = write(tmp_path / "d.csv", "sample_id,subject_id,t,y1,y2\na,x,0,1,2\na,x,1,3,4\na,x,2,5,6\nb,y,0,1,1\nb,y,1,2,2\nb,y,2,3,3\n")
        data = load(p)
        assert len(data) == 2 and data.q == 2
        assert [s.m for s in data] == [3, 3]
        np.testing.assert_array_equal(data[0].times, [0.0, 0.5, 1.0])
        assert data.subjects == ("x", "y")

    def test_missing_field_masked(self, tmp_path):
        p = write(tmp_path / "d.csv", "sample_id,subject_id,t,y1,y2\na,x,0,1,2\na,x,1,3,\na,x,2,5,NA\n")
        s = load(p)[0]
        assert s.mask.tolist() == [[True, True], [True, False], [True, False]]
        np.testing.assert_array_equal(s.stacked(), [1, 2, 3, 5])

    def test_rows_sorted_and_rescaled(self, tmp_path):
        p = write(tmp_path / "d.csv", "sample_id,subject_id,t,y1\na,x,30,3\na,x,10,1\na,x,20,2\n")
        s = load(p)[0]
        np.testing.assert_array_equal(s.values[:, 0], [1, 2, 3])
        np.testing.assert_array_equal(s.times, [0, 0.5, 1])
        np.testing.assert_array_equal(s.original_times, [10, 20, 30])
        assert s.to_original(0.25) == 15.0

    def test_global_rescale(self, tmp_path):
        p = write(tmp_path / "d.csv", "sample_id,subject_id,t,y1\na,x,0,1\na,x,5,1\nb,x,5,2\nb,x,10,2\n")
        data = load(p, rescale="global")
        np.testing.assert_array_equal(data[0].times, [0, 0.5])
        np.testing.assert_array_equal(data[1].times, [0.5, 1])
        assert [s.repetition for s in data] == [0, 1]

    def test_duplicate_reports_line(self, tmp_path):
        p = write(tmp_path / "d.csv", "sample_id,subject_id,t,y1\na,x,0,1\na,x,1,2\na,x,1,3\n")
        with pytest.raises(DataError, match="line 4"):
            load(p)

    @pytest.mark.parametrize(
        "text",
        [
            "id,subject_id,t,y1\na,x,0,1\n",
            "sample_id,subject_id,t,y1\na,x,0\n",
            "sample_id,subject_id,t,y1\na,x,zero,1\n",
            "sample_id,subject_id,t,y1\na,x,0,1\na,z,1,1\n",
            "sample_id,subject_id,t,y1\n",
        ],
    )
    def test_malformed(self, tmp_path, text):
        with pytest.raises(DataError):
            load(write(tmp_path / "d.csv", text))

    def test_round_trip(self, tmp_path, rng):
        samples = []
        for i in range(4):
            t = np.sort(rng.uniform(0, 100, 7))
            y = rng.standard_normal((7, 3))
            mask = rng.uniform(size=(7, 3)) > 0.2
            mask[:, 0] = True
            samples.append(FunctionalSample(t, np.where(mask, y, np.nan), subject=i % 2, sample_id=f"s{i}", mask=mask))
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save(DataSet(tuple(samples), ("p", "q")), p1)
        first = load(p1)
        save(first, p2)
        assert p1.read_bytes() == p2.read_bytes()
        for a, b in zip(samples, first):
            np.testing.assert_array_equal(b.original_times, a.times)
            np.testing.assert_array_equal(b.mask, a.mask)
            np.testing.assert_array_equal(b.values[b.mask], a.values[a.mask])
            assert b.sample_id == a.sample_id


class TestConfig:
    def test_defaults(self):
        cfg = parse_config(text="", q=2)
        assert cfg.spec.q == 2
        assert cfg.fit.max_outer == 5 and cfg.fit.rel_tol == 1e-4
        assert cfg.spec.warp.covariance.tau == 0.1
        assert cfg.spec.amplitude.kernel.kappa == 0.2
        assert cfg.fit.init == "split"

    def test_explicit_knots_and_dynamic(self):
        text = "[basis]\nknots = 0.4, 0.6\n[amplitude]\nvariant = dynamic\nanchor_times = 0, 0.4, 0.6, 1\nscales = 0.1\nkernel = mixture*matern\n"
        cfg = parse_config(text=text, q=3)
        np.testing.assert_array_equal(cfg.spec.basis.interior_knots, [0.4, 0.6])
        assert cfg.spec.amplitude.anchors.matrices.shape == (4, 3, 3)
        assert cfg.fit.init == "given"

    @pytest.mark.parametrize(
        "text",
        [
            "[bogus]\n",
            "[warp]\nfamily = spiral\n",
            "[amplitude]\nkernel = cauchy\n",
            "[amplitude]\nvariant = other\n",
            "[classify]\nmethod = knn\n",
            "[amplitude]\ndimension = 3\n",
            "[warp]\ntau = -1\n",
            "not an ini file",
        ],
    )
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_config(text=text, q=2)

    def test_dimension_required_without_data(self):
        with pytest.raises(ConfigError):
            parse_config(text="")


class TestModelFile:
    def test_round_trip(self, sim_data, tmp_path):
        cfg, data = sim_data
        out = tmp_path / "fit"
        assert main(["fit", "--config", cfg, "--data", data, "--out", str(out)]) == 0
        fitted, raw = load_fitted(out / "model.json")
        assert raw["schema"] == SCHEMA
        again = fitted_to_dict(fitted, load(data))
        assert json.loads(json.dumps(again)) == {k: v for k, v in raw.items()}
        back = fitted_from_dict(again)
        assert back.sigma2 == fitted.sigma2

    def test_schema_checked(self, tmp_path):
        p = write(tmp_path / "m.json", json.dumps({"schema": "other/9"}))
        with pytest.raises(DataError):
            load_fitted(p)


class TestCLI:
    def test_fit_outputs_and_determinism(self, sim_data, tmp_path):
        cfg, data = sim_data
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["fit", "--config", cfg, "--data", data, "--out", str(a)]) == 0
        assert main(["fit", "--config", cfg, "--data", data, "--out", str(b)]) == 0
        for name in ("model.json", "trace.csv", "warps.csv", "aligned.csv", "report.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name
        report = dict(line.split(" = ") for line in (a / "report.txt").read_text().splitlines())
        assert float(report["sigma2"]) > 0
        header, rows = read_table(a / "warps.csv")
        assert header == ["sample_id", "w1", "w2", "w3", "shift"] and len(rows) == 15
        header, rows = read_table(a / "aligned.csv")
        assert header == ["sample_id", "t", "v", "y1", "y2"] and len(rows) == 15 * 20

    def test_tables_reload_exactly(self, sim_data, tmp_path):
        cfg, data = sim_data
        out = tmp_path / "fit"
        main(["fit", "--config", cfg, "--data", data, "--out", str(out)])
        fitted, _ = load_fitted(out / "model.json")
        _, rows = read_table(out / "warps.csv")
        for row, lat in zip(rows, fitted.latents):
            np.testing.assert_array_equal([float(x) for x in row[1:4]], lat.w)

    def test_zero_variance_report(self, tmp_path):
        t = np.linspace(0, 1, 25)
        lines = ["sample_id,subject_id,t,y1,y2"]
        for i in range(3):
            lines += [f"s{i},a,{float(x)!r},{float(x**3 - x)!r},{float(2 * x**2 + 1)!r}" for x in t]
        data = write(tmp_path / "flat.csv", "\n".join(lines) + "\n")
        cfg = write(tmp_path / "c.ini", "[basis]\ninterior_knots = 4\n[fit]\nmax_outer = 2\n")
        assert main(["fit", "--config", cfg, "--data", data, "--out", str(tmp_path / "o")]) == 0
        report = dict(line.split(" = ") for line in (tmp_path / "o" / "report.txt").read_text().splitlines())
        assert float(report["sigma2"]) < 1e-10

    def test_simulate_deterministic(self, tmp_path):
        cfg = write(tmp_path / "sim.ini", SIM_CONFIG)
        a, b, c = (str(tmp_path / n) for n in ("a.csv", "b.csv", "c.csv"))
        assert main(["simulate", "--config", cfg, "--out", a]) == 0
        assert main(["simulate", "--config", cfg, "--out", b]) == 0
        assert main(["simulate", "--config", cfg, "--out", c, "--seed", "9"]) == 0
        assert open(a, "rb").read() == open(b, "rb").read()
        assert open(a, "rb").read() != open(c, "rb").read()

    def test_align_matches_fit_structure(self, sim_data, tmp_path):
        cfg, data = sim_data
        main(["fit", "--config", cfg, "--data", data, "--out", str(tmp_path / "f")])
        assert main(["align", "--model", str(tmp_path / "f" / "model.json"), "--data", data, "--out", str(tmp_path / "al")]) == 0
        h1, r1 = read_table(tmp_path / "f" / "aligned.csv")
        h2, r2 = read_table(tmp_path / "al" / "aligned.csv")
        assert h1 == h2 and len(r1) == len(r2)
        assert [r[:2] for r in r1] == [r[:2] for r in r2]

    def test_classify_memorization(self, tmp_path):
        cfg = write(tmp_path / "sim.ini", SIM_CONFIG.replace("sigma = 0.02", "sigma = 0.005") + "\n[classify]\nmethod = nc\n")
        data = str(tmp_path / "d.csv")
        main(["simulate", "--config", cfg, "--out", data])
        assert main(["classify", "--config", cfg, "--data", data, "--test", data, "--out", str(tmp_path / "c")]) == 0
        _, rows = read_table(tmp_path / "c" / "accuracy.csv")
        assert rows[-1][0] == "mean" and float(rows[-1][3]) == 1.0

    def test_classify_cross_validation_table(self, tmp_path):
        cfg = write(tmp_path / "sim.ini", SIM_CONFIG + "\n[classify]\nmethod = nc\nfolds = 5\n")
        data = str(tmp_path / "d.csv")
        main(["simulate", "--config", cfg, "--out", data])
        assert main(["classify", "--config", cfg, "--data", data, "--out", str(tmp_path / "c")]) == 0
        header, rows = read_table(tmp_path / "c" / "accuracy.csv")
        assert header == ["fold", "correct", "total", "accuracy"]
        assert [r[0] for r in rows] == ["1", "2", "3", "4", "5", "mean"]
        _, preds = read_table(tmp_path / "c" / "predictions.csv")
        assert len(preds) == 15

    def test_export_cov_diagonal(self, sim_data, tmp_path):
        cfg, data = sim_data
        main(["fit", "--config", cfg, "--data", data, "--out", str(tmp_path / "f")])
        assert main(["export-cov", "--model", str(tmp_path / "f" / "model.json"), "--out", str(tmp_path / "e"), "--grid", "11"]) == 0
        header, rows = read_table(tmp_path / "e" / "covariance.csv")
        assert header == ["t", "var_1", "var_2", "corr_1_2"] and len(rows) == 11
        assert all(float(r[3]) == 0.0 for r in rows)
        _, axes = read_table(tmp_path / "e" / "ellipses.csv")
        assert len(axes) == 22

    def test_export_cov_reconstruction_and_anchor_identity(self, tmp_path):
        cfg = write(
            tmp_path / "dyn.ini",
            SIM_CONFIG.replace("scales = 0.05", "scales = 0.05\nvariant = dynamic\nanchor_times = 0, 0.4, 0.6, 1"),
        )
        data = str(tmp_path / "d.csv")
        main(["simulate", "--config", cfg, "--out", data])
        assert main(["fit", "--config", cfg, "--data", data, "--out", str(tmp_path / "f")]) == 0
        fitted, _ = load_fitted(tmp_path / "f" / "model.json")
        ch, cr, ah, ar = export_cov_tables(fitted, 101)
        q = 2
        for i, row in enumerate(cr):
            var = np.array(row[1 : 1 + q])
            sd = np.sqrt(var)
            M = np.diag(var)
            M[0, 1] = M[1, 0] = row[3] * sd[0] * sd[1]
            axes = ar[q * i : q * (i + 1)]
            lam = np.array([a[2] for a in axes])
            Q = np.array([a[4:] for a in axes]).T
            np.testing.assert_allclose(Q @ np.diag(lam) @ Q.T, M, atol=1e-10 * np.abs(M).max())
            np.testing.assert_allclose([a[3] for a in axes], np.sqrt(5.991464547107979 * np.maximum(lam, 0)), rtol=1e-9)
        amp = fitted.spec.amplitude
        for tk, A in zip(amp.anchors.times, amp.anchors.matrices):
            i = int(round(tk * 100))
            row = cr[i]
            assert row[0] == pytest.approx(tk, abs=1e-15)
            f = kernel_eval(amp.kernel, tk, tk)
            target = fitted.sigma2 * (f * A + np.diag(fitted.spec.noise.rho))
            np.testing.assert_allclose(row[1:3], np.diag(target), rtol=1e-10)
            assert row[3] == pytest.approx(target[0, 1] / np.sqrt(target[0, 0] * target[1, 1]), rel=1e-9)

    def test_exit_codes(self, sim_data, tmp_path):
        cfg, data = sim_data
        assert main([]) == 1
        assert main(["fit", "--config", cfg]) == 1
        assert main(["fit", "--config", cfg, "--data", data, "--out", str(tmp_path / "o"), "--threads", "0"]) == 1
        bad_cfg = write(tmp_path / "bad.ini", "[warp]\nfamily = spiral\n")
        assert main(["fit", "--config", bad_cfg, "--data", data, "--out", str(tmp_path / "o")]) == 1
        assert main(["fit", "--config", cfg, "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 2
        dup = write(tmp_path / "dup.csv", "sample_id,subject_id,t,y1,y2\na,x,0,1,1\na,x,0,1,1\n")
        assert main(["fit", "--config", cfg, "--data", dup, "--out", str(tmp_path / "o")]) == 2
        assert main(["export-cov", "--model", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2

    def test_module_entry_point(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "simm", "fit"], capture_output=True, text=True)
        assert res.returncode == 1
        assert "--config" in res.stderr

    def test_simulate_requires_explicit_scales(self, tmp_path):
        cfg = write(tmp_path / "s.ini", SIM_CONFIG.replace("scales = 0.05", "scales = split"))
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d.csv")]) == 1
