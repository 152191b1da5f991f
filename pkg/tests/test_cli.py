import json
import os
import re

import numpy as np
import pytest

from conftest import make_dataset
from grevf import cli
from grevf.cli import ConfigError, DataError, load_dataset, main, parse_config, run_experiment
from grevf.errors import DomainError

LINE = re.compile(r"^error category=\w+ module=\S+( \[[^\]]+\])?: .+$")


def write_data(path, X, y):
    path.write_text("x,y\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(X, y)))
    return path


def write_config(tmp_path, mode="exact", data="data.csv", features="family = dirac\ncount = 6\n", extra="", name="exp.ini"):
    text = f"""[experiment]
mode = {mode}
data = {data}
noise_variance = 0.1
{extra}
[kernel]
family = se
lengthscale = 1.0
variance = 1.0

[domain]
lower = 0
upper = 5

[features]
{features}
[optimizer]
step = 0.01
iters = 2000
tol = 1e-4

[grid]
count = 25
"""
    path = tmp_path / name
    path.write_text(text)
    return path


@pytest.fixture
def data20(tmp_path):
    ds = make_dataset(20, seed=3)
    return write_data(tmp_path / "data.csv", ds.X, ds.y)


class TestLoadDataset:
    def test_single_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n0.0,1.0")
        ds = load_dataset(p, 0.1)
        assert ds.N == 1 and ds.y[0] == 1.0 and ds.noise_variance == 0.1

    def test_empty_body(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n")
        with pytest.raises(DataError, match="no observations"):
            load_dataset(p, 0.1)

    def test_malformed_row_line_number(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\nabc,1.0\n")
        with pytest.raises(DataError, match="line 2") as info:
            load_dataset(p, 0.1)
        assert info.value.line == 2

    def test_crlf_and_order(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_bytes(b"x,y\r\n2.0,1.5\r\n0.5,-1.0\r\n")
        ds = load_dataset(p, 0.1)
        np.testing.assert_array_equal(ds.X, [2.0, 0.5])
        np.testing.assert_array_equal(ds.y, [1.5, -1.0])

    def test_out_of_domain_lists_values(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x,y\n1.0,0\n7.5,0\n-2,0\n")
        with pytest.raises(DomainError, match=r"7\.5.*-2"):
            load_dataset(p, 0.1, (0.0, 5.0))

    def test_bad_header(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(DataError):
            load_dataset(p, 0.1)


class TestParseConfig:
    def test_defaults_and_paths(self, tmp_path, data20):
        cfg = parse_config(write_config(tmp_path))
        assert cfg.data == str(data20)
        assert cfg.output == str(tmp_path / "exp.report.json")
        assert cfg.predictions == str(tmp_path / "exp.report.predictions.csv")
        assert cfg.nodes == cli.DEFAULT_NODES
        assert len(cfg.grid) == 25

    def test_env_default_nodes(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.NODES_ENV, "64")
        assert parse_config(write_config(tmp_path)).nodes == 64

    def test_overrides(self, tmp_path):
        cfg = parse_config(write_config(tmp_path), seed=9, out=str(tmp_path / "o.json"))
        assert cfg.optimizer.seed == 9 and cfg.output == str(tmp_path / "o.json")

    @pytest.mark.parametrize(
        "mode,features,extra,field",
        [
            ("bogus", "family = dirac\ncount = 2\n", "", "experiment.mode"),
            ("variational-closed", "family = dirac\ncount = 0\n", "", "features.count"),
            ("variational-closed", "family = wavelet\ncount = 2\n", "", "features.family"),
            ("nystrom", "family = dirac\ncount = 2\n", "", "experiment.reg"),
            ("variational-closed", "family = bump\ncount = 2\n", "", "features.width"),
            ("variational-closed", "family = dirac\ncount = 3\nlocations = 1, 2\n", "", "features.count"),
        ],
    )
    def test_invalid(self, tmp_path, mode, features, extra, field):
        with pytest.raises(ConfigError) as info:
            parse_config(write_config(tmp_path, mode=mode, features=features, extra=extra))
        assert info.value.field == field

    def test_grid_outside_domain(self, tmp_path):
        p = write_config(tmp_path)
        p.write_text(p.read_text().replace("count = 25", "points = 1, 6"))
        with pytest.raises(ConfigError, match="outside"):
            parse_config(p)


class TestRunExperiment:
    def test_exact_single_point(self, tmp_path):
        write_data(tmp_path / "data.csv", [0.0], [1.0])
        report = run_experiment(parse_config(write_config(tmp_path)), write=False)
        assert report["results"]["log_marginal"] == pytest.approx(-0.5 * (np.log(2 * np.pi * 1.1) + 1 / 1.1), abs=1e-12)
        assert report["results"]["log_marginal"] == pytest.approx(-1.421139, abs=1e-6)

    def test_equivalence_dirac(self, tmp_path, data20):
        report = run_experiment(parse_config(write_config(tmp_path, mode="equivalence")), write=False)
        assert report["results"]["equivalence_gap"] <= 1e-8
        assert {r["method"] for r in report["predictions"]} == {"exact", "variational", "nystrom"}
        assert report["results"]["kl_to_posterior"] >= -1e-8

    @pytest.mark.parametrize(
        "features",
        ["family = bump\ncount = 4\nwidth = 0.3\n", "family = eigen\ncount = 4\n"],
    )
    def test_equivalence_other_families(self, tmp_path, data20, features):
        report = run_experiment(parse_config(write_config(tmp_path, mode="equivalence", features=features)), write=False)
        assert report["results"]["equivalence_gap"] <= 1e-6

    def test_custom_table(self, tmp_path, data20):
        xs = np.linspace(0, 5, 201)
        for i, c in enumerate((1.5, 3.5)):
            (tmp_path / f"g{i}.csv").write_text("x,g\n" + "".join(f"{float(x)!r},{float(np.exp(-(x - c) ** 2))!r}\n" for x in xs))
        feats = "family = custom-table\ntables = g0.csv, g1.csv\n"
        report = run_experiment(parse_config(write_config(tmp_path, mode="equivalence", features=feats)), write=False)
        assert report["results"]["M"] == 2
        assert report["results"]["equivalence_gap"] <= 1e-6

    def test_opt_matches_closed(self, tmp_path, data20):
        closed = run_experiment(parse_config(write_config(tmp_path, mode="variational-closed")), write=False)
        opt = run_experiment(parse_config(write_config(tmp_path, mode="variational-opt")), write=False)
        assert abs(opt["results"]["elbo"] - closed["results"]["elbo"]) <= 1e-4

    def test_elbo_trace(self, tmp_path, data20):
        report = run_experiment(parse_config(write_config(tmp_path, mode="elbo-trace")), write=False)
        values = [t["elbo"] for t in report["trace"]]
        assert len(values) >= 2 and values[-1] >= values[0]
        assert report["results"]["elbo_gap"] <= 1e-4

    def test_nystrom(self, tmp_path, data20):
        report = run_experiment(parse_config(write_config(tmp_path, mode="nystrom", extra="reg = 0.01")), write=False)
        assert all(r["variance"] is None for r in report["predictions"])
        assert len(report["predictions"]) == 25

    def test_deterministic(self, tmp_path, data20):
        extra_opt = "family = dirac\ncount = 5\n"
        p = write_config(tmp_path, mode="variational-opt", features=extra_opt)
        p.write_text(p.read_text().replace("tol = 1e-4", "tol = 1e-4\nbatch = 5\niters = 300").replace("iters = 2000\n", ""))

        def numeric(r):
            return json.dumps({k: r[k] for k in ("results", "predictions", "trace")}, default=lambda v: v)

        r1 = run_experiment(parse_config(p, seed=4), write=False)
        r2 = run_experiment(parse_config(p, seed=4), write=False)
        fmt = lambda r: [f"{v:.12g}" for v in r["results"].values()]
        assert fmt(r1) == fmt(r2)
        assert numeric(r1) == numeric(r2)
        r3 = run_experiment(parse_config(p, seed=5), write=False)
        assert fmt(r3) != fmt(r1)

    def test_predictions_round_trip(self, tmp_path, data20):
        cfg = parse_config(write_config(tmp_path, mode="variational-closed"))
        report = run_experiment(cfg)
        back = load_dataset(cfg.predictions, 0.1, cfg.domain)
        np.testing.assert_array_equal(back.X, cfg.grid)
        np.testing.assert_array_equal(back.y, [r["mean"] for r in report["predictions"]])

    def test_multi_method_predictions_have_method_column(self, tmp_path, data20):
        cfg = parse_config(write_config(tmp_path, mode="equivalence"))
        run_experiment(cfg)
        lines = open(cfg.predictions).read().splitlines()
        assert lines[0] == "x,mean,variance,method"
        assert len(lines) == 1 + 3 * 25
        load_dataset(cfg.predictions, 0.1, cfg.domain)

    def test_module_error_attribution(self, tmp_path):
        write_data(tmp_path / "data.csv", [1.0, 2.0], [0.0, 1.0])
        feats = "family = eigen\ncount = 500\n"
        p = write_config(tmp_path, mode="variational-closed", features=feats)
        with pytest.raises(cli.ExperimentError) as info:
            run_experiment(parse_config(p), write=False)
        assert info.value.module == "kernels" or info.value.module == "features"
        assert info.value.field == "features"


class TestMain:
    def test_success_writes_report(self, tmp_path, data20, capsys):
        p = write_config(tmp_path, mode="equivalence")
        out = tmp_path / "sub" / "r.json"
        assert main(["fit", str(p), "--out", str(out), "--verbose"]) == 0
        report = json.loads(out.read_text())
        assert report["results"]["equivalence_gap"] <= 1e-8
        assert report["config"]["mode"] == "equivalence"
        assert "equivalence_gap = " in capsys.readouterr().out
        assert not [f for f in os.listdir(out.parent) if f.endswith(".tmp")]

    @pytest.mark.parametrize(
        "setup,code,category",
        [
            (lambda d: None, 3, "io"),  # missing data file
            (lambda d: (d / "data.csv").write_text("x,y\n1,oops\n"), 3, "parse"),
            (lambda d: (d / "data.csv").write_text("x,y\n9,1\n"), 4, "domain"),
        ],
    )
    def test_failures_single_line(self, tmp_path, capsys, setup, code, category):
        setup(tmp_path)
        p = write_config(tmp_path)
        out = tmp_path / "r.json"
        assert main(["fit", str(p), "--out", str(out)]) == code
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and LINE.match(err[0]) and f"category={category}" in err[0]
        assert not out.exists()

    def test_config_error_exit(self, tmp_path, capsys):
        p = write_config(tmp_path, mode="bogus")
        assert main(["fit", str(p)]) == 2
        err = capsys.readouterr().err.strip()
        assert "experiment.mode" in err and "\n" not in err

    def test_bad_env(self, tmp_path, data20, capsys, monkeypatch):
        monkeypatch.setenv(cli.NODES_ENV, "many")
        assert main(["fit", str(write_config(tmp_path))]) == 2
        assert cli.NODES_ENV in capsys.readouterr().err

    def test_atomic_write_keeps_old_file_on_failure(self, tmp_path, monkeypatch):
        target = tmp_path / "r.json"
        target.write_text("old")

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(cli.os, "replace", boom)
        with pytest.raises(OSError):
            cli._atomic_write(target, "new")
        assert target.read_text() == "old"
        assert os.listdir(tmp_path) == ["r.json"]

    def test_module_entry_point(self, tmp_path, data20):
        import subprocess
        import sys

        p = write_config(tmp_path)
        proc = subprocess.run([sys.executable, "-m", "grevf", "fit", str(p)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "exp.report.json").exists()
