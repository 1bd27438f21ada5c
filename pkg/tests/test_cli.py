from __future__ import annotations

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from gammabound import config
from gammabound.cli import main
from gammabound.core import RngSpec
from gammabound.experiments import ResultRow, run_experiment, spearman_permutation, summarize


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_config_round_trip(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nbounds.estimator = zsb\nexperiment.gammas=1,2.5\n\ntest.one_sided=yes\n")
    cfg = config.load_config(p, ["test.alpha=0.1"])
    assert cfg["bounds.estimator"] == "zsb" and cfg["experiment.gammas"] == [1.0, 2.5]
    assert cfg["test.one_sided"] is True and cfg["test.alpha"] == 0.1
    again = config.parse_assignments(config.dump_config(cfg).splitlines())
    assert again == cfg
    for bad in (["nokey"], ["unknown.key=1"], ["test.n_bs=abc"]):
        with pytest.raises(config.ConfigError):
            config.parse_assignments(bad)
    assert all(k in config.help_text() for k in config.DEFAULTS)


def _simulate(tmp_path, name="sim", *extra):
    out = tmp_path / name
    rc = main(["simulate", "--out", str(out), "--n-rct", "300", "--n-obs", "400", "--seed", "3", *extra])
    assert rc == 0
    return out


def test_simulate_files_and_determinism(tmp_path, capsys):
    a = _simulate(tmp_path, "a")
    b = _simulate(tmp_path, "b")
    capsys.readouterr()
    for name in ("rct.csv", "obs.csv", "oracle.csv", "spec.json"):
        assert (a / name).is_file()
    for name in ("rct.csv", "obs.csv", "oracle.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    with (a / "rct.csv").open() as fh:
        assert sum(1 for _ in fh) == 301
    with (a / "oracle.csv").open() as fh:
        assert next(csv.reader(fh)) == ["u", "y0", "y1", "e", "e_plus"]
    spec = json.loads((a / "spec.json").read_text())
    assert spec["n_obs"] == 400 and "version" in spec


def test_unwritable_directory(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    rc = main(["simulate", "--out", str(blocker / "sub")])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "IoError" and str(blocker) in err["message"]


def test_test_and_lower_bound_commands(tmp_path, capsys):
    sim = _simulate(tmp_path, "sim", "--gamma-star", "5")
    capsys.readouterr()
    base = ["--rct", str(sim / "rct.csv"), "--obs", str(sim / "obs.csv"), "--n-bs", "20", "--seed", "1"]
    rc = main(["test", "--gamma", "20", *base])
    rec = _json_out(capsys)
    assert rc == (3 if rec["reject"] else 0)
    for key in ("gamma", "stat_plus", "stat_minus", "threshold", "reject", "mu_hat", "se_mu",
                "bound_lower", "bound_upper", "se_lower", "se_upper", "target", "estimator", "version"):
        assert key in rec
    rc = main(["lower-bound", "--grid-step", "0.5", "--grid-max", "10", "--flag", *base])
    rec = _json_out(capsys)
    assert rc == 0
    assert rec["psi_bin"] == int(rec["gamma_lb"] is None or rec["gamma_lb"] > 1)
    assert rec["grid"] == {"start": 1.0, "step": 0.5, "max": 10.0}
    rc = main(["test", "--gamma", "2", "--target", "rct", *base])
    rec = _json_out(capsys)
    assert rec["target"] == "rct" and rec["estimator"] == "cate_learner"


def test_confounded_data_rejects_at_one(tmp_path, capsys):
    out = tmp_path / "big"
    main(["simulate", "--out", str(out), "--n-rct", "20000", "--n-obs", "20000", "--seed", "1"])
    capsys.readouterr()
    rc = main(["test", "--gamma", "1", "--rct", str(out / "rct.csv"), "--obs", str(out / "obs.csv"),
               "--n-bs", "20"])
    assert rc == 3


def test_malformed_csv_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,y,x0\n1,oops,0.2\n")
    rc = main(["test", "--gamma", "1", "--rct", str(bad), "--obs", str(bad)])
    assert rc == 1
    assert "error" in json.loads(capsys.readouterr().err)
    rc = main(["test", "--gamma", "1", "--rct", str(tmp_path / "missing.csv"), "--obs", str(bad)])
    assert rc == 1


def test_subsample_command(tmp_path, capsys):
    sim = _simulate(tmp_path, "s", "--keep-hidden")
    capsys.readouterr()
    out = tmp_path / "semi.csv"
    rc = main(["subsample", "--input", str(sim / "rct.csv"), "--confounder", "u0", "--gamma", "2",
               "--out", str(out)])
    assert rc == 0
    audit = json.loads(out.with_suffix(".audit.json").read_text())
    for key in ("pi_hat", "ell", "u", "q_star", "m_constant", "passes", "survival_fraction"):
        assert key in audit
    header = out.read_text().splitlines()[0]
    assert "u0" not in header


def test_oracle_command(capsys):
    rc = main(["oracle-lb", "--gamma-star", "1", "--mc-n", "20000"])
    assert rc == 0 and _json_out(capsys)["gamma_lb_inf"] == 1.0


def test_experiment_command(tmp_path, capsys):
    out = tmp_path / "exp"
    rc = main(["experiment", "--out", str(out), "--jobs", "1",
               "--set", "experiment.seeds=2", "--set", "experiment.gammas=1,5",
               "--set", "synthetic.n_rct=300", "--set", "synthetic.n_obs=300", "--set", "test.n_bs=10"])
    assert rc == 0
    rows = list(csv.DictReader((out / "results.csv").open()))
    assert len(rows) == 2 * 2
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["rejection_rate"]) == {"1.0", "5.0"}
    assert any(line.startswith("experiment.seeds=2") for line in summary["config"])


def test_experiment_parallel_matches_serial():
    cfg = config.load_config(None, ["experiment.seeds=2", "experiment.gammas=1,3", "synthetic.n_rct=200",
                                    "synthetic.n_obs=200", "test.n_bs=5"])
    serial = run_experiment(cfg, jobs=1)
    parallel = run_experiment(cfg, jobs=2)
    key = lambda rows: [(r.seed, r.gamma, r.reject) for r in rows]
    assert key(serial) == key(parallel)


def test_failed_replicates_are_recorded():
    cfg = config.load_config(None, ["experiment.seeds=1", "synthetic.n_obs=3", "synthetic.n_rct=50"])
    rows = run_experiment(cfg, jobs=1)
    assert len(rows) == 1 and rows[0].error
    assert summarize(cfg, rows).failed == 1


def test_spearman_permutation():
    gen = np.random.default_rng(0)
    a = gen.normal(size=50)
    rho, p = spearman_permutation(a, a + 0.1 * gen.normal(size=50), n_perm=500, rng=RngSpec(1))
    assert rho > 0.9 and p < 0.01
    rho, p = spearman_permutation(a, gen.normal(size=50), n_perm=500, rng=RngSpec(1))
    assert p > 0.01


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "gammabound", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "lower-bound" in res.stdout
