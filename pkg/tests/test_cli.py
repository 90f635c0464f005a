import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from bregbal.cli import EXIT_INFEASIBLE, EXIT_INPUT, dumps, fmt_num, main
from bregbal.design import build_icbps_problem
from bregbal.estimators import ht_estimate
from bregbal.simulation import ScenarioConfig, generate_dataset
from bregbal.solver import fit_weights


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("Z,Y\n1,1\n1,2\n1,3\n0,2\n")
    return path


@pytest.fixture
def simfile(tmp_path):
    d = generate_dataset(ScenarioConfig(), 0)
    path = tmp_path / "sim.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x1", "x2", "x3", "x4", "treat", "y"])
        for i in range(len(d.Z)):
            w.writerow([f"u{i}"] + [repr(float(v)) for v in d.X[i]] + [int(d.Z[i]), repr(float(d.Y[i]))])
    return path, d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_balance_toy_att(toy, tmp_path, capsys):
    out = tmp_path / "w.csv"
    code, _, _ = run(capsys, "balance", "--input", toy, "--estimand", "att", "--distance",
                     "entropy", "--outcome", "Y", "--weights-out", out)
    assert code == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["unit", "weight"]
    np.testing.assert_allclose([float(r[1]) for r in rows[1:]], [1, 1, 1, 3], rtol=1e-8)
    meta = json.load(open(str(out) + ".json"))
    assert meta["status"] == "converged"
    assert meta["lambda_hat"][0] == pytest.approx(-np.log(3), abs=1e-9)
    assert meta["duality_gap"] < 1e-8
    assert len(meta["constraint_residuals"]) == 1


def test_estimate_toy(toy, capsys):
    code, out, _ = run(capsys, "estimate", "--input", toy, "--estimand", "att",
                       "--outcome", "Y", "--distance", "entropy")
    assert code == 0
    res = json.loads(out)
    assert res["tau_hat"] == pytest.approx(0.0, abs=1e-8)
    assert "std_err" not in res and "ci" not in res
    assert res["n"] == 4 and res["estimand"] == "att"
    code, out, _ = run(capsys, "estimate", "--input", toy, "--estimand", "att",
                       "--outcome", "Y", "--ci")
    res = json.loads(out)
    assert res["std_err"] > 0 and res["ci"][0] < res["tau_hat"] < res["ci"][1]


def test_method_ipw_reports_residuals(simfile, capsys):
    path, _ = simfile
    base = ["estimate", "--input", path, "--treatment", "treat", "--outcome", "y", "--id-col", "id"]
    _, out_dual, _ = run(capsys, *base)
    _, out_ipw, _ = run(capsys, *base, "--method", "ipw", "--ci")
    _, out_aipw, _ = run(capsys, *base, "--method", "aipw", "--ci")
    dual, ipw, aipw = json.loads(out_dual), json.loads(out_ipw), json.loads(out_aipw)
    assert set(dual["balance_residuals"]) == {"(intercept)", "x1", "x2", "x3", "x4"}
    assert max(abs(v) for v in dual["balance_residuals"].values()) < 1e-6
    assert max(abs(v) for v in ipw["balance_residuals"].values()) > 1e-3
    assert ipw["tau_hat"] != dual["tau_hat"]
    assert ipw["std_err"] > 0 and aipw["std_err"] > 0


def test_weights_round_trip(simfile, tmp_path, capsys):
    path, d = simfile
    wpath = tmp_path / "w.csv"
    common = ["--input", path, "--treatment", "treat", "--outcome", "y", "--id-col", "id",
              "--estimand", "icbps"]
    assert run(capsys, "balance", *common, "--weights-out", wpath)[0] == 0
    _, out, _ = run(capsys, "estimate", *common, "--weights-file", wpath, "--ci")
    from_file = json.loads(out)
    w, _ = fit_weights(build_icbps_problem(d.C, d.Z))
    assert abs(from_file["tau_hat"] - ht_estimate(w, d.Z, d.Y).tau_hat) <= 1e-12
    _, out, _ = run(capsys, "estimate", *common, "--ci")
    direct = json.loads(out)
    assert from_file["tau_hat"] == direct["tau_hat"]
    assert from_file["std_err"] == pytest.approx(direct["std_err"], rel=1e-12)


def test_diagnose(simfile, tmp_path, capsys):
    path, _ = simfile
    common = ["--input", path, "--treatment", "treat", "--outcome", "y", "--id-col", "id"]
    code, out, _ = run(capsys, "diagnose", *common, "--format", "csv")
    assert code == 0
    rows = list(csv.reader(out.splitlines()))
    assert rows[0] == ["method", "covariate", "smd"] and len(rows) == 5
    assert all(float(r[2]) <= 1e-6 for r in rows[1:])
    code, out, _ = run(capsys, "diagnose", *common, "--method", "ipw")
    rep = json.loads(out)
    assert rep["method"] == "ipw"
    assert max(c["adjusted_smd"] for c in rep["covariates"]) > 1e-4


def test_input_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,Z\n1,1\n2,2\n3,0\n")
    code, _, err = run(capsys, "balance", "--input", bad)
    assert code == EXIT_INPUT and "row 2" in err
    miss = tmp_path / "miss.csv"
    miss.write_text("x,Z\n1,1\n,0\n3,0\n4,1\n")
    code, _, err = run(capsys, "balance", "--input", miss)
    assert code == EXIT_INPUT and "row 2" in err and "missing" in err
    code, _, err = run(capsys, "balance", "--input", tmp_path / "nope.csv")
    assert code == EXIT_INPUT
    code, _, _ = run(capsys, "balance", "--input", miss, "--estimand", "bogus")
    assert code == EXIT_INPUT
    code, _, err = run(capsys, "balance", "--input", miss, "--balance-cols", "q")
    assert code == EXIT_INPUT


def test_binary_two_set_rejected(toy, capsys):
    code, _, err = run(capsys, "balance", "--input", toy, "--estimand", "calibration",
                       "--distance", "binary")
    assert code == EXIT_INPUT and "binary" in err


def test_infeasible_exit_code(tmp_path, capsys):
    sep = tmp_path / "sep.csv"
    sep.write_text("x,Z\n1,1\n2,1\n3,1\n4,0\n5,0\n6,0\n")
    code, _, err = run(capsys, "balance", "--input", sep)
    assert code == EXIT_INFEASIBLE and "infeasible" in err


def test_config_file_and_flag_override(toy, tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text(f'input_path = "{toy}"\nestimand = "ate"\noutcome = "Y"\n')
    code, out, _ = run(capsys, "estimate", "--config", cfg, "--estimand", "att", "--distance", "entropy")
    assert code == 0 and json.loads(out)["estimand"] == "att"
    bad = tmp_path / "bad.toml"
    bad.write_text("wat = 1\n")
    assert run(capsys, "estimate", "--config", bad)[0] == EXIT_INPUT


def test_simulate_outputs(tmp_path, capsys):
    out1, out2, reps = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "r.csv"
    args = ["simulate", "--replications", "5", "--methods", "SENT_twoset,IPW"]
    assert run(capsys, *args, "--output", out1, "--replications-out", reps)[0] == 0
    assert run(capsys, *args, "--output", out2)[0] == 0
    assert open(out1, "rb").read() == open(out2, "rb").read()
    lines = open(out1).read().splitlines()
    assert lines[0] == ("n,sigma2,rho,outcome_scenario,treat_scenario,effect_type,method,"
                        "avg_estimate,mc_std_err,mse,bias,n_failed,truth")
    assert len(lines) == 3
    assert len(open(reps).read().splitlines()) == 11
    code, out, _ = run(capsys, "simulate", "--replications", "1", "--methods", "IPW")
    assert code == 0 and out.splitlines()[1].split(",")[8] == "NA"


def test_simulate_config_validation(tmp_path, capsys):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"scenario": {"n": 200, "treat_scenario": "z"}}))
    assert run(capsys, "simulate", "--config", cfg)[0] == EXIT_INPUT
    cfg.write_text(json.dumps({"replications": 2, "methods": ["BENT"]}))
    code, out, _ = run(capsys, "simulate", "--config", cfg, "--seed", "7")
    assert code == 0 and ",BENT," in out


def test_number_formatting():
    x = 0.1 + 0.2
    assert float(fmt_num(x)) == x
    assert len(fmt_num(1 / 3).replace("0.", "")) == 17
    assert json.loads(dumps({"a": [1 / 3, 2], "b": None, "c": True}))["a"][0] == 1 / 3


def test_console_script(toy):
    env = dict(os.environ)
    res = subprocess.run([sys.executable, "-m", "bregbal.cli", "estimate", "--input", str(toy),
                          "--estimand", "att", "--outcome", "Y"],
                         capture_output=True, text=True, env=env)
    assert res.returncode == 0
    assert json.loads(res.stdout)["tau_hat"] == pytest.approx(0.0, abs=1e-8)
