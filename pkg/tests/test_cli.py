import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose

jsonschema = pytest.importorskip("jsonschema")
referencing = pytest.importorskip("referencing")

from weakiv import IVDataset, estimate_liml, robust_covariance
from weakiv.cli import main
from weakiv.simulation import Design, SimulationConfig, run_design

from conftest import make_data
from test_empirics import YOGO_HEADER, yogo_rows

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def _validator(name):
    resources = []
    for p in SCHEMAS.glob("*.schema.json"):
        doc = json.loads(p.read_text())
        resources.append((p.name, referencing.Resource.from_contents(doc)))
        resources.append((doc["$id"], referencing.Resource.from_contents(doc)))
    registry = referencing.Registry().with_resources(resources)
    schema = json.loads((SCHEMAS / name).read_text())
    return jsonschema.Draft202012Validator(schema, registry=registry)


@pytest.fixture
def data_csv(tmp_path, rng):
    d = make_data(rng, n=150, kz=3, pi=0.4)
    extra = rng.standard_normal(150)
    path = tmp_path / "d.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x", "z1", "z2", "z3", "w"])
        for i in range(150):
            w.writerow([d.y[i], d.X[i, 0], *d.Z[i], extra[i]])
    return path, d, extra


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


BASE = ["--y", "y", "--x", "x", "--z", "z1,z2,z3"]


def test_estimate_matches_library(capsys, data_csv):
    path, d, _ = data_csv
    code, out, err = _run(capsys, ["estimate", "--data", path, *BASE, "--method", "liml", "--intercept"])
    assert code == 0 and err == ""
    doc = json.loads(out)
    _validator("estimate.schema.json").validate(doc)
    ref = IVDataset(d.y, d.X, d.Z, np.ones((150, 1)))
    lib = estimate_liml(ref)
    assert_allclose(doc["result"]["beta_hat"], lib.beta_hat, rtol=1e-12)
    se = np.sqrt(robust_covariance(ref, lib)[0, 0])
    assert_allclose(doc["result"]["std_errors"][0], se, rtol=1e-12)
    assert doc["manifest"]["command"] == "estimate"


@pytest.mark.parametrize("method", ["2sls", "kclass:0.5", "gmm2"])
def test_estimate_methods(capsys, data_csv, tmp_path, method):
    path, _, _ = data_csv
    out_file = tmp_path / "o" / "est.json"
    code, out, _ = _run(capsys, ["estimate", "--data", path, *BASE, "--method", method, "--cov", "nw:2", "--out", out_file])
    assert code == 0 and out == ""
    _validator("estimate.schema.json").validate(json.loads(out_file.read_text()))


def test_estimate_with_controls(capsys, data_csv):
    path, _, _ = data_csv
    code, out, _ = _run(capsys, ["estimate", "--data", path, *BASE, "--exog", "const,w"])
    assert code == 0
    assert json.loads(out)["manifest"]["config"]["exog"] == ["const", "w"]


def test_usage_errors(capsys, data_csv):
    path, _, _ = data_csv
    code, out, err = _run(capsys, ["estimate", "--data", path, "--y", "y", "--x", "x"])
    assert code == 2 and out == "" and "UsageError" in err
    code, _, err = _run(capsys, ["estimate", "--data", path, *BASE, "--method", "ols"])
    assert code == 2
    code, _, err = _run(capsys, ["test", "--data", path, *BASE, "--tests", "bogus"])
    assert code == 2 and "ConfigError" in err


def test_collinear_instruments_exit_3(capsys, tmp_path, rng):
    d = make_data(rng, n=50, kz=2)
    path = tmp_path / "c.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x", "z1", "z2", "z3"])
        for i in range(50):
            w.writerow([d.y[i], d.X[i, 0], d.Z[i, 0], d.Z[i, 1], 2 * d.Z[i, 0]])
    code, out, err = _run(capsys, ["estimate", "--data", path, *BASE])
    assert code == 3 and out == ""
    assert "RankError" in err and len(err.strip().splitlines()) == 1


def test_missing_file_and_column(capsys, data_csv, tmp_path):
    path, _, _ = data_csv
    code, _, err = _run(capsys, ["estimate", "--data", tmp_path / "nope.csv", *BASE])
    assert code == 3 and "ParseError" in err
    code, _, err = _run(capsys, ["estimate", "--data", path, "--y", "y", "--x", "x", "--z", "z1,q"])
    assert code == 3 and "SchemaError" in err


def test_tests_output(capsys, data_csv):
    path, _, _ = data_csv
    tests = "j,kp,score-2sls,score-liml,sargan,feff"
    code, out, _ = _run(capsys, ["test", "--data", path, *BASE, "--tests", tests, "--intercept"])
    assert code == 0
    doc = json.loads(out)
    _validator("test.schema.json").validate(doc)
    res = {r["test"]: r for r in doc["results"]}
    assert abs(res["HansenJ"]["statistic"] - res["RobustScore2SLS"]["statistic"]) <= 1e-8
    assert_allclose(res["KP"]["statistic"], res["RobustScoreLIML"]["statistic"], rtol=1e-12)
    assert res["EffectiveF"]["critical_value"] > 0
    for r in doc["results"]:
        if r["test"] != "EffectiveF":
            assert 0 <= r["p_value"] <= 1


def test_partition_flag(capsys, data_csv):
    path, _, _ = data_csv
    stats = []
    for part in ("0,1", "1,2"):
        code, out, _ = _run(capsys, ["test", "--data", path, *BASE, "--tests", "kp", "--partition", part])
        assert code == 0
        stats.append(json.loads(out)["results"][0]["statistic"])
    assert_allclose(stats[0], stats[1], rtol=1e-8)
    code, _, err = _run(capsys, ["test", "--data", path, *BASE, "--tests", "kp", "--partition", "0"])
    assert code == 4 and "PartitionError" in err


def test_feff_multiple_regressors(capsys, data_csv):
    path, _, _ = data_csv
    code, out, err = _run(capsys, ["test", "--data", path, "--y", "y", "--x", "x,w", "--z", "z1,z2,z3", "--tests", "feff"])
    assert code == 2 and out == "" and "UnsupportedError" in err


def test_simulate(capsys, tmp_path):
    out_dir = tmp_path / "sim"
    grid = "16,1,8,4,0.5,2,32,64"
    argv = ["simulate", "--design", "1:0.5", "--kz", "2", "--rho", "0.95", "--mu2", grid,
            "--reps", "300", "--seed", "4", "--threads", "2", "--out", out_dir]
    code, out, err = _run(capsys, argv)
    assert code == 0 and out == ""
    with open(out_dir / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    mu2 = [float(r["mu2"]) for r in rows]
    assert len(rows) == 8 and mu2 == sorted(mu2)
    v = _validator("simulation_summary.schema.json")
    for m in mu2:
        v.validate(json.loads((out_dir / f"cell_mu2_{m:g}.json").read_text()))
    _validator("manifest.schema.json").validate(json.loads((out_dir / "manifest.json").read_text()))
    # pass-through of run_design and independence from the worker count
    cfg = SimulationConfig(Design("design1", 0.5), k_z=2, rho=0.95, mu2=4, replications=300, seed=4)
    assert json.loads((out_dir / "cell_mu2_4.json").read_text()) == json.loads(run_design(cfg, 1).to_json())
    again = tmp_path / "sim1"
    argv[-3:] = ["1", "--out", again]
    assert _run(capsys, argv)[0] == 0
    assert (again / "summary.csv").read_bytes() == (out_dir / "summary.csv").read_bytes()


def test_simulate_bad_reps(capsys, tmp_path):
    code, _, err = _run(capsys, ["simulate", "--design", "1:0.5", "--rho", "0.5", "--mu2", "4", "--reps", "0", "--out", tmp_path])
    assert code == 2 and "ConfigError" in err


def test_limit(capsys):
    code, out, _ = _run(capsys, ["limit", "--design", "1:0.5", "--rho", "0.95", "--mu2", "4", "--draws", "2000", "--seed", "3"])
    assert code == 0
    doc = json.loads(out)
    _validator("limit.schema.json").validate(doc)
    assert 0 <= doc["result"]["rejection"]["KP"] <= 1
    code, out2, _ = _run(capsys, ["limit", "--design", "1:0.5", "--rho", "0.95", "--mu2", "4", "--draws", "2000", "--seed", "3"])
    assert json.loads(out2)["result"] == doc["result"]
    code, _, err = _run(capsys, ["limit", "--design", "1:0.5", "--rho", "0.5", "--mu2", "4", "--draws", "10"])
    assert code == 2


def test_eis(capsys, tmp_path, rng):
    path = tmp_path / "y.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(YOGO_HEADER)
        w.writerows(yogo_rows(rng, "USA") + yogo_rows(rng, "AUS", T=90))
    out_dir = tmp_path / "eis"
    code, out, _ = _run(capsys, ["eis", "--data", path, "--schema", "yogo", "--out", out_dir])
    assert code == 0 and out == ""
    doc = json.loads((out_dir / "eis.json").read_text())
    _validator("eis_report.schema.json").validate(doc)
    assert len(doc["rows"]) == 4
    kp = {(r["country"], r["normalization"]): r["kp_stat"] for r in doc["rows"]}
    for c in ("USA", "AUS"):
        assert abs(kp[(c, "psi")] - kp[(c, "invpsi")]) <= 1e-8
    first = (out_dir / "eis.csv").read_bytes()
    assert _run(capsys, ["eis", "--data", path, "--schema", "yogo", "--out", out_dir])[0] == 0
    assert (out_dir / "eis.csv").read_bytes() == first


def test_eis_errors(capsys, tmp_path):
    code, _, _ = _run(capsys, ["eis", "--data", tmp_path / "x.csv", "--schema", "penn", "--out", tmp_path])
    assert code == 2
    empty = tmp_path / "e.csv"
    empty.write_text("")
    code, _, err = _run(capsys, ["eis", "--data", empty, "--schema", "yogo", "--out", tmp_path])
    assert code == 3 and "ParseError" in err


def test_module_entry_point(data_csv):
    path, _, _ = data_csv
    out = subprocess.run(
        [sys.executable, "-m", "weakiv", "test", "--data", str(path), *BASE, "--tests", "sargan"],
        capture_output=True, text=True,
    )
    assert out.returncode == 0 and out.stderr == ""
    assert json.loads(out.stdout)["results"][0]["test"] == "Sargan"
