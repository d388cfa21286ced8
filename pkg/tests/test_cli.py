import json
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
import pytest
from referencing import Registry, Resource

from robustcov import cli
from robustcov.errors import NotSpd
from robustcov.synthetic import write_fixture

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def _registry():
    res = []
    for p in SCHEMAS.glob("*.json"):
        doc = json.loads(p.read_text())
        res.append((doc["$id"], Resource.from_contents(doc)))
    return Registry().with_resources(res)


REGISTRY = _registry()


def validate(doc, name):
    schema = json.loads((SCHEMAS / name).read_text())
    jsonschema.Draft202012Validator(schema, registry=REGISTRY).validate(doc)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return write_fixture(tmp_path_factory.mktemp("data"), weeks=600, seed=0)


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_doc(err):
    doc = json.loads(err.strip().splitlines()[-1])
    validate(doc, "error.schema.json")
    return doc


def test_estimate_outputs_validate(data, tmp_path, capsys):
    prices, universe = data
    code, out, _ = run(["estimate", "--prices", prices, "--universe", universe, "--estimator", "ledoit",
                        "--delta", "auto", "--window", 200, "--out", tmp_path], capsys)
    assert code == 0
    listed = {Path(p).name for p in out.split()}
    assert {"covariance.csv", "correlation.csv", "eigenvalues.json", "estimate.json"} <= listed
    doc = json.loads((tmp_path / "estimate.json").read_text())
    validate(doc, "estimate.schema.json")
    validate(json.loads((tmp_path / "eigenvalues.json").read_text()), "eigenvalues.schema.json")
    assert doc["n_weeks"] == 200 and 0 <= doc["diagnostics"]["delta_star"] <= 1
    cov = pd.read_csv(tmp_path / "covariance.csv").to_numpy()
    assert np.allclose(cov, cov.T) and np.linalg.eigvalsh(cov)[0] > 0


def test_estimate_gerber_reports_both_variants(data, tmp_path, capsys):
    prices, universe = data
    code, _, _ = run(["estimate", "--prices", prices, "--universe", universe, "--estimator", "gerber-mad",
                      "--window", 200, "--out", tmp_path], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "estimate.json").read_text())
    validate(doc, "estimate.schema.json")
    g = doc["gerber"]
    assert g["eq3"]["repaired_condition_number"] <= 4 + 1e-6
    assert g["eq5"]["repaired_is_spd"]
    assert (tmp_path / "gerber_eq5_repaired.csv").is_file()


def test_backtest_cvar_report(data, tmp_path, capsys):
    prices, universe = data
    code, _, _ = run(["backtest", "--prices", prices, "--universe", universe, "--cvar", "0.95:0.05",
                      "--cvar", "0.99:0.1", "--emit-charts", "--out", tmp_path], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    validate(doc, "report.schema.json")
    assert doc["cvar_constraints"] == [{"alpha": 0.95, "beta": 0.05}, {"alpha": 0.99, "beta": 0.1}]
    # the 400-week default window pushes the first rebalance past the split
    assert doc["strategy"]["config"]["window_length"] == 400
    assert doc["strategy"]["n_rebalances"] == doc["benchmark"]["n_rebalances"] == 200
    assert sum(doc["strategy"]["solver_status_counts"].values()) == 200
    assert list(tmp_path.glob("*.svg"))
    rec = pd.read_csv(tmp_path / "records.csv")
    assert len(rec) == 200 and set(rec.columns) >= {"date", "turnover", "cost", "realized_return"}


def test_backtest_nco_reports_cluster_counts(data, tmp_path, capsys):
    prices, universe = data
    code, _, _ = run(["backtest", "--prices", prices, "--universe", universe, "--nco", "--out", tmp_path], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "report.json").read_text())
    validate(doc, "report.schema.json")
    lo, hi = doc["strategy"]["nco"]["k_range"]
    assert 2 <= lo <= hi and len(doc["strategy"]["nco"]["k_per_week"]) == 300


def test_tune_table_shape(data, tmp_path, capsys):
    prices, universe = data
    code, _, _ = run(["tune", "--prices", prices, "--universe", universe, "--estimator", "gerber-mad",
                      "--window", 100, "--out", tmp_path], capsys)
    assert code == 0
    table = pd.read_csv(tmp_path / "fold_table.csv")
    assert table.shape == (8 * 5, 3)
    best = json.loads((tmp_path / "best.json").read_text())
    validate(best, "best.schema.json")
    means = table.groupby("param").sharpe.mean()
    assert best["best"] == means.idxmax() and best["folds"] == 5


def test_config_file_and_flag_override(data, tmp_path, capsys):
    prices, universe = data
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"data.prices": str(prices), "data.universe": str(universe),
                                "estimator.kind": "ewma", "estimator.alpha": 0.05, "backtest.window": 52}))
    code, _, _ = run(["estimate", "--config", conf, "--alpha", 0.02, "--out", tmp_path], capsys)
    assert code == 0
    doc = json.loads((tmp_path / "estimate.json").read_text())
    assert doc["estimator"]["alpha"] == 0.02 and doc["n_weeks"] == 52


@pytest.mark.parametrize("argv", [
    ["tune", "--estimator", "gerber-mad", "--grid", ""],
    ["tune", "--estimator", "sample"],
    ["estimate", "--estimator", "bogus"],
    ["backtest", "--cvar", "0.95:-1"],
    ["backtest", "--nco", "--cvar", "0.95:0.05"],
    ["estimate", "--split", "1.5"],
    ["estimate", "--alpha", "1.5", "--estimator", "ewma"],
])
def test_configuration_errors_exit_2(data, tmp_path, capsys, argv):
    prices, universe = data
    code, _, err = run(argv + ["--prices", prices, "--universe", universe, "--out", tmp_path], capsys)
    assert code == 2
    assert error_doc(err)["exit_code"] == 2


def test_missing_prices_exit_2(tmp_path, capsys):
    code, _, err = run(["estimate", "--prices", tmp_path / "nope.csv"], capsys)
    assert code == 2 and error_doc(err)["error"] == "ConfigError"


def test_data_errors_exit_3(data, tmp_path, capsys):
    prices, universe = data
    bad = tmp_path / "bad.csv"
    bad.write_text("date,A\n2020-01-03,1\n2020-01-03,2\n")
    code, _, err = run(["estimate", "--prices", bad, "--out", tmp_path], capsys)
    assert code == 3 and error_doc(err)["error"] == "DuplicateDate"
    code, _, err = run(["estimate", "--prices", prices, "--window", 5000, "--out", tmp_path], capsys)
    assert code == 3
    uni = tmp_path / "u.csv"
    lines = Path(universe).read_text().splitlines()
    uni.write_text("\n".join(lines[:-1] + [lines[-1].rsplit(",", 1)[0] + ","]) + "\n")
    code, _, err = run(["backtest", "--prices", prices, "--universe", uni, "--out", tmp_path], capsys)
    assert code == 3


def test_numerical_error_exit_4(data, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise NotSpd("matrix is not positive definite")
    monkeypatch.setattr(cli, "estimate_covariance", boom)
    code, _, err = run(["estimate", "--prices", data[0], "--out", tmp_path], capsys)
    assert code == 4 and error_doc(err)["error"] == "NotSpd"


def test_unexpected_error_exit_1(data, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("unexpected")
    monkeypatch.setattr(cli, "estimate_covariance", boom)
    code, _, err = run(["estimate", "--prices", data[0], "--out", tmp_path], capsys)
    assert code == 1 and error_doc(err)["exit_code"] == 1


def test_backtest_is_deterministic(data, tmp_path, capsys):
    prices, universe = data
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert run(["backtest", "--prices", prices, "--universe", universe, "--estimator", "gerber-mad",
                    "--out", out], capsys)[0] == 0
        outs.append(out)
    for name in ("report.json", "records.csv", "benchmark_records.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
