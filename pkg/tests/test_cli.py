import json

import numpy as np
import pytest

from npdid.cli import main
from npdid.data import default_schema, save_csv
from npdid.simulation import SETUPS, SetupSpec, gen_setup, generate


def _csv_from_setup(tmp_path, sid="A", n=2000, d=5, seed=1, name="data.csv", noise_sd=1.0):
    data, truth = gen_setup(SetupSpec(id=sid, n=n, d=d, seed=seed), noise_sd=noise_sd)
    path = tmp_path / name
    save_csv(data, path)
    return path, data, truth


def _estimate_args(path, methods, d=5, extra=()):
    cols = ",".join(f"x{j+1}" for j in range(d))
    return [
        "estimate",
        "--input",
        str(path),
        "--covariate-cols",
        cols,
        "--methods",
        methods,
        *extra,
    ]


def test_simulate_smoke_and_determinism(tmp_path, capsys):
    out1 = tmp_path / "a.json"
    out2 = tmp_path / "b.json"
    args = [
        "simulate", "--setup", "A", "--n", "200", "--d", "6", "--reps", "5",
        "--methods", "tr,ols", "--seed", "7",
    ]
    assert main(args + ["--out", str(out1)]) == 0
    table = capsys.readouterr().out
    assert "tr" in table and "ols" in table
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_text() == out2.read_text()
    rows = json.loads(out1.read_text())
    assert len(rows) == 2


def test_simulate_unknown_setup_usage_error(capsys):
    code = main(["simulate", "--setup", "Z", "--n", "100", "--d", "6"])
    assert code == 2
    err = capsys.readouterr().err
    for sid in SETUPS:
        assert sid in err


def test_simulate_d_below_requirement(capsys):
    assert main(["simulate", "--setup", "A", "--n", "100", "--d", "2"]) == 2


def test_simulate_csv_output(tmp_path):
    out = tmp_path / "m.csv"
    code = main([
        "simulate", "--setup", "A", "--n", "200", "--d", "6", "--reps", "2",
        "--methods", "sample_means", "--seed", "1", "--out", str(out), "--format", "csv",
    ])
    assert code == 0
    assert out.read_text().splitlines()[0] == "setup,n,d,method,reps,failures,bias,coverage,rmse"


def test_estimate_end_to_end_recovers_ate(tmp_path, capsys):
    path, data, truth = _csv_from_setup(tmp_path, n=2000, seed=3)
    out = tmp_path / "reports.jsonl"
    code = main(_estimate_args(path, "tr,amle", extra=["--out", str(out), "--seed", "5"]))
    assert code == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert [l["method"] for l in lines] == ["tr", "amle"]
    for rep in lines:
        assert abs(rep["tau_hat"] - 1.0) <= 3 * rep["std_err"]


def test_estimate_missing_cell_exit_3(tmp_path, capsys):
    data, _ = gen_setup(SetupSpec(id="A", n=400, d=5, seed=4))
    keep = ~((data.s == 1) & (data.t == 1))
    path = tmp_path / "nocell.csv"
    save_csv(data.subset(keep), path)
    assert main(_estimate_args(path, "tr")) == 3
    assert "overlap" in capsys.readouterr().err


def test_estimate_numerical_failure_exit_4(tmp_path, capsys):
    path, data, truth = _csv_from_setup(tmp_path, n=400, seed=5)
    args = [
        "estimate", "--input", str(path),
        "--covariate-cols", "x1,x1",  # duplicated column: collinear design
        "--methods", "ols",
    ]
    assert main(args) == 4
    assert "rank deficient" in capsys.readouterr().err


def test_estimate_unknown_method_usage_error(tmp_path, capsys):
    path, *_ = _csv_from_setup(tmp_path, n=400, seed=6)
    assert main(_estimate_args(path, "magic")) == 2


def test_estimate_filter_subgroups(tmp_path):
    path, data, truth = _csv_from_setup(tmp_path, n=3000, seed=7)
    out_hi = tmp_path / "hi.jsonl"
    code = main(
        _estimate_args(
            path, "sample_means",
            extra=["--filter", "s=1", "--out", str(out_hi)],
        )
    )
    # filtering on the state column empties two cells: validation error
    assert code == 3

    # filter on a covariate-derived split instead: write a group column
    import csv as _csv

    rows = list(_csv.reader(open(path)))
    rows[0].append("grp")
    for r in rows[1:]:
        r.append("urban" if float(r[3]) > 0 else "rural")
    path2 = tmp_path / "grouped.csv"
    with open(path2, "w", newline="") as fh:
        _csv.writer(fh).writerows(rows)
    out = tmp_path / "sub.jsonl"
    code = main(_estimate_args(path2, "ols", extra=["--filter", "grp=urban", "--out", str(out)]))
    assert code == 0
    rep = json.loads(out.read_text().splitlines()[0])
    assert rep["n_used"] < 3000


def test_print_config_and_config_file_precedence(tmp_path, capsys):
    path, *_ = _csv_from_setup(tmp_path, n=500, seed=8)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k_folds": 3, "seed": 11}))
    code = main(
        _estimate_args(
            path, "sample_means",
            extra=["--config", str(cfg), "--seed", "99", "--print-config"],
        )
    )
    assert code == 0
    out = capsys.readouterr().out
    resolved = json.loads(out[: out.index("}") + 1] + "")
    assert resolved["k_folds"] == 3  # from file
    assert resolved["seed"] == 99  # flag wins


def test_config_file_unknown_key(tmp_path, capsys):
    path, *_ = _csv_from_setup(tmp_path, n=500, seed=8)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(_estimate_args(path, "sample_means", extra=["--config", str(cfg)])) == 2


def test_placebo_contains_zero_schema(tmp_path):
    dgp = SETUPS["A"]
    import dataclasses

    null_dgp = dataclasses.replace(dgp, tau=lambda x: np.zeros(x.shape[0]), ate=0.0)
    data, _ = generate(null_dgp, n=1500, d=5, seed=12)
    path = tmp_path / "null.csv"
    save_csv(data, path)
    out = tmp_path / "placebo.jsonl"
    args = _estimate_args(path, "sample_means,ols", extra=["--out", str(out)])
    args[0] = "placebo"
    assert main(args) == 0
    reports = [json.loads(l) for l in out.read_text().splitlines()]
    assert all(isinstance(r["contains_zero"], bool) for r in reports)
    assert all(r["contains_zero"] for r in reports)


def test_placebo_power_detects_real_effect(tmp_path):
    path, data, truth = _csv_from_setup(tmp_path, n=2000, seed=13)
    out = tmp_path / "power.jsonl"
    args = _estimate_args(path, "tr", extra=["--out", str(out), "--seed", "3"])
    args[0] = "placebo"
    assert main(args) == 0
    rep = json.loads(out.read_text().splitlines()[0])
    assert rep["contains_zero"] is False


def test_placebo_null_calibration_over_seeded_runs(tmp_path):
    import dataclasses

    null_dgp = dataclasses.replace(
        SETUPS["A"], tau=lambda x: np.zeros(x.shape[0]), ate=0.0
    )
    runs = 40
    contains = 0
    for r in range(runs):
        data, _ = generate(null_dgp, n=800, d=5, seed=100 + r)
        path = tmp_path / f"null_{r}.csv"
        save_csv(data, path)
        out = tmp_path / f"rep_{r}.jsonl"
        args = _estimate_args(path, "tr", extra=["--out", str(out), "--seed", str(r)])
        args[0] = "placebo"
        assert main(args) == 0
        rep = json.loads(out.read_text().splitlines()[0])
        contains += rep["contains_zero"]
    assert contains / runs >= 0.8
