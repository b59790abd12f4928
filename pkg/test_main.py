#!/usr/bin/env python3
"""
コマンドラインインターフェースのテスト
"""
import csv
import json
import math

import pytest

from refdiff.analytic import AnalyticProfile
from refdiff.coefficients import CoefficientField
from refdiff.main import EXIT_INVALID, EXIT_OK, EXIT_USAGE, format_number, join_signed_values, jsonable, run


def constant_field(kind, b, sigma=1.0, a=None):
    domain = {"kind": kind}
    upper = "inf"
    if a is not None:
        domain["a"] = a
        upper = a
    return {
        "domain": domain,
        "segments": [{"lower": 0, "upper": upper,
                      "b": {"kind": "constant", "c0": b}, "sigma": {"kind": "constant", "c0": sigma}}],
    }


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def test_analyze_reports_closed_forms(tmp_path):
    """b=−1, σ=1: C = 1/2, E[Y(1)] = 1"""
    config = write_config(tmp_path, constant_field("half_line", -1.0))
    report_path = tmp_path / "out.json"
    table_path = tmp_path / "table.csv"
    code = run(["analyze", "--config", config, "--grid", "0:5:100",
                "--report", str(report_path), "--out", str(table_path)])
    assert code == EXIT_OK

    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["recurrence"] == "recurrent"
    assert report["positive_recurrent"] is True
    assert report["C"] == pytest.approx(0.5)
    assert report["ey0"] == pytest.approx(1.0)
    assert "eya" not in report

    rows = read_csv(table_path)
    assert list(rows[0]) == ["x", "beta", "eta", "h", "cdf"]
    assert len(rows) == 100
    # 17 桁で書かれた値は再読込で元の値に戻る
    profile = AnalyticProfile(CoefficientField.model_validate(constant_field("half_line", -1.0)))
    for row in rows[::9]:
        x = float(row["x"])
        assert float(row["eta"]) == float(profile.scale_function(x))
        assert float(row["cdf"]) == float(profile.stationary_cdf(x))
        assert float(row["beta"]) == -2.0


def test_analyze_transient_field(tmp_path):
    config = write_config(tmp_path, constant_field("half_line", 1.0))
    report_path = tmp_path / "out.json"
    assert run(["analyze", "--config", config, "--report", str(report_path)]) == EXIT_OK
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["recurrence"] == "transient"
    assert report["eta_infinity"] == pytest.approx(0.5)
    for key in ("C", "ey0", "eya"):
        assert key not in report


def test_analyze_interval_reports_both_boundaries(tmp_path):
    config = write_config(tmp_path, constant_field("interval", -1.0, a=1.0))
    report_path = tmp_path / "out.json"
    assert run(["analyze", "--config", config, "--report", str(report_path)]) == EXIT_OK
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["ey0"] == pytest.approx(1.156518, abs=1e-6)
    assert report["eya"] == pytest.approx(0.156518, abs=1e-6)


def test_null_recurrent_report_writes_inf(tmp_path):
    config = write_config(tmp_path, constant_field("half_line", 0.0))
    report_path = tmp_path / "out.json"
    assert run(["analyze", "--config", config, "--report", str(report_path)]) == EXIT_OK
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["C"] == "inf"
    assert report["eta_infinity"] == "inf"


def test_malformed_json_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"domain": {"kind": "half_line"},\n  "segments": [,]}', encoding="utf-8")
    assert run(["analyze", "--config", str(path)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert f"{path}:2:" in err


def test_schema_error_is_a_usage_error(tmp_path):
    config = write_config(tmp_path, {"domain": {"kind": "circle"}, "segments": []})
    assert run(["analyze", "--config", config]) == EXIT_USAGE


def test_invalid_field_lists_violations(tmp_path, capsys):
    config = write_config(tmp_path, constant_field("half_line", -1.0, sigma=0.0))
    assert run(["analyze", "--config", config]) == EXIT_INVALID
    assert "sigma not positive" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["analyze", "--grid", "0:5"],
    ["analyze", "--grid", "5:0:10"],
    ["simulate", "--dt", "3", "--horizon", "2"],
    ["simulate", "--threads", "0"],
])
def test_usage_errors(tmp_path, argv):
    config = write_config(tmp_path, constant_field("half_line", -1.0))
    assert run(argv[:1] + ["--config", config] + argv[1:]) == EXIT_USAGE


def test_unknown_subcommand_and_missing_config(tmp_path):
    assert run(["plot", "--config", "x.json"]) == EXIT_USAGE
    assert run(["analyze", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_unwritable_output_directory(tmp_path):
    config = write_config(tmp_path, constant_field("half_line", -1.0))
    target = tmp_path / "no" / "such" / "dir" / "out.json"
    assert run(["analyze", "--config", config, "--report", str(target)]) == EXIT_USAGE


def test_simulate_is_deterministic(tmp_path):
    config = write_config(tmp_path, constant_field("half_line", -1.0))
    outputs = []
    for i in range(2):
        out = tmp_path / f"paths{i}.csv"
        trajectory = tmp_path / f"trajectory{i}.csv"
        code = run(["simulate", "--config", config, "--seed", "42", "--paths", "20", "--dt", "1e-3",
                    "--horizon", "0.5", "--threads", str(1 + 3 * i), "--out", str(out),
                    "--trajectory", str(trajectory), "--dump-paths", "2"])
        assert code == EXIT_OK
        outputs.append((out.read_bytes(), trajectory.read_bytes()))
    assert outputs[0] == outputs[1]

    rows = read_csv(tmp_path / "paths0.csv")
    assert len(rows) == 20
    assert all(float(r["z_end"]) >= 0.0 for r in rows)
    assert {r["exploded"] for r in rows} == {"false"}
    trajectory = read_csv(tmp_path / "trajectory0.csv")
    assert len(trajectory) == 2 * 501
    assert float(trajectory[0]["y_net"]) == 0.0


def test_run_config_with_sim_section(tmp_path):
    payload = {
        "field": constant_field("interval", 0.0, a=2.0),
        "sim": {"dt": 1e-3, "horizon": 0.2, "seed": 5, "path_count": 7},
    }
    config = write_config(tmp_path, payload)
    out = tmp_path / "paths.csv"
    assert run(["simulate", "--config", config, "--out", str(out)]) == EXIT_OK
    rows = read_csv(out)
    assert len(rows) == 7
    assert all(0.0 <= float(r["z_end"]) <= 2.0 for r in rows)


def test_verify_reports_are_byte_identical(tmp_path):
    config = write_config(tmp_path, constant_field("half_line", -1.0))
    before = (tmp_path / "config.json").read_bytes()
    reports = []
    codes = []
    for i, threads in enumerate((1, 4)):
        report = tmp_path / f"report{i}.json"
        hist = tmp_path / f"hist{i}.csv"
        codes.append(run(["verify", "--config", config, "--seed", "42", "--paths", "200", "--dt", "1e-3",
                          "--horizon", "1.5", "--burn-in", "0.5", "--threads", str(threads),
                          "--report", str(report), "--hist", str(hist)]))
        reports.append((report.read_bytes(), hist.read_bytes()))
    assert codes[0] == codes[1]
    assert codes[0] in (EXIT_OK, EXIT_INVALID)
    assert reports[0] == reports[1]
    assert (tmp_path / "config.json").read_bytes() == before

    report = json.loads(reports[0][0])
    assert report["analytic_targets"]["C"] == pytest.approx(0.5)
    assert report["passed"] == (codes[0] == EXIT_OK)


def test_verify_rejects_transient_field(tmp_path):
    config = write_config(tmp_path, constant_field("half_line", 1.0))
    assert run(["verify", "--config", config, "--paths", "10", "--dt", "1e-3", "--horizon", "0.5"]) == EXIT_INVALID


def test_transform_dump(tmp_path):
    config = write_config(tmp_path, constant_field("interval", -1.0, a=2.0))
    dump = tmp_path / "driver.csv"
    report_path = tmp_path / "driver.json"
    code = run(["transform", "--config", config, "--grid", "-1:5:7",
                "--dump", str(dump), "--report", str(report_path)])
    assert code == EXIT_OK
    rows = read_csv(dump)
    assert [float(r["x"]) for r in rows] == [-1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert [float(r["b"]) for r in rows] == [1.0, -1.0, -1.0, 0.0, 1.0, 1.0, -1.0]
    assert {float(r["sigma"]) for r in rows} == {1.0}
    report = json.loads(report_path.read_text(encoding="utf-8"))
    # b̂(a) = 0 は符号なしで書く
    assert "-0," not in dump.read_text(encoding="utf-8")
    assert not any(r["b"].startswith("-0") or r["beta"].startswith("-0") for r in rows)
    assert report["mode"] == "fold_extended"
    assert report["driver_recurrence"] == "recurrent"
    assert report["violations"] == []


def test_transform_needs_a_reflecting_domain(tmp_path):
    payload = {
        "domain": {"kind": "full_line"},
        "segments": [{"lower": "-inf", "upper": "inf",
                      "b": {"kind": "constant", "c0": 0}, "sigma": {"kind": "constant", "c0": 1}}],
    }
    assert run(["transform", "--config", write_config(tmp_path, payload)]) == EXIT_USAGE


def test_run_metrics_are_logged(tmp_path, monkeypatch):
    """REFDIFF_LOG_DIR を指定すると実行メトリクスを JSONL で残す"""
    log_dir = tmp_path / "logs"
    monkeypatch.setenv("REFDIFF_LOG_DIR", str(log_dir))
    config = write_config(tmp_path, constant_field("half_line", -1.0, sigma=0.0))
    assert run(["analyze", "--config", config, "--seed", "3"]) == EXIT_INVALID
    records = [json.loads(line) for line in (log_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()]
    run_record = [r for r in records if r["event_type"] == "run"][-1]
    assert run_record["subcommand"] == "analyze"
    assert run_record["status"] == "invalid"
    assert run_record["seed"] == 3
    assert "sigma not positive" in run_record["error_message"]


def test_format_number_and_jsonable():
    assert format_number(0.1) == "0.10000000000000001"
    assert float(format_number(1 / 3)) == 1 / 3
    assert format_number(None) == ""
    assert format_number(True) == "true"
    assert format_number(7) == "7"
    assert jsonable({"a": [math.inf, -math.inf, 1.5], "b": math.nan}) == {"a": ["inf", "-inf", 1.5], "b": "nan"}


def test_signed_option_values_are_joined():
    assert join_signed_values(["transform", "--grid", "-1:5:7", "--config", "c.json"]) == [
        "transform", "--grid=-1:5:7", "--config", "c.json"]
    assert join_signed_values(["simulate", "--x0", "-0.5"]) == ["simulate", "--x0=-0.5"]
    assert join_signed_values(["analyze", "--grid", "0:5:10"]) == ["analyze", "--grid", "0:5:10"]
    assert join_signed_values(["analyze", "--report", "-r.json"]) == ["analyze", "--report", "-r.json"]


@pytest.mark.parametrize("x0_args", [["--x0", "-1"], ["--x0=-1"]])
def test_start_state_outside_domain_is_a_usage_error(tmp_path, capsys, monkeypatch, x0_args):
    """定義域外の初期状態は終了コード 2"""
    log_dir = tmp_path / "logs"
    monkeypatch.setenv("REFDIFF_LOG_DIR", str(log_dir))
    config = write_config(tmp_path, constant_field("half_line", -1.0))
    code = run(["simulate", "--config", config, "--paths", "3", "--dt", "1e-3", "--horizon", "0.1"] + x0_args)
    assert code == EXIT_USAGE
    assert "half_line" in capsys.readouterr().err
    records = [json.loads(line) for line in (log_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines()]
    run_record = [r for r in records if r["event_type"] == "run"][-1]
    assert run_record["status"] == "usage_error"


def test_negative_analyze_grid_on_full_line(tmp_path):
    payload = {
        "domain": {"kind": "full_line"},
        "segments": [{"lower": "-inf", "upper": "inf",
                      "b": {"kind": "constant", "c0": 0}, "sigma": {"kind": "constant", "c0": 1}}],
    }
    out = tmp_path / "table.csv"
    assert run(["analyze", "--config", write_config(tmp_path, payload), "--grid", "-2:2:5",
                "--out", str(out)]) == EXIT_OK
    assert [float(r["x"]) for r in read_csv(out)] == [-2.0, -1.0, 0.0, 1.0, 2.0]
