import json
import subprocess
import sys

import jsonschema
import pytest

from heatpath import cli


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_principal_value_report(capsys):
    code, out, _ = run_cli(capsys, "renint", "principal-value", "--f", "one_over_x")
    rep = json.loads(out)
    assert code == 0
    assert rep["schema"] == 1
    assert rep["limit"] == 0.0
    assert rep["converged"] is True
    for key in ("mode", "schedule", "values", "converged", "limit", "error_estimate"):
        assert key in rep
    assert rep["config"]["options"]["f"] == "one_over_x"


def test_window_average_power_verdicts(capsys):
    code, out, _ = run_cli(capsys, "renint", "window-average", "--f", "power:1")
    rep = json.loads(out)
    assert code == 0 and rep["divergence_flag"] == "+infinity"
    code, out, _ = run_cli(capsys, "renint", "window-average", "--f", "cos", "--schedule", "geometric:1:0.5")
    rep = json.loads(out)
    assert code == 0 and abs(rep["limit"] - 1.0) <= 1e-6


def test_unresolved_window_average_fails_with_partial_values(capsys):
    code, out, _ = run_cli(capsys, "renint", "window-average", "--f", "cos")
    rep = json.loads(out)
    assert code == 1
    assert rep["stopped_by"] is not None
    assert len(rep["values"]) == len(rep["indices"]) > 1


def test_determinant_report(capsys):
    code, out, _ = run_cli(capsys, "renint", "determinant", "--eigs", "list:0.5,0.25", "--schedule",
                           "linear:1:1", "--max-steps", "2")
    rep = json.loads(out)
    assert abs(rep["values"][-1] - (15 / 8) ** -0.5) <= 1e-13


def test_fourier_report_has_complex_values(capsys):
    code, out, _ = run_cli(capsys, "renint", "fourier", "--f", "gaussian", "--xs", "0:1:3", "--tol", "1e-10")
    rep = json.loads(out)
    assert code == 0
    assert rep["converged"]


def test_heat_kernel_run_meets_oracle_and_is_deterministic(capsys, tmp_path):
    argv = ["heat-kernel", "--manifold", "s1:1", "--kernel", "k4", "--t", "0.5", "--oracle", "spectral"]
    code, out, _ = run_cli(capsys, *argv, "--csv", str(tmp_path / "rows.csv"))
    rep = json.loads(out)
    assert code == 0
    assert rep["report_verdict"] == "converged"
    assert rep["terminal_relative_error"] <= 1e-3
    lines = (tmp_path / "rows.csv").read_text().splitlines()
    assert lines[0] == "mesh,value,oracle_error"
    assert len(lines) == 1 + len(rep["rows"])
    code2, out2, _ = run_cli(capsys, *argv)
    assert out2 == out


def test_heat_kernel_writes_output_file(capsys, tmp_path):
    path = tmp_path / "report.json"
    code, out, _ = run_cli(capsys, "heat-kernel", "--refinements", "1:3", "--grid", "32", "--output", str(path))
    assert out == ""
    rep = json.loads(path.read_text())
    assert rep["config"]["output"] == str(path)


def test_oracle_subcommand(capsys):
    code, out, _ = run_cli(capsys, "oracle", "spectral", "--manifold", "s1:1", "--t", "60")
    rep = json.loads(out)
    assert code == 0 and abs(rep["value"] - 0.15915494309189535) <= 1e-12


def test_check_heat_related(capsys):
    code, out, _ = run_cli(capsys, "check", "heat-related", "--kernel", "k1", "--kernel2", "k2", "--bundle",
                           "line:cos", "--grid", "16", "--t-count", "6")
    rep = json.loads(out)
    assert code == 0
    assert rep["constants"]["beta"] >= 1.8
    assert rep["max_violation_ratio"] is None  # NaN is written as null


def test_check_hsu(capsys):
    code, out, _ = run_cli(capsys, "check", "hsu", "--manifold", "t2:1,1", "--pairs", "100", "--t-count", "3")
    assert code == 0 and json.loads(out)["constant"] > 0


def test_bad_values_exit_nonzero_with_message(capsys):
    code, out, err = run_cli(capsys, "heat-kernel", "--manifold", "s9:1")
    assert code == 1 and out == "" and "manifold" in err


def test_accept_filter_with_no_match_exits_2(capsys):
    code, out, err = run_cli(capsys, "accept", "--filter", "Z*")
    assert code == 2 and "no preset" in err


@pytest.mark.parametrize("argv", [["renint", "window-average", "--bogus"], ["nonsense"], []])
def test_usage_errors_exit_2(argv):
    proc = subprocess.run([sys.executable, "-m", "heatpath", *argv], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


def test_accept_rows_and_byte_identical_reruns(capsys):
    code1, out1, _ = run_cli(capsys, "accept", "--filter", "A*")
    code2, out2, _ = run_cli(capsys, "accept", "--filter", "A*")
    rows = json.loads(out1)["rows"]
    assert [r["id"] for r in rows] == [f"A{i}" for i in range(1, 11)]
    assert out1 == out2
    failed = [r["id"] for r in rows if r["verdict"] != "pass"]
    assert (code1 == 0) == (not failed)


def test_schema_rejects_malformed_report():
    bad = {"schema": 2, "command": "renint", "config": {}, "verdict": "pass"}
    with pytest.raises(jsonschema.ValidationError):
        cli.validate_report(bad)
