"""
Tests for the command-line front end and its JSON reports
"""

import json

import numpy as np
import pytest

import app
from app import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, run
from services.exporter import read_csv


def invoke(capsys, *argv):
    code = run(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def test_classify_example(capsys):
    code, report = invoke(capsys, "classify", "--problem", "builtin:example-js", "--x", "0", "--y", "0,0")
    assert code == EXIT_OK
    assert report["command"] == "classify"
    assert report["status"] == "ok"
    assert report["result"]["type"] == "4"
    assert report["result"]["case"] == "I"
    assert report["error"] is None


def test_tolerance_flag_reaches_classifier(capsys):
    _, report = invoke(capsys, "classify", "--problem", "builtin:near-duplicate", "--x", "0", "--y", "0")
    assert report["result"]["type"] == "5-2"
    _, report = invoke(capsys, "classify", "--problem", "builtin:near-duplicate", "--x", "0", "--y", "0",
                       "--tol-rank", "1e-2")
    assert report["result"]["type"] == "not-classifiable"


def test_input_errors_exit_with_two(capsys):
    code, report = invoke(capsys, "classify", "--problem", "/nonexistent/problem.blp", "--x", "0")
    assert code == EXIT_INPUT
    assert report["status"] == "error"
    assert report["error"]["type"] == "ProblemFormatError"

    code, report = invoke(capsys, "classify", "--problem", "builtin:example-js", "--x", "0", "--y", "1,0")
    assert code == EXIT_INPUT
    assert report["error"]["type"] == "InfeasiblePointError"


def test_usage_errors_exit_with_two(capsys):
    code, report = invoke(capsys, "classify", "--problem", "builtin:example-js", "--x", "0", "--frobnicate")
    assert code == EXIT_INPUT
    assert report is None
    code, _ = invoke(capsys, "no-such-command")
    assert code == EXIT_INPUT


def test_trace_writes_branch_csv(capsys, tmp_path):
    code, report = invoke(capsys, "trace", "--problem", "builtin:type2-kink", "--x", "0.5", "--y", "0.5",
                          "--x-min", "0.2", "--x-max", "1", "--step", "0.05", "--out", str(tmp_path))
    assert code == EXIT_OK
    assert report["result"]["active_set"] == [1]
    assert report["artifacts"] == [str(tmp_path / "branch.csv")]
    frame = read_csv(tmp_path / "branch.csv")
    assert list(frame.columns) == ["x", "y1", "u1", "active_mask", "type_label", "event"]
    assert (frame["y1"] - frame["x"]).abs().max() < 1e-8


def test_value_function_over_double_well(capsys, tmp_path):
    target = tmp_path / "maps" / "double_well.csv"
    code, report = invoke(capsys, "value-function", "--problem", "builtin:double-well",
                          "--x-min=-0.2", "--x-max", "0.2", "--points", "5", "--out", str(target))
    assert code == EXIT_OK
    assert report["result"]["branches"] == [0, 1]
    assert len(report["result"]["V"]) == 5
    assert report["artifacts"] == [str(target)]
    assert len(read_csv(target)) == 6


def test_check_stationarity_reports_both_forms(capsys):
    code, report = invoke(capsys, "check-stationarity", "--problem", "builtin:quadratic", "--x", "0.5", "--y", "0.5")
    assert code == EXIT_OK
    result = report["result"]
    assert result["agreement"] is True
    assert result["direct"]["verdict"] == "satisfied"
    assert result["implicit"]["verdict"] == "satisfied"
    assert result["unconstrained"]["verdict"] == "satisfied"

    _, report = invoke(capsys, "check-stationarity", "--problem", "builtin:example-js", "--F", "x - y1",
                       "--x", "0", "--y", "0,0")
    assert report["result"]["direct"]["verdict"] == "violated"


def test_mpcc_licq_picks_fj_multiplier(capsys):
    code, report = invoke(capsys, "mpcc-licq", "--problem", "builtin:example-js", "--x", "0", "--y", "0,0")
    assert code == EXIT_OK
    assert report["result"]["variant"] == "fj"
    assert report["result"]["full_column_rank"] is True


def test_solve_lower_reports_minimizers(capsys):
    code, report = invoke(capsys, "solve-lower", "--problem", "builtin:double-well", "--x", "0")
    assert code == EXIT_OK
    assert report["problem"] == "builtin:double-well"
    assert report["result"]["value"] == pytest.approx(-0.25, abs=1e-9)
    assert len(report["result"]["members"]) == 2


@pytest.mark.parametrize("error", [np.linalg.LinAlgError("SVD did not converge"), FloatingPointError("overflow")])
def test_linear_algebra_failures_exit_with_three(capsys, monkeypatch, error):
    def broken(P, args):
        raise error

    monkeypatch.setitem(app.COMMANDS, "classify", broken)
    code, report = invoke(capsys, "classify", "--problem", "builtin:quadratic", "--x", "0.5")
    assert code == EXIT_NUMERICAL
    assert report["status"] == "error"
    assert report["error"]["type"] == type(error).__name__
