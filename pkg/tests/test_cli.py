import json
import logging.config

import pytest
from rich.console import Console

import cli
import harness
from cli import EXIT_DIAGNOSTIC, EXIT_ERROR, EXIT_FALL, EXIT_OK, EXIT_USAGE, main, offset_grid, summary_line
from harness import RunMetrics


QUIET = ["--set", "noise.com=0", "--set", "noise.com_rate=0", "--set", "noise.angle=0", "--set", "noise.rate=0"]


def _metrics(converged: bool = True) -> RunMetrics:
    return RunMetrics(
        converged=converged,
        settle_time=1.25 if converged else None,
        com_settle_time=1.0,
        case_dwell={"Case2": 0.5, "Case1": 2.0},
        mode_sequence=["Case2", "Case1"],
        max_excursion=0.08,
        fell=False,
        duration=3.0,
    )


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == EXIT_USAGE


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as e:
        main(["dance"])
    assert e.value.code == EXIT_USAGE


def test_unknown_key_is_error(capsys):
    assert main(["simulate", "--set", "knee=1"]) == EXIT_ERROR
    assert "knee" in capsys.readouterr().err


def test_missing_scenario_file(tmp_path):
    assert main(["simulate", str(tmp_path / "missing.scenario")]) == EXIT_ERROR


def test_invalid_value_is_error():
    assert main(["simulate", "--set", "masses.m0=-1"]) == EXIT_ERROR


def test_summary_line():
    assert summary_line(_metrics()) == (
        "converged=true fell=false settle_time=1.25 modes=Case2>Case1 "
        "dwell=Case1:2.00,Case2:0.50 max_excursion=0.0800"
    )


def test_summary_line_without_modes():
    m = _metrics(False).model_copy(update={"mode_sequence": [], "case_dwell": {}})
    assert summary_line(m) == (
        "converged=false fell=false settle_time=none modes=- dwell=- max_excursion=0.0800"
    )


def test_offset_grid():
    grid = offset_grid(-0.05, 0.10, 0.01)
    assert len(grid) == 16
    assert grid[0] == -0.05
    assert grid[-1] == 0.1
    assert 0.0 in grid


def test_offset_grid_rejects_step():
    with pytest.raises(ValueError):
        offset_grid(0.0, 1.0, 0.0)


def test_simulate_writes_outputs(tmp_path, capsys):
    out = tmp_path / "runs" / "eq"
    code = main(["simulate", "--set", "duration=1", "--set", f"output={out}", *QUIET])
    assert code == EXIT_OK
    assert capsys.readouterr().out.startswith("converged=true fell=false")
    header = (tmp_path / "runs" / "eq.csv").read_text().splitlines()[0]
    assert header.split(",") == list(harness.COLUMNS)
    metrics = json.loads((tmp_path / "runs" / "eq.json").read_text())
    assert metrics["converged"] is True


def test_simulate_from_scenario_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "short.scenario"
    path.write_text("duration = 0.5\nnoise.com = 0\nnoise.com_rate = 0\nnoise.angle = 0\nnoise.rate = 0\n")
    assert main(["simulate", str(path)]) == EXIT_OK
    assert (tmp_path / "out" / "run.csv").exists()


@pytest.mark.slow
def test_simulate_fall_exit_code(tmp_path):
    code = main(["simulate", "--set", "initial_com_offset=0.5", "--set", f"output={tmp_path / 'fall'}"])
    assert code == EXIT_FALL


def test_energy_check_zero_duration(capsys):
    assert main(["energy-check", "--duration", "0"]) == EXIT_OK
    assert "steps=0" in capsys.readouterr().out


def test_energy_check_default():
    assert main(["energy-check"]) == EXIT_OK


def test_energy_check_negative_duration():
    assert main(["energy-check", "--duration", "-1"]) == EXIT_ERROR


def test_lqr_report(monkeypatch, capsys):
    monkeypatch.setattr(cli, "console", Console(width=300))
    assert main(["lqr-report"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "C1=" in out
    assert "Case3Ankle" in out


def test_lqr_report_zero_case2_weight_is_unhealthy(monkeypatch, capsys):
    monkeypatch.setattr(cli, "console", Console(width=300))
    assert main(["lqr-report", "--set", "penalties.case2=0"]) == EXIT_DIAGNOSTIC
    row = next(line for line in capsys.readouterr().out.splitlines() if "Case2Hip" in line)
    assert "[[0. 0.]]" in row
    assert " no " in row


def test_lqr_report_flags_weights_unstable_at_control_period(monkeypatch):
    monkeypatch.setattr(cli, "console", Console(width=300))
    assert main(["lqr-report", "--set", "penalties.case2=1e8"]) == EXIT_DIAGNOSTIC


def test_sweep_reports_range(monkeypatch, capsys):
    monkeypatch.setattr(harness, "run_metrics", lambda sc: _metrics(abs(sc.initial_com_offset) < 0.015))
    code = main(["sweep", "--from", "-0.03", "--to", "0.03", "--step", "0.01"])
    assert code == EXIT_OK
    assert "stable_range=[-0.010, +0.010]" in capsys.readouterr().out


def test_sweep_without_stable_centre(monkeypatch):
    monkeypatch.setattr(harness, "run_metrics", lambda sc: _metrics(False))
    assert main(["sweep", "--from", "0", "--to", "0.02", "--step", "0.01"]) == EXIT_DIAGNOSTIC


@pytest.mark.parametrize(("converged", "expected"), [(True, EXIT_OK), (False, EXIT_DIAGNOSTIC)])
def test_montecarlo_exit_code(monkeypatch, converged, expected):
    monkeypatch.setattr(harness, "run_metrics", lambda sc: _metrics(converged))
    assert main(["montecarlo", "--seeds", "5"]) == expected


def test_setup_logging_creates_log_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    configs = []
    monkeypatch.setattr(logging.config, "dictConfig", configs.append)
    cli.setup_logging()
    assert configs[0]["loggers"]["logbalance"]["level"] == "DEBUG"
    assert (tmp_path / "logs").is_dir()
