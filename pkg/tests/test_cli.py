"""Command-line interface tests.

Covers:
  Group 1 - validate (feeder inventory report, error paths)
  Group 2 - run (artifact layout, defense toggle, overrides, failures)
  Group 3 - sweep and repro fig8 (sweep.csv)
  Group 4 - train-ann (model json, loss curve, held-out score)
  Group 5 - argument handling (usage errors, --set parsing)
"""

from __future__ import annotations

import os

import pytest

from voltvarsim.cli import _parse_sets, main


SCENARIO_OFF = """
[scenario]
model_path = "builtin:ieee13"
loading_factor = 0.5
t_end = 2.0
control_step = 0.5
defense_enabled = false
"""

SCENARIO_ON = """
[scenario]
model_path = "builtin:ieee13"
loading_factor = 0.5
t_end = 2.0
control_step = 0.5
defense_enabled = true

[ann]
model_path = "builtin:ieee13-ann"
"""


# --- Group 1: validate ---------------------------------------------------------


def test_validate_reports_the_bundled_feeder(capsys):
    assert main(["validate", "builtin:ieee13"]) == 0
    out = capsys.readouterr().out
    assert "buses: 13  lines: 12" in out
    assert "tree depth: 4" in out
    assert "regulators: ['632']" in out
    assert "capacitors: ['675', '611']" in out
    assert "dg: ['671']" in out
    assert "total load: 3466.0 kW, 2102.0 kVAr" in out
    assert "base-case voltages (pu):" in out
    assert "extremes:" in out


def test_validate_missing_file(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["validate", "no-such-feeder.model"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")


def test_validate_rejects_malformed_document(capsys, tmp_path):
    bad = tmp_path / "bad.model"
    bad.write_text("[system]\n")  # no substation, no buses
    assert main(["validate", str(bad)]) == 1
    assert "error:" in capsys.readouterr().err


# --- Group 2: run -----------------------------------------------------------------


def test_run_writes_artifacts_without_defense(capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    scenario = tmp_path / "case.toml"
    scenario.write_text(SCENARIO_OFF)
    assert main(["run", str(scenario), "--out", "artifacts"]) == 0
    out_dir = tmp_path / "artifacts"
    assert sorted(os.listdir(out_dir)) == [
        "queue_events.csv",
        "summary.txt",
        "timeseries.csv",
    ]
    stdout = capsys.readouterr().out
    assert "defense: off" in stdout
    assert "detections: fdi=0 dos=0 loss-fill=0" in stdout
    assert "disconnected sources: none" in stdout
    assert "violation intervals" in stdout
    summary = (out_dir / "summary.txt").read_text()
    assert "defense: off" in summary
    lines = (out_dir / "timeseries.csv").read_text().splitlines()
    assert lines[0].startswith("t_s,v_650_a_pu")
    assert len(lines) == 1 + 5  # header plus t = 0 .. 2 s


def test_run_with_defense_adds_detections(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    scenario = tmp_path / "case.toml"
    scenario.write_text(SCENARIO_ON)
    assert main(["run", str(scenario), "--out", "artifacts"]) == 0
    assert (tmp_path / "artifacts" / "detections.csv").exists()
    assert "defense: on" in capsys.readouterr().out


def test_run_no_defense_flag_overrides_scenario(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    scenario = tmp_path / "case.toml"
    scenario.write_text(SCENARIO_ON)
    assert main(["run", str(scenario), "--no-defense", "--out", "artifacts"]) == 0
    assert not (tmp_path / "artifacts" / "detections.csv").exists()
    assert "defense: off" in capsys.readouterr().out


def test_run_set_overrides(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    scenario = tmp_path / "case.toml"
    scenario.write_text(SCENARIO_OFF)
    assert (
        main(["run", str(scenario), "--out", "o", "--set", "scenario.t_end=1.0"]) == 0
    )
    lines = (tmp_path / "o" / "timeseries.csv").read_text().splitlines()
    assert len(lines) == 1 + 3  # t = 0, 0.5, 1.0
    capsys.readouterr()


def test_run_missing_scenario_leaves_no_artifacts(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "missing.toml", "--out", "artifacts"]) == 1
    assert capsys.readouterr().err.startswith("error:")
    assert not (tmp_path / "artifacts").exists()


# --- Group 3: sweep and fig8 ----------------------------------------------------------


def test_sweep_writes_table(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    scenario = tmp_path / "case.toml"
    scenario.write_text(SCENARIO_OFF)
    assert main(["sweep", str(scenario), "--kmax", "1", "--out", "s"]) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k,phase,v_max_pu"
    assert len(lines) == 1 + 6  # k = 0 and k = 1, one row per phase
    stdout = capsys.readouterr().out
    assert "k=0 phase a: max" in stdout
    assert "k=1 phase c: max" in stdout


def test_repro_fig8_uses_the_sweep(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["repro", "fig8", "--kmax", "1", "--out", "f"]) == 0
    lines = (tmp_path / "f" / "sweep.csv").read_text().splitlines()
    assert lines[0] == "k,phase,v_max_pu"
    assert len(lines) == 7
    assert "sweep.csv written to f" in capsys.readouterr().out


# --- Group 4: train-ann -----------------------------------------------------------------


def test_train_ann_writes_model_and_curve(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "est.json"
    assert (
        main(
            [
                "train-ann",
                "builtin:ieee13",
                "--epochs",
                "3",
                "--samples",
                "5",
                "--out",
                str(out),
            ]
        )
        == 0
    )
    assert out.exists()
    from voltvarsim.defense_ann import model_from_json

    model = model_from_json(out.read_text())
    assert model.layer_sizes == (64, 64, 64, 58)
    loss_lines = (tmp_path / "est_loss.csv").read_text().splitlines()
    assert loss_lines[0] == "epoch,loss"
    assert len(loss_lines) == 4
    stdout = capsys.readouterr().out
    assert "held-out MAPE" in stdout
    assert "trained in" in stdout


def test_train_ann_unknown_builtin(capsys):
    assert main(["train-ann", "builtin:nope", "--epochs", "1"]) == 1
    assert "error:" in capsys.readouterr().err


# --- Group 5: argument handling ------------------------------------------------------------


def test_unknown_repro_case_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(["repro", "scenario99"])
    assert exc_info.value.code == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_subcommand_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main([])
    assert exc_info.value.code == 2
    capsys.readouterr()


def test_set_parsing():
    parsed = _parse_sets(["a.b=1", "c=true", "d=0.5", "e=text"])
    assert parsed == {"a.b": 1, "c": True, "d": 0.5, "e": "text"}
    assert _parse_sets(None) == {}
    with pytest.raises(ValueError, match="--set expects KEY=VALUE"):
        _parse_sets(["novalue"])


def test_malformed_set_exits_nonzero(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    scenario = tmp_path / "case.toml"
    scenario.write_text(SCENARIO_OFF)
    assert main(["run", str(scenario), "--set", "oops"]) == 1
    assert "expects KEY=VALUE" in capsys.readouterr().err
