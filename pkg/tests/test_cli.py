import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from tailrisk import __version__
from tailrisk.cli import main
from tailrisk.experiments import run_experiment
from tailrisk.output import OutputError, atomic_write, render, to_csv, to_json, write_results
from tailrisk.scenario import load_scenario, shipped_path

GOLDEN = Path(__file__).parent / "golden" / "nominal-6state.manifest.json"
NOMINAL = str(shipped_path("nominal-6state"))
ALIASING = str(shipped_path("aliasing-4state"))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("all")
    assert main(["all", "--scenario", NOMINAL, "--out", str(out)]) == 0
    return out


# -- output files ------------------------------------------------------------------


def test_manifest_hashes_match_files(full_run):
    manifest = json.loads((full_run / "manifest.json").read_text())
    assert set(manifest["files"]) == {
        "summary.json",
        "prop1_sweep.csv",
        "shift_report.json",
        "series_expert_weights.csv",
        "series_frozen_erm.csv",
        "series_q_learning.csv",
    }
    for name, info in manifest["files"].items():
        assert sha(full_run / name) == info["sha256"], name
    assert not [p for p in full_run.iterdir() if p.name.startswith(".")]


def test_matches_golden_manifest(full_run):
    assert (full_run / "manifest.json").read_text() == GOLDEN.read_text()


def test_summary_carries_provenance_and_phase_rule(full_run):
    summary = json.loads((full_run / "summary.json").read_text())
    prov = summary["provenance"]
    assert prov["seed"] == 20240611 and prov["version"] == __version__
    assert prov["scenario_sha256"] == load_scenario(NOMINAL).digest
    assert "phase_rule" in summary["adaptation"]
    shift = json.loads((full_run / "shift_report.json").read_text())
    assert shift["kl"] is None and shift["kl_infinite"] is True


def test_series_csv_layout(full_run):
    lines = (full_run / "series_expert_weights.csv").read_text().splitlines()
    assert lines[0] == "t,reward,moving_avg,phase"
    assert lines[1].split(",")[2] == ""
    assert len(lines) == 1 + 15_000
    sweep = (full_run / "prop1_sweep.csv").read_text().splitlines()
    assert sweep[0] == "epsilon,tail_risk,mu_p_error,ratio"


def test_same_inputs_identical_hashes(nominal, tmp_path):
    result = run_experiment(nominal, "prop1")
    a = write_results(result, tmp_path / "a")
    b = write_results(run_experiment(nominal, "prop1"), tmp_path / "b")
    assert a == b
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_thread_count_does_not_change_outputs(nominal, monkeypatch):
    rendered = {}
    for threads in ("1", "4"):
        monkeypatch.setenv("TAILRISK_THREADS", threads)
        rendered[threads] = render(run_experiment(nominal, "adaptation"))
    assert rendered["1"] == rendered["4"]


def test_json_is_canonical():
    assert to_json({"b": 1, "a": float("nan")}) == '{\n  "a": null,\n  "b": 1\n}\n'


def test_csv_blank_for_missing():
    assert to_csv([{"x": None, "y": float("nan"), "z": 0.1}], ("x", "y", "z")) == "x,y,z\n,,0.1\n"


# -- IO failures ----------------------------------------------------------------------


def test_read_only_directory_names_path(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    try:
        if os.access(ro, os.W_OK):
            pytest.skip("running with privileges that ignore directory permissions")
        with pytest.raises(OutputError, match=str(ro / "x.json")):
            atomic_write(ro / "x.json", "{}")
    finally:
        ro.chmod(0o700)


def test_unwritable_parent_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OutputError, match=str(blocker)):
        atomic_write(blocker / "x.json", "{}")


def test_cli_io_error_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "markov", "--scenario", ALIASING, "--out", str(blocker / "sub")]) == 2
    assert str(blocker) in capsys.readouterr().err


# -- exit codes and commands -------------------------------------------------------


def test_validate_ok(capsys):
    assert main(["validate", NOMINAL]) == 0
    assert capsys.readouterr().out.strip() == "ok: nominal-6state (states=6, actions=2, observations=4)"


def test_validate_failure_lists_fields(tmp_path, capsys):
    doc = json.loads(Path(NOMINAL).read_text())
    doc["environment"]["dynamics"]["within_nominal"][1] = ["0.4", "0.4", "0.1"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate", str(bad)]) == 1
    assert "environment.dynamics.within_nominal[1]: row sums to 0.9, expected 1" in capsys.readouterr().err


def test_run_single_experiment(tmp_path, capsys):
    assert main(["run", "markov", "--scenario", ALIASING, "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["markov"]["gap"] >= 0.1
    assert "wrote" in capsys.readouterr().out


def test_unconfigured_experiment_is_invalid(tmp_path):
    assert main(["run", "adaptation", "--scenario", ALIASING, "--out", str(tmp_path)]) == 1


def test_seed_override_recorded(tmp_path):
    assert main(["run", "markov", "--scenario", ALIASING, "--seed", "99", "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "summary.json").read_text())["provenance"]["seed"] == 99


@pytest.mark.parametrize("seed", ["-1", "18446744073709551616", "abc"])
def test_bad_seed_rejected(seed, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["run", "markov", "--scenario", ALIASING, "--seed", seed, "--out", str(tmp_path)])
    assert e.value.code == 2


def test_bad_thread_setting_is_runtime_error(tmp_path, monkeypatch):
    monkeypatch.setenv("TAILRISK_THREADS", "zero")
    assert main(["run", "adaptation", "--scenario", NOMINAL, "--out", str(tmp_path)]) == 2


def test_console_script_entry(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "tailrisk.cli", "validate", str(tmp_path / "missing.json")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 1 and "cannot read" in proc.stderr
