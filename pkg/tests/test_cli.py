import csv
import json
import shutil
import subprocess
from pathlib import Path

import pytest

from fbcbf.cli import EXIT_INVALID, EXIT_OK, grid_points, load_grid, main
from fbcbf.config import ScenarioConfig, dumps_toml

ROOT = Path(__file__).resolve().parents[1]
GOLDEN = Path(__file__).parent / "golden"


def write_config(path, **changes):
    path.write_text(dumps_toml(ScenarioConfig().replace(**changes)))
    return str(path)


@pytest.fixture
def short_cfg(tmp_path):
    return write_config(tmp_path / "short.toml", **{"sim.duration": 0.5})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_validate_baseline_exit_zero(capsys):
    assert main(["validate", str(ROOT / "configs" / "baseline.toml")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and "[PASS] b_k(0) > 0" in out


def test_validate_reports_failures(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.toml", **{"initial.e_y": 0.2})
    assert main(["validate", cfg]) == EXIT_INVALID
    assert "[FAIL] initial error e_y inside bounds" in capsys.readouterr().out


def test_unknown_key_is_invalid(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[contact]\nstifness = 1.0\n")
    assert main(["validate", str(p)]) == EXIT_INVALID
    assert "stifness" in capsys.readouterr().err
    assert main(["run", str(p)]) == EXIT_INVALID


def test_console_script_is_installed():
    exe = shutil.which("fbcbf")
    assert exe is not None
    res = subprocess.run([exe, "validate", str(ROOT / "configs" / "baseline.toml")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr


def test_run_writes_artifacts(short_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["run", short_cfg, "--out", str(out)]) == EXIT_OK
    header = (out / "trajectory.csv").read_text().splitlines()[0]
    assert header == (GOLDEN / "trajectory_columns.txt").read_text().strip()
    assert (out / "events.csv").read_text().splitlines()[0] == (GOLDEN / "events_columns.txt").read_text().strip()
    rows = read_rows(out / "trajectory.csv")
    assert len(rows) == 501 and float(rows[-1]["t"]) == pytest.approx(0.5)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["safe"] is True and summary["steps"] == 501
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config_hash"] == ScenarioConfig().replace(
        **{"sim.duration": 0.5}).content_hash()


def test_reruns_are_byte_identical(short_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", short_cfg, "--out", str(a), "--seed", "5"]) == EXIT_OK
    assert main(["run", short_cfg, "--out", str(b), "--seed", "5"]) == EXIT_OK
    for name in ("trajectory.csv", "events.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_changes_trajectory(short_cfg, tmp_path):
    main(["run", short_cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["run", short_cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() != (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_output_root_from_environment(short_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("FBCBF_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", short_cfg]) == EXIT_OK
    (run,) = (tmp_path / "root").iterdir()
    assert run.name.endswith("-s0") and (run / "trajectory.csv").exists()


def test_unsafe_run_exits_nonzero(tmp_path):
    out = tmp_path / "ablation"
    code = main(["run", str(ROOT / "configs" / "ablation_unfiltered.toml"), "--out", str(out)])
    assert code != EXIT_OK
    events = read_rows(out / "events.csv")
    assert any(e["event"] == "safety_violation" for e in events)
    assert json.loads((out / "summary.json").read_text())["safe"] is False


def test_grid_parsing(tmp_path):
    p = tmp_path / "g.toml"
    p.write_text("[grid]\ncontact.stiffness = [300.0, 600.0]\nsim.seed = [1, 2, 3]\n")
    grid = load_grid(p)
    assert grid == {"contact.stiffness": [300.0, 600.0], "sim.seed": [1, 2, 3]}
    assert len(grid_points(grid)) == 6
    assert grid_points({}) == [] and grid_points({"a": []}) == []


def test_empty_grid_gives_header_only_table(short_cfg, tmp_path):
    g = tmp_path / "g.toml"
    g.write_text("[grid]\ncontact.stiffness = []\n")
    table = tmp_path / "sweep.csv"
    assert main(["sweep", short_cfg, "--grid", str(g), "--table", str(table), "--out", str(tmp_path)]) == EXIT_OK
    lines = table.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("contact.stiffness,seed,safe")


def test_sweep_rows_and_invalid_points(short_cfg, tmp_path):
    g = tmp_path / "g.toml"
    g.write_text("[grid]\ninitial.e_y = [0.0, 0.04, 0.2]\n")
    table = tmp_path / "sweep.csv"
    code = main(["sweep", short_cfg, "--grid", str(g), "--table", str(table), "--out", str(tmp_path / "o")])
    rows = read_rows(table)
    assert [r["initial.e_y"] for r in rows] == ["0", "0.040000000000000001", "0.20000000000000001"]
    assert [r["safe"] for r in rows[:2]] == ["True", "True"]
    assert rows[2]["error"].startswith("ConfigError: invalid:") and "e_y" in rows[2]["error"]
    assert code != EXIT_OK


def test_sweep_seeds(short_cfg, tmp_path):
    g = tmp_path / "g.toml"
    g.write_text("[grid]\ncontact.stiffness = [300.0]\n")
    table = tmp_path / "sweep.csv"
    assert main(["sweep", short_cfg, "--grid", str(g), "--seeds", "2", "--table", str(table),
                 "--out", str(tmp_path / "o")]) == EXIT_OK
    assert [r["seed"] for r in read_rows(table)] == ["0", "1"]


def test_filter_activity_grows_with_reference_excursion(tmp_path):
    cfg = write_config(tmp_path / "c.toml", **{"sim.duration": 4.0, "initial.force": 1.0,
                                               "reference.force.period": 2.0})
    g = tmp_path / "g.toml"
    g.write_text("[grid]\nreference.force.amplitude = [0.0, 0.2, 0.4]\n")
    table = tmp_path / "sweep.csv"
    assert main(["sweep", cfg, "--grid", str(g), "--table", str(table), "--out", str(tmp_path / "o")]) == EXIT_OK
    acts = [int(r["filter_activations"]) for r in read_rows(table)]
    assert acts == sorted(acts) and acts[0] == 0 and acts[-1] > 0


def _sweep(tmp_path, grid_text, duration=5.0):
    cfg = write_config(tmp_path / "c.toml", **{"sim.duration": duration})
    g = tmp_path / "g.toml"
    g.write_text(grid_text)
    table = tmp_path / "sweep.csv"
    code = main(["sweep", cfg, "--grid", str(g), "--table", str(table), "--out", str(tmp_path / "o")])
    return code, read_rows(table)


def test_stiffness_sweep_is_safe(tmp_path):
    code, rows = _sweep(tmp_path, "[grid]\ncontact.stiffness = [100.0, 300.0, 900.0]\n")
    assert code == EXIT_OK and len(rows) == 3
    assert all(r["safe"] == "True" and r["error"] == "" for r in rows)


def test_disturbance_sweep_activations_are_monotone(tmp_path):
    code, rows = _sweep(tmp_path, "[grid]\ndisturbance.amplitude = [0.0, 0.1, 0.2]\n")
    acts = [int(r["filter_activations"]) for r in rows]
    assert code == EXIT_OK and acts == sorted(acts)
