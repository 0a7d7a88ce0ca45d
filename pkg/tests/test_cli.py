import json
import subprocess
import sys

import pytest

from grushin_lab.cli import main

SWEEP = {"field": "rotating", "lam": 1.0, "Lam": 2.0, "grid_n": 33, "offsets": [0.0, 1.5], "seeds": [1, 2]}


def run(tmp_path, name, *args):
    out = tmp_path / name
    return main([*args, "--out", str(out)]), out


def test_geom_verify(tmp_path):
    code, out = run(tmp_path, "g", "geom", "verify", "--center", "0,0", "--radius", "1", "--samples", "10000")
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    names = [r["name"] for r in report["reports"]]
    assert "structure_charact" in names and "structure_equiv" in names
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "geom" and len(manifest["config_hash"]) == 64
    assert (out / "summary.csv").exists() and (out / "timing.json").exists()


def test_barrier_verify(tmp_path):
    code, out = run(tmp_path, "b", "barrier", "verify", "--lambda", "1", "--big-lambda", "2", "--center", "1,0",
                    "--radius", "1", "--samples", "2000")
    assert code == 0
    names = [r["name"] for r in json.loads((out / "report.json").read_text())["reports"]]
    assert "power_barrier_subsolution" in names and "ring_barrier" in names


def test_solve_and_abp(tmp_path):
    code, out = run(tmp_path, "s", "solve", "--grid-n", "17")
    assert code == 0 and (out / "solution.csv").read_text().startswith("x1,x2,value")
    code, out = run(tmp_path, "a", "abp", "--grid-n", "17")
    assert code == 0 and (out / "envelope.csv").exists()


def test_lab_sweep_artifacts_and_determinism(tmp_path):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps(SWEEP))
    code1, out1 = run(tmp_path, "r1", "lab", "harnack", "--config", str(cfg))
    code2, out2 = run(tmp_path, "r2", "lab", "harnack", "--config", str(cfg))
    assert code1 == code2 == 0
    assert (out1 / "report.json").read_bytes() == (out2 / "report.json").read_bytes()
    rows = (out1 / "summary.csv").read_text().splitlines()
    assert len(rows) == 1 + 4
    assert json.loads((out1 / "manifest.json").read_text())["seed"] == [1, 2]


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"grid_n": 33, "center": [0.5, 0.0]}))
    code, out = run(tmp_path, "o", "lab", "harnack", "--config", str(cfg), "--grid-n", "41")
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["grid_n"] == 41


@pytest.mark.parametrize("args", [
    ["geom", "verify", "--bogus"],
    ["geom", "check"],
    ["lab", "harnack", "--center", "1"],
    ["teleport"],
])
def test_usage_errors_exit_1(tmp_path, args):
    assert main([*args, "--out", str(tmp_path / "x")]) == 1


def test_config_errors_exit_1(tmp_path):
    bad_key = tmp_path / "k.json"
    bad_key.write_text(json.dumps({"grid_n": 33, "colour": "red"}))
    assert main(["lab", "harnack", "--config", str(bad_key)]) == 1
    assert main(["geom", "verify", "--config", str(bad_key)]) == 1
    broken = tmp_path / "b.json"
    broken.write_text("{not json")
    assert main(["lab", "harnack", "--config", str(broken)]) == 1
    assert main(["lab", "harnack", "--config", str(tmp_path / "missing.json")]) == 1


def test_failed_verdict_exit_2(tmp_path):
    cfg = tmp_path / "f.json"
    # a coarse checkerboard sweep whose eps_hat spread exceeds the uniformity bound
    cfg.write_text(json.dumps({"field": "checkerboard", "lam": 1.0, "Lam": 4.0, "grid_n": 49,
                               "offsets": [0.5, 1.0], "seeds": [1, 2]}))
    code, out = run(tmp_path, "f", "lab", "power-decay", "--config", str(cfg))
    report = json.loads((out / "report.json").read_text())
    assert code == 2 and not report["passed"]
    assert report["measurements"]["aggregate"]["power_decay"]["spread"] > 10


def test_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GRUSHIN_LAB_OUT", str(tmp_path / "root"))
    assert main(["lab", "double-ball", "--grid-n", "33"]) == 0
    made = list((tmp_path / "root").iterdir())
    assert len(made) == 1 and made[0].name.startswith("lab-double-ball-")


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "grushin_lab.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "grushin-lab" in res.stdout
