import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from stochbsde.cli import list_presets, main
from stochbsde.io import load_fields, read_process_csv

SMALL_SOLVE = {"kind": "solve", "seed": 2, "grid": {"n_steps": 20}, "ensemble": {"n_paths": 20000},
               "generator": "linear:0.5,0", "terminal": "B_T", "estimator": {"state_map": "brownian"}}


def _config(tmp_path, data, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def test_list_presets_sorted_and_complete(capsys):
    assert main(["list-presets"]) == 0
    out = capsys.readouterr().out
    assert out == list_presets()
    titles = [line[:-1] for line in out.splitlines() if not line.startswith(" ")]
    assert titles == sorted(titles) == ["experiments", "generators", "rho", "state maps", "stopping", "terminal"]
    blocks = out.split(":\n")
    for block in blocks[1:]:
        names = [line.strip() for line in block.splitlines() if line.startswith("  ")]
        assert names == sorted(names)
    for name in ("verify-gronwall", "example46:M,delta", "h:<delta>", "brownian", "exit:<level>", "B_tau"):
        assert f"  {name}\n" in out


def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", _config(tmp_path, SMALL_SOLVE)]) == 0
    assert main(["validate", _config(tmp_path, {**SMALL_SOLVE, "extra": 1}, "bad.yaml")]) == 2
    assert "extra" in capsys.readouterr().err
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 2


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", _config(tmp_path, SMALL_SOLVE), "--output-dir", str(out), "--export-paths", "50"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "passed" and manifest["seed"] == 2
    assert manifest["checks"]["oracle_y_within_5pct"]
    assert set(manifest["outputs"]) == {"fields.bin", "y0.csv", "Y_paths.csv"}
    fields = load_fields(out / "fields.bin")["fields"]
    assert fields["Y"].shape == (50, 21, 1)
    assert read_process_csv(out / "Y_paths.csv").shape == (50, 21, 1)
    assert "solve: passed" in capsys.readouterr().out


def test_global_flags_before_or_after_subcommand(tmp_path):
    cfg = _config(tmp_path, SMALL_SOLVE)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["--seed", "5", "--output-dir", str(a), "run", cfg]) == 0
    assert main(["run", cfg, "--seed", "5", "--output-dir", str(b), "--threads", "2"]) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["seed"] == mb["seed"] == 5
    assert (a / "fields.bin").read_bytes() == (b / "fields.bin").read_bytes()


def test_failed_check_exits_one(tmp_path):
    # two implicit steps overshoot e^{1/2} per step by about 20%
    data = {**SMALL_SOLVE, "grid": {"n_steps": 2}, "generator": "linear:1,0", "ensemble": {"n_paths": 500}}
    out = tmp_path / "o"
    assert main(["run", _config(tmp_path, data), "--output-dir", str(out)]) == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and manifest["summary"]["failed"]


def test_runtime_error_exits_two_with_manifest(tmp_path):
    data = {"kind": "verify-gronwall", "seed": 1, "grid": {"n_steps": 5}, "ensemble": {"n_paths": 50},
            "gronwall": {"instances": 0, "deterministic_b": 1e6, "n_outer": 4, "inner_paths": 4}}
    out = tmp_path / "o"
    assert main(["run", _config(tmp_path, data), "--output-dir", str(out)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "error" and manifest["error"]["type"] == "OverflowError"


def test_rerun_is_identical_apart_from_timings(tmp_path):
    cfg = _config(tmp_path, {**SMALL_SOLVE, "generator": "example46:1,0.1", "terminal": "sin_cos_B_T",
                             "estimator": {}, "solver": {"N": 2}})
    dirs = [tmp_path / "r1", tmp_path / "r2"]
    for d, threads in zip(dirs, ("1", "4")):
        main(["run", cfg, "--output-dir", str(d), "--threads", threads])
    m1, m2 = (json.loads((d / "manifest.json").read_text()) for d in dirs)
    m1.pop("timings"), m2.pop("timings")
    assert m1 == m2
    for name in m1["outputs"]:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    assert np.isfinite(load_fields(dirs[0] / "fields.bin")["fields"]["Y"]).all()


@pytest.mark.parametrize("name", ["verify_bihari_identity.yaml", "verify_bihari_zero.yaml", "verify_bihari_h.yaml"])
def test_shipped_quick_configs_pass(name, tmp_path):
    cfg = Path(__file__).resolve().parents[1] / "configs" / name
    assert main(["run", str(cfg), "--output-dir", str(tmp_path)]) == 0
