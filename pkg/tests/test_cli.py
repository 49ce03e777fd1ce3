import json
from pathlib import Path

import pytest

from syncsim.cli import main
from tests.test_harness import _dir_bytes, small_config_dict


def _write_config(tmp_path: Path, out_name: str = "out", **overrides) -> Path:
    cfg = small_config_dict(str(tmp_path / out_name), **overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


def test_cli_run(tmp_path, capsys):
    cfg_path = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "artifacts:" in out
    assert "merged" in out
    assert any((tmp_path / "out").glob("run-*"))


def test_cli_run_out_and_seeds_overrides(tmp_path):
    cfg_path = _write_config(tmp_path)
    override_dir = tmp_path / "elsewhere"
    assert main(["run", "--config", str(cfg_path), "--out", str(override_dir), "--seeds", "2,3"]) == 0
    run_dirs = list(override_dir.glob("run-*"))
    assert len(run_dirs) == 1
    assert (run_dirs[0] / "metrics-local-seed2.csv").exists()
    assert (run_dirs[0] / "metrics-local-seed3.csv").exists()


def test_cli_sequential_matches_threaded(tmp_path):
    cfg_path = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "thr")]) == 0
    assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "seq"), "--sequential"]) == 0
    assert _dir_bytes(tmp_path / "thr") == _dir_bytes(tmp_path / "seq")


def test_cli_invalid_config_exits_2(tmp_path, capsys):
    cfg = small_config_dict(str(tmp_path / "out"))
    cfg["task"]["cluster_spread"] = -1.0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    with pytest.raises(SystemExit) as exc_info:
        main(["run", "--config", str(path)])
    assert exc_info.value.code == 2
    assert "cluster_spread" in capsys.readouterr().err


def test_cli_missing_config_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc_info:
        main(["run", "--config", str(tmp_path / "nope.json")])
    assert exc_info.value.code == 2


def test_cli_verify_equivalence(tmp_path, capsys):
    cfg_path = _write_config(tmp_path)
    assert main(["verify-equivalence", "--config", str(cfg_path)]) == 0
    out = capsys.readouterr().out
    assert "all equivalence checks passed" in out


def test_cli_barrier_scan(tmp_path, capsys):
    cfg_path = _write_config(tmp_path)
    assert main(["barrier-scan", "--config", str(cfg_path), "--points", "5"]) == 0
    assert "barrier" in capsys.readouterr().out


def test_cli_costreport(tmp_path, capsys):
    profile = {"iterations": 3, "batch_factors": [1.0]}
    ppath = tmp_path / "cost.json"
    ppath.write_text(json.dumps(profile), encoding="utf-8")
    assert main(["costreport", "--profile", str(ppath), "--out", str(tmp_path / "cost")]) == 0
    assert (tmp_path / "cost" / "costreport.csv").exists()


def test_cli_sweep(tmp_path, capsys):
    cfg_path = _write_config(tmp_path, sweep={"groups": [2, 4]})
    assert main(["sweep", "--config", str(cfg_path), "--axis", "groups"]) == 0
    assert "rows:" in capsys.readouterr().out


def test_cli_init_config(tmp_path):
    target = tmp_path / "exp.json"
    assert main(["init-config", "--out", str(target)]) == 0
    cfg = json.loads(target.read_text(encoding="utf-8"))
    assert cfg["topology"]["num_devices"] == 4
