import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from syncsim import harness
from syncsim.harness import (
    ExperimentConfig,
    config_hash,
    cost_report,
    default_config,
    format_validation_error,
    load_config,
    run_experiment,
    sweep_experiment,
    verify_equivalence,
)


def small_config_dict(output_dir: str, **overrides):
    cfg = {
        "task": {
            "num_classes": 4,
            "input_dim": 6,
            "cluster_spread": 0.5,
            "pretrain_size": 256,
            "finetune_size": 256,
            "test_size": 96,
            "shift": {"kind": "noise", "magnitude": 0.6},
            "seed": 3,
        },
        "network": {"hidden_dim": 8, "num_blocks": 2},
        "pretrain": {"lr_base": 0.05, "epochs": 2, "global_batch": 64, "drop_prob": 0.1, "seed": 0},
        "train": {"lr_base": 0.05, "epochs": 2, "global_batch": 32, "drop_prob": 0.1},
        "topology": {"num_devices": 4, "num_groups": 4},
        "strategy": {"kind": "grouped_sync"},
        "head_init": "mapped_head",
        "seeds": [1],
        "output_dir": output_dir,
    }
    cfg.update(overrides)
    return cfg


def small_config(output_dir: str, **overrides) -> ExperimentConfig:
    return ExperimentConfig.model_validate(small_config_dict(output_dir, **overrides))


def _dir_bytes(root: Path):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# ---------------------------------------------------------------------------
# config handling


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(small_config_dict(str(tmp_path / "out"))), encoding="utf-8")
    cfg = load_config(path)
    assert cfg.strategy.kind == "grouped_sync"


def test_invalid_config_reports_field_path(tmp_path):
    bad = small_config_dict(str(tmp_path))
    bad["task"]["cluster_spread"] = -1.0
    with pytest.raises(ValidationError) as exc_info:
        ExperimentConfig.model_validate(bad)
    message = format_validation_error(exc_info.value)
    assert "task.cluster_spread" in message


def test_cross_field_validation(tmp_path):
    bad = small_config_dict(str(tmp_path))
    bad["train"]["global_batch"] = 30  # not divisible by 4 devices
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(bad)


def test_config_hash_ignores_output_dir_and_scheduler(tmp_path):
    a = small_config(str(tmp_path / "a"))
    b = small_config(str(tmp_path / "b"), execution="sequential")
    assert config_hash(a) == config_hash(b)
    c = small_config(str(tmp_path / "a"), seeds=[2])
    assert config_hash(a) != config_hash(c)


def test_default_config_is_valid():
    cfg = default_config()
    assert cfg.topology.num_devices == 4
    assert cfg.task.num_classes * 2 == 20
    assert len(cfg.seeds) >= 5


# ---------------------------------------------------------------------------
# run


def test_run_experiment_artifacts_and_caching(tmp_path):
    cfg = small_config(str(tmp_path / "out"))
    report = run_experiment(cfg)
    run_dir = tmp_path / "out" / f"run-{config_hash(cfg)}"
    assert (run_dir / "report.json").exists()
    assert (run_dir / "summary.csv").exists()
    assert (run_dir / "metrics-local-seed1.csv").exists()
    assert (run_dir / "params-seed1.json").exists()
    models = {r["model"] for r in report["rows"]}
    assert models == {"baseline", "merged", "individual", "ensemble"}
    # cached: mutate the report on disk, rerun without force, get disk copy back
    tweaked = dict(report)
    tweaked["marker"] = "cached"
    (run_dir / "report.json").write_text(json.dumps(tweaked), encoding="utf-8")
    assert run_experiment(cfg).get("marker") == "cached"
    # force recomputes and clears the marker
    assert "marker" not in run_experiment(cfg, force=True)


def test_run_experiment_full_sync_rows_identical(tmp_path):
    cfg = small_config(str(tmp_path / "out"), strategy={"kind": "full_sync"})
    report = run_experiment(cfg)
    rows = {r["model"]: r for r in report["rows"]}
    assert rows["baseline"]["acc_test_id"] == rows["merged"]["acc_test_id"]
    assert rows["baseline"]["acc_test_ood"] == rows["merged"]["acc_test_ood"]
    assert rows["merged"]["p_test_id"] == 1.0


def test_run_experiment_byte_identical_across_invocations(tmp_path):
    cfg_a = small_config(str(tmp_path / "a"))
    cfg_b = small_config(str(tmp_path / "b"))
    run_experiment(cfg_a)
    run_experiment(cfg_b)
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_sequential_and_threaded_artifacts_identical(tmp_path):
    cfg_a = small_config(str(tmp_path / "a"), execution="threads")
    cfg_b = small_config(str(tmp_path / "b"), execution="sequential")
    run_experiment(cfg_a)
    run_experiment(cfg_b)
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_run_experiment_multiple_seeds_aggregate(tmp_path):
    cfg = small_config(str(tmp_path / "out"), seeds=[1, 2, 3])
    report = run_experiment(cfg)
    run_dir = tmp_path / "out" / f"run-{config_hash(cfg)}"
    for seed in (1, 2, 3):
        assert (run_dir / f"metrics-local-seed{seed}.csv").exists()
    merged = next(e for e in report["summary"] if e["model"] == "merged")
    assert merged["num_seeds"] == 3
    assert merged["acc_test_id_min"] <= merged["acc_test_id_mean"] <= merged["acc_test_id_max"]


def test_head_init_variants_run(tmp_path):
    for head_init, extra in (
        ("zero_init", {}),
        ("linear_probe", {"probe": {"steps": 10, "batch_size": 32, "lr": 0.2}}),
    ):
        cfg = small_config(str(tmp_path / head_init), head_init=head_init, **extra)
        report = run_experiment(cfg)
        assert report["rows"]


def test_linear_probe_requires_probe_section(tmp_path):
    with pytest.raises(ValidationError):
        small_config(str(tmp_path), head_init="linear_probe")


def test_diversity_config_runs(tmp_path):
    cfg = small_config(str(tmp_path / "out"), strategy={"kind": "independent"}, diversity={"lambda": -0.5})
    report = run_experiment(cfg)
    assert report["rows"]


def test_ema_and_wise_ft_side_tables(tmp_path):
    cfg = small_config(
        str(tmp_path / "out"), ema={"betas": [0.9, 0.99]}, wise_ft={"alphas": [0.0, 0.5, 1.0]}
    )
    run_experiment(cfg)
    run_dir = tmp_path / "out" / f"run-{config_hash(cfg)}"
    assert (run_dir / "ema-seed1.csv").exists()
    assert (run_dir / "wise-ft-seed1.csv").exists()


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_unknown_axis(tmp_path):
    cfg = small_config(str(tmp_path / "out"))
    with pytest.raises(ValueError, match="unknown sweep axis"):
        sweep_experiment(cfg, "width")


def test_sweep_requires_values(tmp_path):
    cfg = small_config(str(tmp_path / "out"))
    with pytest.raises(ValueError, match="no sweep values"):
        sweep_experiment(cfg, "groups")


def test_sweep_groups_axis(tmp_path):
    cfg = small_config(str(tmp_path / "out"), sweep={"groups": [2, 4]})
    report = sweep_experiment(cfg, "groups")
    values = {r["value"] for r in report["rows"]}
    assert values == {2, 4}
    sweep_dir = tmp_path / "out" / f"sweep-groups-{config_hash(cfg)}"
    assert (sweep_dir / "sweep_long.csv").exists()


def test_sweep_single_value_matches_run(tmp_path):
    cfg = small_config(str(tmp_path / "out"), sweep={"epochs": [2]})
    sweep_report = sweep_experiment(cfg, "epochs")
    # the sweep's only point is the config itself, so its rows must be the
    # run's rows verbatim
    run_report = run_experiment(cfg)
    sweep_rows = [{k: v for k, v in r.items() if k not in ("axis", "value")} for r in sweep_report["rows"]]
    assert sweep_rows == run_report["rows"]


def test_sweep_nodes_axis_flags_data_factor(tmp_path):
    cfg = small_config(str(tmp_path / "out"), sweep={"nodes": [4, 8]})
    report = sweep_experiment(cfg, "nodes")
    factors = {r["value"]: r["data_factor"] for r in report["rows"]}
    assert factors == {4: 1, 8: 2}
    with pytest.raises(ValueError, match="multiple"):
        sweep_experiment(small_config(str(tmp_path / "o2"), sweep={"nodes": [6]}), "nodes", force=True)


def test_sweep_lambda_axis_includes_reference(tmp_path):
    cfg = small_config(
        str(tmp_path / "out"), strategy={"kind": "independent"}, sweep={"lambda": [-0.5, 0.5]}
    )
    report = sweep_experiment(cfg, "lambda")
    values = {str(r["value"]) for r in report["rows"]}
    assert values == {"none", "-0.5", "0.5"}


def test_sweep_ema_beta_axis(tmp_path):
    cfg = small_config(str(tmp_path / "out"), sweep={"ema_beta": [0.9, 0.99]})
    report = sweep_experiment(cfg, "ema_beta")
    assert {float(r["value"]) for r in report["rows"]} == {0.9, 0.99}


# ---------------------------------------------------------------------------
# cost report


def test_cost_report_default_profiles(tmp_path):
    report = cost_report(None, tmp_path / "cost")
    assert (tmp_path / "cost" / "costreport.csv").exists()
    rows = report["rows"]
    by_key = {}
    for r in rows:
        by_key[(r["profile_id"], r["strategy"], r["overlap"], r["batch_factor"])] = r
    for (profile, strat, overlap, factor), row in by_key.items():
        if not overlap:
            other = by_key[(profile, strat, True, factor)]
            assert other["overhead_percent"] <= row["overhead_percent"] + 1e-9


def test_cost_report_zero_comm_profile(tmp_path):
    cost = {
        "profiles": [
            {
                "name": "zero-comm",
                "layers": [[1.0, 0.0], [1.0, 0.0]],
                "forward_time": 0.5,
                "bandwidth": 1.0,
                "latency_per_message": 0.0,
            }
        ],
        "batch_factors": [1.0],
        "iterations": 5,
    }
    report = cost_report(cost, tmp_path / "cost")
    assert all(abs(r["overhead_percent"]) <= 1e-12 for r in report["rows"])


def test_cost_report_queue_wait_column(tmp_path):
    cost = {"iterations": 3, "queue_wait": {"1": 2700.0, "4": 7200.0}}
    report = cost_report(cost, tmp_path / "cost")
    full = [r for r in report["rows"] if r["strategy"] == "full_sync"]
    ind = [r for r in report["rows"] if r["strategy"] == "independent"]
    assert all(r["time_to_result"] == pytest.approx(r["seconds"] + 7200.0) for r in full)
    assert all(r["time_to_result"] == pytest.approx(r["seconds"] + 2700.0) for r in ind)


# ---------------------------------------------------------------------------
# verification verbs


def test_verify_equivalence_passes(tmp_path):
    ok, checks = verify_equivalence(small_config(str(tmp_path / "out")))
    assert ok
    assert len(checks) == 4
    assert all(c["ok"] for c in checks)


def test_barrier_scan_report(tmp_path):
    cfg = small_config(str(tmp_path / "out"))
    report = harness.barrier_scan_report(cfg, num_points=5)
    assert len(report["pairs"]) == 6  # 4 workers -> 6 pairs
    for pair in report["pairs"]:
        assert np.isfinite(pair["barrier"])
    scan_dir = tmp_path / "out" / f"barrier-{config_hash(cfg)}"
    assert (scan_dir / "barrier_scan.csv").exists()
