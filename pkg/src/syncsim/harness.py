"""Experiment orchestration: single runs, sweeps, and cost reports.

Configs are JSON documents validated by pydantic models.  Every run writes
into a directory named by the hash of its config, so rerunning the same
config is a no-op unless forced, and two invocations on the same config
produce byte-identical artifacts.

A run always trains two things from one shared pretrained initialization:
the fully synchronized baseline, and the configured strategy with the
slightly reduced stochastic-depth drop rate used for local runs.  The
summary report compares baseline / merged / individual / ensemble rows on
the in-distribution and shifted test splits, with exact McNemar p-values
against the baseline.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import costmodel, engine, weightspace
from .data import Batch, ShiftSpec, TaskBundle, TaskSpec, generate_task
from .diversity import DiversityConfig
from .engine import (
    CommStrategy,
    FullSync,
    GroupedSync,
    Independent,
    RunResult,
    Topology,
    TrainConfig,
    run_results_equal,
)
from .evalstats import PairedOutcome, accuracy, mcnemar_exact, write_metrics
from .network import EVAL, NetworkConfig, ParamVector, forward, init_params
from .weightspace import ProbeConfig, dataset_evaluator, linear_probe, loss_barrier

# ---------------------------------------------------------------------------
# config schema


class ShiftModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["rotation", "noise", "scale"]
    magnitude: float
    seed: int = 0

    def to_spec(self) -> ShiftSpec:
        return ShiftSpec(self.kind, self.magnitude, self.seed)


class TaskModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    num_classes: int = Field(ge=2)
    input_dim: int = Field(ge=2)
    cluster_spread: float = Field(gt=0)
    pretrain_size: int = Field(ge=2)
    finetune_size: int = Field(ge=2)
    test_size: int = Field(ge=2)
    shift: ShiftModel
    seed: int = 0

    def to_spec(self) -> TaskSpec:
        return TaskSpec(
            self.num_classes,
            self.input_dim,
            self.cluster_spread,
            self.pretrain_size,
            self.finetune_size,
            self.test_size,
            self.shift.to_spec(),
            self.seed,
        )


class NetworkModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    hidden_dim: int = Field(ge=1)
    num_blocks: int = Field(ge=0)


class OptimizerModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["sgd", "sgd_momentum", "adamw"] = "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def to_spec(self) -> engine.OptimizerSpec:
        if self.kind == "sgd":
            return engine.Sgd()
        if self.kind == "sgd_momentum":
            return engine.SgdMomentum(self.momentum)
        return engine.AdamW(self.beta1, self.beta2, self.eps, self.weight_decay)


class PhaseModel(BaseModel):
    """Settings for one optimization phase (pretraining or fine-tuning)."""

    model_config = ConfigDict(extra="forbid")
    lr_base: float = Field(gt=0)
    epochs: int = Field(ge=1)
    global_batch: int = Field(ge=1)
    optimizer: OptimizerModel = OptimizerModel()
    drop_prob: float = Field(default=0.0, ge=0.0, lt=1.0)
    lr_schedule: Literal["cosine_per_iteration", "constant"] = "cosine_per_iteration"
    seed: int = 0

    def to_config(
        self,
        seed: Optional[int] = None,
        drop_prob: Optional[float] = None,
        lr_base: Optional[float] = None,
    ) -> TrainConfig:
        return TrainConfig(
            lr_base=self.lr_base if lr_base is None else lr_base,
            epochs=self.epochs,
            global_batch=self.global_batch,
            optimizer=self.optimizer.to_spec(),
            drop_prob=self.drop_prob if drop_prob is None else drop_prob,
            lr_schedule=self.lr_schedule,
            seed=self.seed if seed is None else seed,
        )


class TopologyModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    num_devices: int = Field(ge=1)
    num_groups: int = Field(ge=1)

    def to_topology(self) -> Topology:
        return Topology.even(self.num_devices, self.num_groups)


class StrategyModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: Literal["full_sync", "grouped_sync", "independent", "local_sgd"]
    period: int = Field(default=1, ge=1)

    def to_strategy(self) -> CommStrategy:
        return engine.parse_strategy({"kind": self.kind, "period": self.period})


class ProbeModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    steps: int = Field(ge=0)
    batch_size: int = Field(ge=1)
    lr: float = Field(gt=0)
    seed: int = 0

    def to_config(self) -> ProbeConfig:
        return ProbeConfig(self.steps, self.batch_size, self.lr, self.seed)


class DiversityModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    lam: float = Field(alias="lambda")
    beta_a: float = Field(default=1.0, gt=0)
    pairing: Optional[List[int]] = None

    def to_config(self, num_workers: int) -> DiversityConfig:
        if self.pairing is not None:
            return DiversityConfig(self.lam, tuple(self.pairing), self.beta_a)
        return DiversityConfig.adjacent(self.lam, num_workers, self.beta_a)


class EmaModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    betas: List[float] = Field(min_length=1)


class WiseFtModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    alphas: List[float] = Field(min_length=1)


class SweepModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    groups: Optional[List[int]] = None
    nodes: Optional[List[int]] = None
    ema_beta: Optional[List[float]] = None
    wise_ft_alpha: Optional[List[float]] = None
    lam: Optional[List[float]] = Field(default=None, alias="lambda")
    epochs: Optional[List[int]] = None


SWEEP_AXES = ("groups", "nodes", "ema_beta", "wise_ft_alpha", "lambda", "epochs")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    task: TaskModel
    network: NetworkModel
    pretrain: PhaseModel
    train: PhaseModel
    topology: TopologyModel
    strategy: StrategyModel
    head_init: Literal["mapped_head", "linear_probe", "zero_init"] = "mapped_head"
    probe: Optional[ProbeModel] = None
    diversity: Optional[DiversityModel] = None
    ema: Optional[EmaModel] = None
    wise_ft: Optional[WiseFtModel] = None
    sweep: Optional[SweepModel] = None
    seeds: List[int] = Field(min_length=1)
    output_dir: str = "artifacts"
    local_drop_delta: float = Field(default=0.05, ge=0.0)
    local_lr_base: Optional[float] = Field(default=None, gt=0)  # default: same lr as the baseline
    execution: Literal["sequential", "threads"] = "threads"

    @model_validator(mode="after")
    def _cross_checks(self) -> "ExperimentConfig":
        if self.train.global_batch % self.topology.num_devices != 0:
            raise ValueError("train.global_batch must be divisible by topology.num_devices")
        if self.topology.num_devices % self.topology.num_groups != 0:
            raise ValueError("topology.num_devices must be divisible by topology.num_groups")
        if self.head_init == "linear_probe" and self.probe is None:
            raise ValueError("head_init 'linear_probe' needs a probe section")
        return self


def load_config(path: Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.model_validate(raw)


def format_validation_error(exc: ValidationError) -> str:
    lines = ["invalid config:"]
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def canonical_config_dict(cfg: ExperimentConfig) -> Dict:
    """The content of a config: everything that can change what a run produces.

    The output location and the scheduler choice are excluded; neither
    changes a single byte of the artifacts (the sequential and threaded
    schedulers are contractually bit-identical).
    """
    dump = cfg.model_dump(by_alias=True)
    dump.pop("output_dir", None)
    dump.pop("execution", None)
    return dump


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(canonical_config_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def default_config(output_dir: str = "artifacts") -> ExperimentConfig:
    """The stock experiment: 4 simulated devices, one group each.

    Pretraining covers twice as many classes as fine-tuning, so the head of
    the pretrained model can be carried over by class mapping.
    """
    return ExperimentConfig.model_validate(
        {
            "task": {
                "num_classes": 10,
                "input_dim": 16,
                "cluster_spread": 1.0,
                "pretrain_size": 4096,
                "finetune_size": 2048,
                "test_size": 512,
                "shift": {"kind": "noise", "magnitude": 1.0},
                "seed": 7,
            },
            "network": {"hidden_dim": 32, "num_blocks": 3},
            "pretrain": {
                "lr_base": 0.05,
                "epochs": 6,
                "global_batch": 128,
                "optimizer": {"kind": "sgd_momentum", "momentum": 0.9},
                "drop_prob": 0.1,
                "seed": 0,
            },
            "train": {
                "lr_base": 0.02,
                "epochs": 4,
                "global_batch": 64,
                "optimizer": {"kind": "sgd_momentum", "momentum": 0.9},
                "drop_prob": 0.1,
            },
            "topology": {"num_devices": 4, "num_groups": 4},
            "strategy": {"kind": "grouped_sync"},
            "head_init": "mapped_head",
            "seeds": [1, 2, 3, 4, 5],
            "output_dir": output_dir,
        }
    )


# ---------------------------------------------------------------------------
# shared pieces


def _json_dump(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def pretrain_cache_key(cfg: ExperimentConfig) -> str:
    payload = {
        "task": cfg.task.model_dump(),
        "network": cfg.network.model_dump(),
        "pretrain": cfg.pretrain.model_dump(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def pretrained_params(cfg: ExperimentConfig, task: TaskBundle, cache_dir: Path) -> ParamVector:
    """Train (or load) the pretraining-phase model shared by all comparisons."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_file = cache_dir / f"pretrained-{pretrain_cache_key(cfg)}.json"
    if cache_file.exists():
        return engine.params_from_json(json.loads(cache_file.read_text(encoding="utf-8")))
    net = NetworkConfig(
        input_dim=cfg.task.input_dim,
        hidden_dim=cfg.network.hidden_dim,
        num_blocks=cfg.network.num_blocks,
        num_classes=task.num_pretrain_classes,
        drop_prob=cfg.pretrain.drop_prob,
    )
    init = init_params(net, cfg.pretrain.seed)
    result = engine.train(
        task,
        init,
        cfg.pretrain.to_config(),
        Topology.even(1, 1),
        FullSync(),
        eval_each_epoch=False,
        train_split=task.pretrain,
    )
    params = result.merged
    _json_dump(engine.params_to_json(params), cache_file)
    return params


def finetune_init(cfg: ExperimentConfig, task: TaskBundle, theta_pre: ParamVector) -> ParamVector:
    """Build the fine-tuning initialization according to the head strategy.

    "mapped_head" keeps the pretrained classifier rows of the fine-tuning
    classes, "linear_probe" trains a fresh head with the body frozen, and
    "zero_init" starts the head at zero (the ablation that new-parameter
    fine-tuning would correspond to).
    """
    net = NetworkConfig(
        input_dim=cfg.task.input_dim,
        hidden_dim=cfg.network.hidden_dim,
        num_blocks=cfg.network.num_blocks,
        num_classes=cfg.task.num_classes,
    )
    target = init_params(net, 0, zero_head=True)
    body_end = target.head_slice().start
    values = target.values.copy()
    values[:body_end] = theta_pre.values[: theta_pre.head_slice().start]
    theta0 = target.with_values(values)
    if cfg.head_init == "mapped_head":
        mapping = np.array(task.label_map)
        hw = theta0.segment("head.weight")
        hb = theta0.segment("head.bias")
        hw[:, :] = theta_pre.segment("head.weight")[mapping, :]
        hb[:] = theta_pre.segment("head.bias")[mapping]
        return theta0
    if cfg.head_init == "zero_init":
        return theta0
    return linear_probe(theta0, task.finetune_train, cfg.probe.to_config())


def _predict(params: ParamVector, split: Batch) -> Tuple[np.ndarray, float]:
    logits = forward(params, split.inputs, EVAL)
    return np.argmax(logits, axis=1), accuracy(logits, split.labels)


def _mcnemar_vs(preds_base: np.ndarray, preds: np.ndarray, labels: np.ndarray) -> float:
    p, _ = mcnemar_exact(PairedOutcome.from_predictions(preds_base, preds, labels))
    return p


def comparison_rows(task: TaskBundle, baseline: RunResult, local: RunResult) -> List[Dict]:
    """Table rows for one seed: baseline, merged, individual, ensemble."""
    rows = []
    base_preds = {}
    for split_name, split in (("test_id", task.test_id), ("test_ood", task.test_ood)):
        base_preds[split_name] = _predict(baseline.merged, split)

    def add_row(name: str, acc_by_split: Dict[str, float], preds_by_split: Dict[str, np.ndarray]) -> None:
        row = {"model": name}
        for split_name, split in (("test_id", task.test_id), ("test_ood", task.test_ood)):
            p = _mcnemar_vs(base_preds[split_name][0], preds_by_split[split_name], split.labels)
            row[f"acc_{split_name}"] = acc_by_split[split_name]
            row[f"p_{split_name}"] = p
            row[f"sig_{split_name}"] = bool(p < 0.05)  # paired difference from the baseline
        rows.append(row)

    add_row(
        "baseline",
        {s: base_preds[s][1] for s in base_preds},
        {s: base_preds[s][0] for s in base_preds},
    )

    merged_eval = {s: _predict(local.merged, split) for s, split in (("test_id", task.test_id), ("test_ood", task.test_ood))}
    add_row("merged", {s: merged_eval[s][1] for s in merged_eval}, {s: merged_eval[s][0] for s in merged_eval})

    # individual row: accuracy averaged over workers, paired test on worker 0
    ind_acc = {}
    ind_preds = {}
    for split_name, split in (("test_id", task.test_id), ("test_ood", task.test_ood)):
        per_worker = [_predict(w, split) for w in local.workers]
        ind_acc[split_name] = float(np.mean([a for _, a in per_worker]))
        ind_preds[split_name] = per_worker[0][0]
    add_row("individual", ind_acc, ind_preds)

    ens_acc = {}
    ens_preds = {}
    for split_name, split in (("test_id", task.test_id), ("test_ood", task.test_ood)):
        probs = weightspace.ensemble_predict(local.workers, split.inputs)
        ens_preds[split_name] = np.argmax(probs, axis=1)
        ens_acc[split_name] = accuracy(probs, split.labels)
    add_row("ensemble", ens_acc, ens_preds)
    return rows


def _local_train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    """Local runs reuse the baseline settings with slightly less regularization.

    The drop rate is reduced by `local_drop_delta` (each group sees less
    data per step); the learning rate stays the baseline's unless
    `local_lr_base` overrides it.
    """
    drop = max(0.0, cfg.train.drop_prob - cfg.local_drop_delta)
    return cfg.train.to_config(seed=seed, drop_prob=drop, lr_base=cfg.local_lr_base)


def run_pair(
    cfg: ExperimentConfig, task: TaskBundle, theta0: ParamVector, seed: int
) -> Tuple[RunResult, RunResult]:
    """Baseline and configured-strategy runs for one seed, sharing theta0."""
    topo = cfg.topology.to_topology()
    baseline = engine.train(
        task, theta0, cfg.train.to_config(seed=seed), topo, FullSync(), execution=cfg.execution,
        ema_betas=cfg.ema.betas if cfg.ema else (),
    )
    strategy = cfg.strategy.to_strategy()
    if isinstance(strategy, FullSync):
        return baseline, baseline
    diversity = cfg.diversity.to_config(topo.num_groups) if cfg.diversity else None
    local = engine.train(
        task,
        theta0,
        _local_train_config(cfg, seed),
        topo,
        strategy,
        diversity=diversity,
        ema_betas=cfg.ema.betas if cfg.ema else (),
        execution=cfg.execution,
    )
    return baseline, local


# ---------------------------------------------------------------------------
# run verb


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> Dict:
    """Execute the configured experiment; returns the report (also on disk).

    The artifact directory is addressed by the config hash.  A directory
    that already holds a finished report is reused as-is unless `force`.
    """
    out_root = Path(cfg.output_dir)
    run_dir = out_root / f"run-{config_hash(cfg)}"
    report_path = run_dir / "report.json"
    if report_path.exists() and not force:
        return json.loads(report_path.read_text(encoding="utf-8"))
    run_dir.mkdir(parents=True, exist_ok=True)

    task = generate_task(cfg.task.to_spec())
    theta_pre = pretrained_params(cfg, task, out_root / "cache")
    theta0 = finetune_init(cfg, task, theta_pre)

    local_is_synced = cfg.strategy.kind == "full_sync"
    comm_free = not local_is_synced and cfg.strategy.kind != "local_sgd" and cfg.diversity is None
    local_drop = cfg.train.drop_prob if local_is_synced else max(0.0, cfg.train.drop_prob - cfg.local_drop_delta)
    row_traits = {
        "baseline": {"drop_prob": cfg.train.drop_prob, "no_extra_cost": True, "no_comms": False},
        "merged": {"drop_prob": local_drop, "no_extra_cost": True, "no_comms": comm_free},
        "individual": {"drop_prob": local_drop, "no_extra_cost": True, "no_comms": comm_free},
        "ensemble": {"drop_prob": local_drop, "no_extra_cost": False, "no_comms": comm_free},
    }

    all_rows: List[Dict] = []
    for seed in cfg.seeds:
        baseline, local = run_pair(cfg, task, theta0, seed)
        write_metrics(baseline, run_dir / f"metrics-baseline-seed{seed}.csv", run_id=f"baseline-{seed}")
        write_metrics(local, run_dir / f"metrics-local-seed{seed}.csv", run_id=f"local-{seed}")
        _json_dump(
            {
                "baseline_merged": engine.params_to_json(baseline.merged),
                "local_merged": engine.params_to_json(local.merged),
                "local_workers": [engine.params_to_json(w) for w in local.workers],
            },
            run_dir / f"params-seed{seed}.json",
        )
        for row in comparison_rows(task, baseline, local):
            row["seed"] = seed
            row["epochs"] = cfg.train.epochs
            row.update(row_traits[row["model"]])
            all_rows.append(row)
        _write_side_tables(cfg, task, theta0, baseline, local, run_dir, seed)

    summary = _aggregate_rows(all_rows)
    report = {
        "config_hash": config_hash(cfg),
        "strategy": cfg.strategy.kind,
        "seeds": cfg.seeds,
        "rows": all_rows,
        "summary": summary,
    }
    _write_rows_csv(all_rows, run_dir / "summary.csv")
    _json_dump(canonical_config_dict(cfg), run_dir / "config.json")
    _json_dump(report, report_path)
    return report


def _write_side_tables(cfg, task, theta0, baseline, local, run_dir: Path, seed: int) -> None:
    if cfg.wise_ft:
        rows = []
        for alpha in cfg.wise_ft.alphas:
            for name, result in (("baseline", baseline), ("local", local)):
                interp = weightspace.wise_ft(theta0, result.merged, alpha)
                rows.append(
                    {
                        "alpha": alpha,
                        "model": name,
                        "acc_test_id": _predict(interp, task.test_id)[1],
                        "acc_test_ood": _predict(interp, task.test_ood)[1],
                    }
                )
        _write_rows_csv(rows, run_dir / f"wise-ft-seed{seed}.csv")
    if cfg.ema:
        rows = []
        for name, result in (("baseline", baseline), ("local", local)):
            for beta, variants in sorted(result.ema_finals.items()):
                for variant, params in sorted(variants.items()):
                    rows.append(
                        {
                            "beta": beta,
                            "model": name,
                            "trajectory": variant,
                            "acc_test_id": _predict(params, task.test_id)[1],
                            "acc_test_ood": _predict(params, task.test_ood)[1],
                        }
                    )
        _write_rows_csv(rows, run_dir / f"ema-seed{seed}.csv")


def _aggregate_rows(rows: List[Dict]) -> List[Dict]:
    """Mean and range per model across seeds."""
    by_model: Dict[str, List[Dict]] = {}
    for row in rows:
        by_model.setdefault(row["model"], []).append(row)
    out = []
    for model, group in by_model.items():
        entry = {"model": model, "num_seeds": len(group)}
        for key in ("acc_test_id", "acc_test_ood"):
            vals = [r[key] for r in group]
            entry[f"{key}_mean"] = float(np.mean(vals))
            entry[f"{key}_min"] = float(np.min(vals))
            entry[f"{key}_max"] = float(np.max(vals))
        out.append(entry)
    return out


def _write_rows_csv(rows: Sequence[Dict], path: Path) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    fields = list(rows[0].keys())
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# sweep verb


def sweep_experiment(cfg: ExperimentConfig, axis: str, force: bool = False) -> Dict:
    """One run per axis value, everything else held fixed; merged CSV output."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    field = "lam" if axis == "lambda" else axis
    values = getattr(cfg.sweep, field) if cfg.sweep else None
    if not values:
        raise ValueError(f"config has no sweep values for axis {axis!r}")

    out_root = Path(cfg.output_dir)
    sweep_dir = out_root / f"sweep-{axis}-{config_hash(cfg)}"
    report_path = sweep_dir / "report.json"
    if report_path.exists() and not force:
        return json.loads(report_path.read_text(encoding="utf-8"))
    sweep_dir.mkdir(parents=True, exist_ok=True)

    long_rows: List[Dict] = []
    if axis == "groups":
        for v in values:
            sub = cfg.model_copy(update={"topology": TopologyModel(num_devices=cfg.topology.num_devices, num_groups=int(v))})
            report = run_experiment(sub, force=force)
            _collect_axis_rows(long_rows, axis, v, report)
    elif axis == "epochs":
        for v in values:
            sub = cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": int(v)})})
            report = run_experiment(sub, force=force)
            _collect_axis_rows(long_rows, axis, v, report)
    elif axis == "lambda":
        base_report = run_experiment(cfg.model_copy(update={"diversity": None}), force=force)
        _collect_axis_rows(long_rows, axis, "none", base_report)
        for v in values:
            sub = cfg.model_copy(update={"diversity": DiversityModel(lam=float(v))})
            report = run_experiment(sub, force=force)
            _collect_axis_rows(long_rows, axis, v, report)
    elif axis == "ema_beta":
        sub = cfg.model_copy(update={"ema": EmaModel(betas=[float(v) for v in values])})
        run_experiment(sub, force=force)
        run_dir = out_root / f"run-{config_hash(sub)}"
        for seed in sub.seeds:
            for row in _read_rows_csv(run_dir / f"ema-seed{seed}.csv"):
                long_rows.append({"axis": axis, "value": row["beta"], "seed": seed, **row})
    elif axis == "wise_ft_alpha":
        sub = cfg.model_copy(update={"wise_ft": WiseFtModel(alphas=[float(v) for v in values])})
        run_experiment(sub, force=force)
        run_dir = out_root / f"run-{config_hash(sub)}"
        for seed in sub.seeds:
            for row in _read_rows_csv(run_dir / f"wise-ft-seed{seed}.csv"):
                long_rows.append({"axis": axis, "value": row["alpha"], "seed": seed, **row})
    else:  # nodes
        long_rows = _sweep_nodes(cfg, values, force)

    report = {"axis": axis, "values": [str(v) for v in values], "rows": long_rows}
    _write_rows_csv(long_rows, sweep_dir / "sweep_long.csv")
    _json_dump(report, report_path)
    return report


def _collect_axis_rows(long_rows: List[Dict], axis: str, value, report: Dict) -> None:
    for row in report["rows"]:
        long_rows.append({"axis": axis, "value": value, **row})


def _read_rows_csv(path: Path) -> List[Dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _sweep_nodes(cfg: ExperimentConfig, values: Sequence[int], force: bool) -> List[Dict]:
    """Scaling the worker count beyond the baseline's device count.

    Each extra block of `num_devices` workers is a fresh local run with a
    derived data-order seed, so a sweep value v = m * num_devices observes
    m times the baseline's data.  The data_factor column flags that.
    """
    base_n = cfg.topology.num_devices
    task = generate_task(cfg.task.to_spec())
    theta_pre = pretrained_params(cfg, task, Path(cfg.output_dir) / "cache")
    theta0 = finetune_init(cfg, task, theta_pre)
    topo = cfg.topology.to_topology()
    strategy = cfg.strategy.to_strategy()
    if isinstance(strategy, FullSync):
        raise ValueError("the nodes axis varies the local strategy; configure a non-full-sync strategy")

    baselines = {
        seed: engine.train(task, theta0, cfg.train.to_config(seed=seed), topo, FullSync(), execution=cfg.execution)
        for seed in cfg.seeds
    }
    rows: List[Dict] = []
    for v in values:
        if v % base_n != 0:
            raise ValueError(f"nodes value {v} must be a multiple of the baseline device count {base_n}")
        blocks = v // base_n
        for seed in cfg.seeds:
            baseline = baselines[seed]
            workers: List[ParamVector] = []
            for j in range(blocks):
                block_seed = engine.derive_seed(seed, j) if j > 0 else seed
                result = engine.train(
                    task, theta0, _local_train_config(cfg, block_seed), topo, strategy, execution=cfg.execution
                )
                workers.extend(result.workers)
            merged = weightspace.uniform_average(workers)
            for split_name, split in (("test_id", task.test_id), ("test_ood", task.test_ood)):
                rows.append(
                    {
                        "axis": "nodes",
                        "value": v,
                        "seed": seed,
                        "data_factor": blocks,
                        "split": split_name,
                        "acc_merged": _predict(merged, split)[1],
                        "acc_baseline": _predict(baseline.merged, split)[1],
                        "acc_individual_mean": float(np.mean([_predict(w, split)[1] for w in workers])),
                    }
                )
    return rows


# ---------------------------------------------------------------------------
# cost report verb


def cost_report(cost_config: Optional[Dict], out_dir: Path, force: bool = False) -> Dict:
    """Overhead and time-to-result grid for the cost model.

    `cost_config` may carry "profiles", "jitter", "iterations",
    "batch_factors", "nodes", "groups", "seed" and "queue_wait"; omitted
    pieces fall back to the shipped calibration profiles and defaults.
    """
    cost_config = cost_config or {}
    if "profiles" in cost_config:
        profiles = [costmodel.profile_from_dict(p) for p in cost_config["profiles"]]
    else:
        profiles = costmodel.calibration_profiles()
    jitter = costmodel.jitter_from_dict(cost_config.get("jitter", {"kind": "none"}))
    iterations = int(cost_config.get("iterations", 50))
    batch_factors = [float(f) for f in cost_config.get("batch_factors", [0.25, 0.5, 1.0, 2.0, 4.0])]
    nodes = int(cost_config.get("nodes", 4))
    groups = int(cost_config.get("groups", nodes))
    seed = int(cost_config.get("seed", 0))
    queue_wait = {int(k): v for k, v in cost_config.get("queue_wait", {}).items()}

    out_dir = Path(out_dir)
    report_path = out_dir / "costreport.json"
    if report_path.exists() and not force:
        return json.loads(report_path.read_text(encoding="utf-8"))
    out_dir.mkdir(parents=True, exist_ok=True)

    strategies: List[Tuple[str, CommStrategy]] = [
        ("full_sync", FullSync()),
        ("grouped_sync", GroupedSync()),
        ("independent", Independent()),
    ]
    full_topo = Topology.even(nodes, groups)
    group_size = nodes // groups
    rows = []
    for profile in profiles:
        for factor in batch_factors:
            scaled = profile.scale_compute(factor)
            t_single = costmodel.simulate_iteration(scaled, overlap=False, sync="none")
            for overlap in (False, True):
                t_cross = costmodel.simulate_iteration(scaled, overlap=overlap, sync="cross_node")
                for name, strat in strategies:
                    seconds = costmodel.simulate_run_time(
                        scaled, jitter, strat, iterations, seed, full_topo, overlap=overlap
                    )
                    # per-iteration overhead versus a single-node job: only
                    # scopes spanning several nodes pay cross-node traffic
                    scope_size = nodes if name == "full_sync" else group_size
                    t_iter = t_cross if scope_size > 1 else costmodel.simulate_iteration(scaled, overlap=overlap, sync="none")
                    over = costmodel.overhead_percent(t_iter, t_single)
                    row = {
                        "profile_id": profile.name,
                        "strategy": name,
                        "overlap": overlap,
                        "batch_factor": factor,
                        "seconds": seconds,
                        "overhead_percent": over,
                    }
                    if queue_wait:
                        est = costmodel.ScheduleEstimate(
                            queue_wait=queue_wait,
                            run_time=seconds,
                            nodes=nodes,
                            independent_groups=groups if name == "independent" else None,
                        )
                        row["time_to_result"] = costmodel.time_to_result(est)
                    else:
                        row["time_to_result"] = seconds
                    rows.append(row)

    summary_lines = []
    for profile in profiles:
        t_single = costmodel.simulate_iteration(profile, overlap=False, sync="none")
        no_overlap = costmodel.overhead_percent(costmodel.simulate_iteration(profile, False), t_single)
        with_overlap = costmodel.overhead_percent(costmodel.simulate_iteration(profile, True), t_single)
        summary_lines.append(
            f"{profile.name}: no-overlap overhead {no_overlap:.1f}%, overlap overhead {with_overlap:.1f}%"
        )
    report = {"rows": rows, "summary": summary_lines}
    _write_rows_csv(rows, out_dir / "costreport.csv")
    (out_dir / "costreport.txt").write_text("\n".join(summary_lines) + "\n", encoding="utf-8")
    _json_dump(report, report_path)
    return report


# ---------------------------------------------------------------------------
# verification verbs


def verify_equivalence(cfg: ExperimentConfig) -> Tuple[bool, List[Dict]]:
    """Bitwise cross-checks between synchronization implementations."""
    task = generate_task(cfg.task.to_spec())
    theta_pre = pretrained_params(cfg, task, Path(cfg.output_dir) / "cache")
    theta0 = finetune_init(cfg, task, theta_pre)
    seed = cfg.seeds[0]
    train_cfg = cfg.train.to_config(seed=seed)
    n = cfg.topology.num_devices
    k = cfg.topology.num_groups
    checks = []

    def check(name: str, a: RunResult, b: RunResult) -> None:
        checks.append({"check": name, "ok": run_results_equal(a, b)})

    flat = Topology.even(n, 1)
    check(
        "grouped_sync with one group matches full_sync",
        engine.train(task, theta0, train_cfg, flat, GroupedSync()),
        engine.train(task, theta0, train_cfg, flat, FullSync()),
    )
    check(
        "full_sync over n devices matches a single worker on the full batch",
        engine.train(task, theta0, train_cfg, flat, FullSync()),
        engine.train(task, theta0, train_cfg, Topology.even(1, 1), FullSync()),
    )
    grouped_topo = Topology.even(n, k)
    check(
        "grouped_sync matches independent runs at batch b/K",
        engine.train(task, theta0, train_cfg, grouped_topo, GroupedSync()),
        engine.train(task, theta0, train_cfg, grouped_topo, Independent()),
    )
    strategy = cfg.strategy.to_strategy()
    check(
        "sequential and threaded executions agree",
        engine.train(task, theta0, train_cfg, grouped_topo, strategy, execution="sequential"),
        engine.train(task, theta0, train_cfg, grouped_topo, strategy, execution="threads"),
    )
    return all(c["ok"] for c in checks), checks


def barrier_scan_report(cfg: ExperimentConfig, num_points: int = 21) -> Dict:
    """Interpolation scans between every pair of local workers on test data."""
    task = generate_task(cfg.task.to_spec())
    theta_pre = pretrained_params(cfg, task, Path(cfg.output_dir) / "cache")
    theta0 = finetune_init(cfg, task, theta_pre)
    strategy = cfg.strategy.to_strategy()
    if isinstance(strategy, FullSync):
        strategy = GroupedSync()
    local = engine.train(
        task, theta0, _local_train_config(cfg, cfg.seeds[0]), cfg.topology.to_topology(), strategy,
        execution=cfg.execution,
    )
    evaluator = dataset_evaluator(task.test_id)
    pairs = []
    points_rows = []
    for i in range(len(local.workers)):
        for j in range(i + 1, len(local.workers)):
            points = weightspace.barrier_scan(local.workers[i], local.workers[j], num_points, evaluator)
            pairs.append({"pair": f"{i}-{j}", "barrier": loss_barrier(points)})
            for pt in points:
                points_rows.append(
                    {"pair": f"{i}-{j}", "alpha": pt.alpha, "loss": pt.loss, "accuracy": pt.accuracy}
                )
    out_dir = Path(cfg.output_dir) / f"barrier-{config_hash(cfg)}"
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_rows_csv(points_rows, out_dir / "barrier_scan.csv")
    report = {"pairs": pairs, "num_points": num_points}
    _json_dump(report, out_dir / "report.json")
    return report
