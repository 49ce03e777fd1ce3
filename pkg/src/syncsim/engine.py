"""Distributed fine-tuning loop with pluggable synchronization strategies.

Four strategies are simulated over a device topology partitioned into
groups:

* ``FullSync``     - gradients averaged across every device each step.
* ``GroupedSync``  - gradients averaged only inside each group; groups
                     drift apart and are merged once at the end.
* ``Independent``  - each group is a standalone run on a 1/K-scale global
                     batch; equivalent to GroupedSync trajectory-for-
                     trajectory thanks to coordinated data seeds.
* ``LocalSGD(k)``  - per-group gradient steps with a global parameter
                     average every k steps.  Period 1 is full
                     synchronization and is canonicalized to ``FullSync``.

The averaged gradient of a sync scope is computed by evaluating the
mean-loss gradient over the scope's sub-batches concatenated in rank order.
That is arithmetically the mean of the per-device gradients (sub-batches
have equal size) and, because the data sharding hands rank r the r-th chunk
of every global batch, it makes "n devices, full sync" and "one device,
full batch" the same computation down to the bit.

Workers can execute sequentially or on a thread pool with a barrier at
each reduction; both schedules produce bit-identical results.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import diversity as diversity_mod
from . import weightspace
from .data import Batch, TaskBundle, shard_epoch
from .evalstats import accuracy
from .network import (
    EVAL,
    Mode,
    ParamVector,
    TrainMode,
    forward,
    loss_and_grad,
    same_layout,
)
from .reductions import batch_mean, exact_mean, scalar_mean

_MASK_STRIDE = 1000003


def derive_seed(*parts: int) -> int:
    """Fold integers into one deterministic 62-bit seed."""
    out = 0
    for p in parts:
        out = (out * _MASK_STRIDE + int(p) + 1) % (1 << 62)
    return out


# ---------------------------------------------------------------------------
# topology and strategies


@dataclass(frozen=True)
class Topology:
    """n devices partitioned into K groups (group_of maps device -> group)."""

    num_devices: int
    num_groups: int
    group_of: Tuple[int, ...]

    def __post_init__(self) -> None:
        n, k = self.num_devices, self.num_groups
        if n < 1 or not (1 <= k <= n):
            raise ValueError("need 1 <= num_groups <= num_devices")
        if len(self.group_of) != n:
            raise ValueError("group_of must assign every device")
        sizes = [0] * k
        for g in self.group_of:
            if not (0 <= g < k):
                raise ValueError("group index out of range")
            sizes[g] += 1
        if any(s == 0 for s in sizes):
            raise ValueError("every group must own at least one device")
        if n % k == 0 and len(set(sizes)) != 1:
            raise ValueError("group sizes must be equal when num_devices is divisible by num_groups")

    @classmethod
    def even(cls, num_devices: int, num_groups: int) -> "Topology":
        if num_devices % num_groups != 0:
            raise ValueError("even topology needs num_devices divisible by num_groups")
        per = num_devices // num_groups
        return cls(num_devices, num_groups, tuple(d // per for d in range(num_devices)))

    def members(self, group: int) -> List[int]:
        return [d for d in range(self.num_devices) if self.group_of[d] == group]


@dataclass(frozen=True)
class FullSync:
    pass


@dataclass(frozen=True)
class GroupedSync:
    pass


@dataclass(frozen=True)
class Independent:
    pass


@dataclass(frozen=True)
class LocalSGD:
    period: int

    def __post_init__(self) -> None:
        if self.period < 1:
            raise ValueError("local sgd period must be >= 1")


CommStrategy = Union[FullSync, GroupedSync, Independent, LocalSGD]


def strategy_name(strategy: CommStrategy) -> str:
    if isinstance(strategy, FullSync):
        return "full_sync"
    if isinstance(strategy, GroupedSync):
        return "grouped_sync"
    if isinstance(strategy, Independent):
        return "independent"
    return f"local_sgd({strategy.period})"


def parse_strategy(obj: Union[str, Dict]) -> CommStrategy:
    if isinstance(obj, str):
        obj = {"kind": obj}
    kind = obj.get("kind")
    if kind == "full_sync":
        return FullSync()
    if kind == "grouped_sync":
        return GroupedSync()
    if kind == "independent":
        return Independent()
    if kind == "local_sgd":
        return LocalSGD(int(obj.get("period", 1)))
    raise ValueError(f"unknown strategy kind: {kind!r}")


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class Sgd:
    pass


@dataclass(frozen=True)
class SgdMomentum:
    momentum: float = 0.9


@dataclass(frozen=True)
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


OptimizerSpec = Union[Sgd, SgdMomentum, AdamW]


def parse_optimizer(obj: Union[str, Dict]) -> OptimizerSpec:
    if isinstance(obj, str):
        obj = {"kind": obj}
    kind = obj.get("kind")
    if kind == "sgd":
        return Sgd()
    if kind == "sgd_momentum":
        return SgdMomentum(float(obj.get("momentum", 0.9)))
    if kind == "adamw":
        return AdamW(
            float(obj.get("beta1", 0.9)),
            float(obj.get("beta2", 0.999)),
            float(obj.get("eps", 1e-8)),
            float(obj.get("weight_decay", 0.0)),
        )
    raise ValueError(f"unknown optimizer kind: {kind!r}")


@dataclass
class OptState:
    velocity: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def copy(self) -> "OptState":
        return OptState(
            None if self.velocity is None else self.velocity.copy(),
            None if self.m is None else self.m.copy(),
            None if self.v is None else self.v.copy(),
            self.t,
        )


def init_opt_state(spec: OptimizerSpec, dim: int) -> OptState:
    if isinstance(spec, Sgd):
        return OptState()
    if isinstance(spec, SgdMomentum):
        return OptState(velocity=np.zeros(dim))
    return OptState(m=np.zeros(dim), v=np.zeros(dim))


def optimizer_update(spec: OptimizerSpec, state: OptState, values: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One optimizer step; mutates `state`, returns the new parameter values."""
    if isinstance(spec, Sgd):
        return values - lr * grad
    if isinstance(spec, SgdMomentum):
        state.velocity = spec.momentum * state.velocity + grad
        return values - lr * state.velocity
    state.t += 1
    state.m = spec.beta1 * state.m + (1.0 - spec.beta1) * grad
    state.v = spec.beta2 * state.v + (1.0 - spec.beta2) * (grad * grad)
    mhat = state.m / (1.0 - spec.beta1 ** state.t)
    vhat = state.v / (1.0 - spec.beta2 ** state.t)
    return values - lr * (mhat / (np.sqrt(vhat) + spec.eps) + spec.weight_decay * values)


# ---------------------------------------------------------------------------
# configuration and results


@dataclass(frozen=True)
class TrainConfig:
    lr_base: float
    epochs: int
    global_batch: int
    optimizer: OptimizerSpec = Sgd()
    drop_prob: float = 0.0
    lr_schedule: str = "cosine_per_iteration"
    seed: int = 0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.lr_base) and self.lr_base > 0):
            raise ValueError("lr_base must be positive and finite")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.global_batch < 1:
            raise ValueError("global_batch must be >= 1")
        if self.lr_schedule not in ("cosine_per_iteration", "constant"):
            raise ValueError(f"unknown lr schedule: {self.lr_schedule!r}")
        if not (0.0 <= self.drop_prob < 1.0):
            raise ValueError("drop_prob must lie in [0, 1)")


def cosine_lr(step: int, total_steps: int, lr_base: float) -> float:
    """Per-iteration cosine decay from lr_base at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= step <= total_steps):
        raise ValueError("step must lie in [0, total_steps]")
    return lr_base * (1.0 + np.cos(np.pi * step / total_steps)) / 2.0


def reduce_mean(grads: Sequence[ParamVector]) -> ParamVector:
    """Elementwise arithmetic mean of gradient vectors (canonical reduction)."""
    if len(grads) == 0:
        raise ValueError("nothing to reduce")
    for g in grads[1:]:
        if not same_layout(grads[0], g):
            raise ValueError("gradient layouts do not match")
    return ParamVector(exact_mean([g.values for g in grads]), grads[0].layout)


def params_to_json(params: ParamVector) -> Dict:
    """JSON-serializable form of a parameter vector (exact float round-trip)."""
    return {
        "segments": [[name, list(shape)] for name, shape in params.layout.segments],
        "values": params.values.tolist(),
    }


def params_from_json(obj: Dict) -> ParamVector:
    from .network import Layout

    layout = Layout(tuple((name, tuple(shape)) for name, shape in obj["segments"]))
    return ParamVector(np.array(obj["values"], dtype=np.float64), layout)


@dataclass
class MetricRecord:
    epoch: int
    worker: str
    split: str
    metric: str
    value: float


@dataclass
class RunResult:
    """Per-group final parameters, the merged model, and metric trajectories."""

    workers: List[ParamVector]
    merged: ParamVector
    metrics: List[MetricRecord]
    wall_steps: int
    examples_per_group: List[int]
    ema_finals: Dict[float, Dict[str, ParamVector]] = field(default_factory=dict)


def run_results_equal(a: RunResult, b: RunResult) -> bool:
    """Bitwise equality of two run results."""
    if len(a.workers) != len(b.workers) or a.wall_steps != b.wall_steps:
        return False
    if a.examples_per_group != b.examples_per_group:
        return False
    for wa, wb in zip(a.workers, b.workers):
        if not np.array_equal(wa.values, wb.values):
            return False
    if not np.array_equal(a.merged.values, b.merged.values):
        return False
    if len(a.metrics) != len(b.metrics):
        return False
    for ma, mb in zip(a.metrics, b.metrics):
        if (ma.epoch, ma.worker, ma.split, ma.metric) != (mb.epoch, mb.worker, mb.split, mb.metric):
            return False
        if ma.value != mb.value and not (np.isnan(ma.value) and np.isnan(mb.value)):
            return False
    return True


# ---------------------------------------------------------------------------
# worker state and the public single-step op


@dataclass
class WorkerState:
    params: ParamVector
    opt_spec: OptimizerSpec
    opt_state: OptState

    @classmethod
    def fresh(cls, init: ParamVector, opt_spec: OptimizerSpec) -> "WorkerState":
        return cls(init.copy(), opt_spec, init_opt_state(opt_spec, len(init)))

    def copy(self) -> "WorkerState":
        return WorkerState(self.params.copy(), self.opt_spec, self.opt_state.copy())


def local_step(state: WorkerState, batch: Batch, lr: float, mode: Mode = EVAL) -> WorkerState:
    """One optimizer step on `batch`; returns the successor state.

    A non-finite gradient aborts with a RuntimeError rather than silently
    corrupting the trajectory.
    """
    loss, grad = loss_and_grad(state.params, batch.inputs, batch.labels, mode)
    new = state.copy()
    new.params.values = optimizer_update(new.opt_spec, new.opt_state, new.params.values, grad.values, lr)
    return new


# ---------------------------------------------------------------------------
# the training loop


def _concat_batches(batches: Sequence[Batch]) -> Batch:
    if len(batches) == 1:
        return batches[0]
    return Batch(
        np.concatenate([b.inputs for b in batches], axis=0),
        np.concatenate([b.labels for b in batches], axis=0),
    )


def _scope_grad(params: ParamVector, batch: Batch, mode: Mode) -> Tuple[float, ParamVector]:
    return loss_and_grad(params, batch.inputs, batch.labels, mode)


def train(
    task: TaskBundle,
    init: ParamVector,
    config: TrainConfig,
    topology: Topology,
    strategy: CommStrategy,
    *,
    diversity: Optional[diversity_mod.DiversityConfig] = None,
    ema_betas: Sequence[float] = (),
    execution: str = "sequential",
    eval_each_epoch: bool = True,
    train_split: Optional[Batch] = None,
) -> RunResult:
    """Run the full fine-tuning loop and return per-group models plus metrics.

    `train_split` overrides the bundle's fine-tuning split (used for the
    pretraining phase); evaluation always uses the bundle's test splits.
    """
    if execution not in ("sequential", "threads"):
        raise ValueError(f"unknown execution mode: {execution!r}")
    if isinstance(strategy, LocalSGD) and strategy.period == 1:
        strategy = FullSync()  # period-1 local sgd is full synchronization

    n, k = topology.num_devices, topology.num_groups
    b = config.global_batch
    data = train_split if train_split is not None else task.finetune_train
    if b % n != 0:
        raise ValueError("global batch must divide evenly across devices")
    if isinstance(strategy, Independent) and b % k != 0:
        raise ValueError("independent runs need the global batch divisible by the group count")
    if b > data.size:
        raise ValueError("global batch exceeds the training split")

    group_level = isinstance(strategy, Independent)
    if diversity is not None:
        diversity.check_pairing(k)
        if isinstance(strategy, FullSync):
            raise ValueError("diversity regularization needs at least two non-synchronized groups")

    # units are the stateful workers: one per device, or one per group for
    # fully independent runs (devices inside a group are provably identical)
    num_units = k if group_level else n
    states = [WorkerState.fresh(init, config.optimizer) for _ in range(num_units)]
    if group_level:
        scopes = [(g, [g]) for g in range(k)]
        group_rep = list(range(k))
    else:
        scopes = [(0, list(range(n)))] if isinstance(strategy, FullSync) else [
            (g, topology.members(g)) for g in range(k)
        ]
        group_rep = [topology.members(g)[0] for g in range(k)]

    steps_per_epoch = data.size // b
    if steps_per_epoch < 1:
        raise ValueError("not enough data for a single step")
    total_steps = config.epochs * steps_per_epoch

    metrics: List[MetricRecord] = []
    examples_per_group = [0] * k
    ema_track: Dict[float, Dict[str, weightspace.EmaState]] = {
        float(beta): {
            "worker0": weightspace.ema_init(float(beta), init.layout),
            "merged": weightspace.ema_init(float(beta), init.layout),
        }
        for beta in ema_betas
    }

    pool = ThreadPoolExecutor(max_workers=len(scopes)) if execution == "threads" else None
    try:
        global_step = 0
        for epoch in range(config.epochs):
            if group_level:
                streams = [shard_epoch(data, epoch, g, k, b // k, config.seed) for g in range(k)]
            else:
                streams = [shard_epoch(data, epoch, r, n, b // n, config.seed) for r in range(n)]
            epoch_losses: List[List[float]] = [[] for _ in range(k)]

            for t in range(steps_per_epoch):
                if config.lr_schedule == "cosine_per_iteration":
                    lr = cosine_lr(global_step, total_steps, config.lr_base)
                else:
                    lr = config.lr_base

                jobs = []
                for scope_idx, members in scopes:
                    batch = _concat_batches([streams[u][t] for u in members])
                    mode = TrainMode(config.drop_prob, derive_seed(config.seed, epoch, t, scope_idx))
                    jobs.append((scope_idx, members, batch, mode))

                try:
                    if diversity is not None:
                        results = _paired_step(jobs, states, diversity, config.seed, epoch, t, pool)
                    elif pool is not None:
                        futures = [pool.submit(_scope_grad, states[m[1][0]].params, m[2], m[3]) for m in jobs]
                        results = [f.result() for f in futures]
                    else:
                        results = [_scope_grad(states[m[1][0]].params, m[2], m[3]) for m in jobs]
                except RuntimeError as exc:
                    raise RuntimeError(f"epoch {epoch} step {t}: {exc}") from exc

                for (scope_idx, members, batch, _), (loss, grad) in zip(jobs, results):
                    for u in members:
                        st = states[u]
                        st.params.values = optimizer_update(st.opt_spec, st.opt_state, st.params.values, grad.values, lr)
                    if isinstance(strategy, FullSync):
                        # every group observed its share of the global batch
                        for g in range(k):
                            examples_per_group[g] += sum(streams[u][t].size for u in topology.members(g))
                            epoch_losses[g].append(loss)
                    else:
                        examples_per_group[scope_idx] += batch.size
                        epoch_losses[scope_idx].append(loss)

                global_step += 1
                if isinstance(strategy, LocalSGD) and global_step % strategy.period == 0:
                    synced = exact_mean([st.params.values for st in states])
                    for st in states:
                        st.params.values = synced.copy()

                _assert_group_consistency(states, topology, strategy, group_level)

                if ema_track:
                    rep_values = [states[group_rep[g]].params.values for g in range(k)]
                    merged_now = init.with_values(batch_mean(np.stack(rep_values)))
                    worker0 = init.with_values(rep_values[0])
                    for variants in ema_track.values():
                        variants["worker0"] = weightspace.ema_update(variants["worker0"], worker0)
                        variants["merged"] = weightspace.ema_update(variants["merged"], merged_now)

            if eval_each_epoch:
                reps = [states[group_rep[g]].params for g in range(k)]
                _record_epoch_metrics(metrics, epoch, reps, epoch_losses, task)

        final_reps = [states[group_rep[g]].params.copy() for g in range(k)]
        merged = weightspace.uniform_average(final_reps)
        ema_finals = {
            beta: {name: weightspace.ema_debias(st) for name, st in variants.items()}
            for beta, variants in ema_track.items()
            if variants["worker0"].steps > 0
        }
        return RunResult(final_reps, merged, metrics, total_steps, examples_per_group, ema_finals)
    finally:
        if pool is not None:
            pool.shutdown()


def _paired_step(jobs, states, diversity, seed, epoch, t, pool):
    """Gradient computation for paired-group diversity training."""
    by_scope = {scope_idx: (members, batch, mode) for scope_idx, members, batch, mode in jobs}
    results: Dict[int, Tuple[float, ParamVector]] = {}
    tasks = []
    for g, partner in diversity.pairs():
        members_g, batch_g, mode_g = by_scope[g]
        members_h, batch_h, mode_h = by_scope[partner]
        mixed = diversity_mod.mix_batches(
            batch_g, batch_h, derive_seed(seed, epoch, t, min(g, partner)), beta_a=diversity.beta_a
        )
        tasks.append((g, partner, states[members_g[0]].params, states[members_h[0]].params, mixed, mode_g, mode_h))

    def run(task_tuple):
        g, h, pa, pb, mixed, mode_a, mode_b = task_tuple
        return diversity_mod.paired_grads(pa, pb, mixed, diversity.lam, mode_a, mode_b)

    outs = list(pool.map(run, tasks)) if pool is not None else [run(x) for x in tasks]
    for (g, h, *_), (loss_a, grad_a, loss_b, grad_b) in zip(tasks, outs):
        results[g] = (loss_a, grad_a)
        results[h] = (loss_b, grad_b)
    return [results[scope_idx] for scope_idx, _, _, _ in jobs]


def _assert_group_consistency(states, topology: Topology, strategy: CommStrategy, group_level: bool) -> None:
    if group_level:
        return
    if isinstance(strategy, FullSync):
        groups = [list(range(topology.num_devices))]
    else:
        groups = [topology.members(g) for g in range(topology.num_groups)]
    for members in groups:
        first = states[members[0]].params.values
        for u in members[1:]:
            if not np.array_equal(first, states[u].params.values):
                raise AssertionError("devices inside one sync scope diverged")


def _record_epoch_metrics(metrics, epoch, reps, epoch_losses, task: TaskBundle) -> None:
    for g, rep in enumerate(reps):
        metrics.append(MetricRecord(epoch, str(g), "train", "loss", scalar_mean(epoch_losses[g])))
        metrics.append(MetricRecord(epoch, str(g), "test_id", "accuracy", accuracy(forward(rep, task.test_id.inputs), task.test_id.labels)))
        metrics.append(MetricRecord(epoch, str(g), "test_ood", "accuracy", accuracy(forward(rep, task.test_ood.inputs), task.test_ood.labels)))
    merged = weightspace.uniform_average(reps)
    metrics.append(MetricRecord(epoch, "merged", "test_id", "accuracy", accuracy(forward(merged, task.test_id.inputs), task.test_id.labels)))
    metrics.append(MetricRecord(epoch, "merged", "test_ood", "accuracy", accuracy(forward(merged, task.test_ood.inputs), task.test_ood.labels)))
    ens_id = weightspace.ensemble_predict(reps, task.test_id.inputs)
    ens_ood = weightspace.ensemble_predict(reps, task.test_ood.inputs)
    metrics.append(MetricRecord(epoch, "ensemble", "test_id", "accuracy", accuracy(ens_id, task.test_id.labels)))
    metrics.append(MetricRecord(epoch, "ensemble", "test_ood", "accuracy", accuracy(ens_ood, task.test_ood.labels)))
