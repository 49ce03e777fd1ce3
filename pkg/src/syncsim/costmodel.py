"""Discrete-event timing model for one training iteration and whole runs.

Two resources are simulated per sync scope: a compute stream that runs the
backward pass layer by layer (last layer first), and a network stream that
sends gradient buckets FIFO.  With overlap enabled, a bucket becomes
eligible as soon as the backward of all its layers is done, so its transfer
hides behind the remaining compute; without overlap everything serializes.

Run-level timing composes jittered per-iteration times according to the
synchronization strategy: lock-step strategies pay the max over their sync
scope every iteration, independent groups only pay their own slowdowns plus
one final reduction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import CommStrategy, FullSync, LocalSGD, Topology


@dataclass(frozen=True)
class LayerCost:
    backward_time: float
    gradient_bytes: float

    def __post_init__(self) -> None:
        if self.backward_time < 0 or self.gradient_bytes < 0:
            raise ValueError("layer costs must be nonnegative")


@dataclass(frozen=True)
class CostProfile:
    """Per-layer compute/communication costs plus interconnect parameters.

    ``layers`` is in forward order; the backward pass walks it in reverse.
    ``bucket_bytes`` of None buckets one layer per message.
    """

    name: str
    layers: Tuple[LayerCost, ...]
    forward_time: float
    bandwidth: float
    latency_per_message: float
    bucket_bytes: Optional[float] = None

    def __post_init__(self) -> None:
        if len(self.layers) == 0:
            raise ValueError("profile needs at least one layer")
        if self.forward_time < 0:
            raise ValueError("forward_time must be nonnegative")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.latency_per_message < 0:
            raise ValueError("latency must be nonnegative")
        if self.bucket_bytes is not None and self.bucket_bytes <= 0:
            raise ValueError("bucket_bytes must be positive when given")

    @property
    def total_backward(self) -> float:
        return float(sum(l.backward_time for l in self.layers))

    @property
    def total_bytes(self) -> float:
        return float(sum(l.gradient_bytes for l in self.layers))

    def scale_compute(self, factor: float) -> "CostProfile":
        """Scale compute times by a batch-size factor; gradient bytes are batch-independent."""
        if factor <= 0:
            raise ValueError("batch factor must be positive")
        layers = tuple(LayerCost(l.backward_time * factor, l.gradient_bytes) for l in self.layers)
        return CostProfile(self.name, layers, self.forward_time * factor, self.bandwidth, self.latency_per_message, self.bucket_bytes)

    def message_time(self, num_bytes: float) -> float:
        return self.latency_per_message + num_bytes / self.bandwidth

    def buckets(self) -> List[Tuple[int, float]]:
        """Buckets in backward order: (number of layers, total bytes) each.

        Contiguous layers are packed greedily up to bucket_bytes; a single
        oversized layer still gets its own bucket.
        """
        out: List[Tuple[int, float]] = []
        count, size = 0, 0.0
        for layer in reversed(self.layers):
            if count > 0 and self.bucket_bytes is not None and size + layer.gradient_bytes > self.bucket_bytes:
                out.append((count, size))
                count, size = 0, 0.0
            count += 1
            size += layer.gradient_bytes
            if self.bucket_bytes is None:
                out.append((count, size))
                count, size = 0, 0.0
        if count > 0:
            out.append((count, size))
        return out


@dataclass(frozen=True)
class JitterSpec:
    """Per-node per-iteration slowdown factors (always >= 1).

    kinds: "none", "lognormal" (exp of a N(mu, sigma) draw, clamped below
    at 1), and "fixed_straggler" (one node always runs `factor` times
    slower).
    """

    kind: str = "none"
    mu: float = 0.0
    sigma: float = 0.0
    node: int = 0
    factor: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("none", "lognormal", "fixed_straggler"):
            raise ValueError(f"unknown jitter kind: {self.kind!r}")
        if self.kind == "fixed_straggler" and self.factor < 1.0:
            raise ValueError("straggler slowdown factor must be >= 1")

    def factors(self, num_nodes: int, iterations: int, seed: int) -> np.ndarray:
        if self.kind == "none":
            return np.ones((num_nodes, iterations))
        if self.kind == "fixed_straggler":
            if not (0 <= self.node < num_nodes):
                raise ValueError("straggler node index out of range")
            out = np.ones((num_nodes, iterations))
            out[self.node, :] = self.factor
            return out
        rng = np.random.default_rng(np.random.SeedSequence([0x6A, seed]))
        draws = np.exp(rng.normal(self.mu, self.sigma, size=(num_nodes, iterations)))
        return np.maximum(draws, 1.0)


def simulate_iteration(profile: CostProfile, overlap: bool, sync: str = "cross_node") -> float:
    """Seconds for one iteration on one sync scope.

    sync "none" is the compute-only time (forward plus backward); with
    cross-node sync the bucketed gradient transfers either serialize after
    the backward pass or, with overlap, run concurrently with it.
    """
    if sync not in ("cross_node", "none"):
        raise ValueError(f"unknown sync setting: {sync!r}")
    compute_end = profile.forward_time + profile.total_backward
    if sync == "none":
        return compute_end
    comm_times = [profile.message_time(size) for _, size in profile.buckets()]
    if not overlap:
        return compute_end + sum(comm_times)
    backward = [l.backward_time for l in reversed(profile.layers)]
    t_compute = profile.forward_time
    layer_idx = 0
    net_free = 0.0
    for (num_layers, _), comm in zip(profile.buckets(), comm_times):
        for _ in range(num_layers):
            t_compute += backward[layer_idx]
            layer_idx += 1
        start = max(t_compute, net_free)
        net_free = start + comm
    return max(compute_end, net_free)


def overhead_percent(t_multi: float, t_single: float) -> float:
    """Relative wall-clock cost of the multi-node job versus the single-node one."""
    if t_single <= 0:
        raise ValueError("single-node time must be positive")
    return 100.0 * (t_multi - t_single) / t_single


def _per_iteration_time(profile: CostProfile, overlap: bool, scope_size: int) -> float:
    sync = "cross_node" if scope_size > 1 else "none"
    return simulate_iteration(profile, overlap, sync)


def final_reduce_time(profile: CostProfile) -> float:
    """One whole-model transfer: the single end-of-run parameter average."""
    return profile.message_time(profile.total_bytes)


def simulate_run_time(
    profile: CostProfile,
    jitter: JitterSpec,
    strategy: CommStrategy,
    iterations: int,
    seed: int,
    topology: Topology,
    overlap: bool = True,
) -> float:
    """Total seconds for a run of `iterations` steps under a strategy.

    Full sync pays the max jittered iteration over all nodes every step.
    Grouped/independent runs only synchronize within their group, so the
    total is the max over groups of each group's own sum, plus one final
    parameter reduction when there is more than one group.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if isinstance(strategy, LocalSGD):
        raise ValueError("run-time model covers full_sync, grouped_sync and independent strategies")
    n = topology.num_devices
    factors = jitter.factors(n, iterations, seed)

    if isinstance(strategy, FullSync):
        base = _per_iteration_time(profile, overlap, n)
        return float(np.sum(np.max(factors * base, axis=0)))

    group_totals = []
    for g in range(topology.num_groups):
        members = topology.members(g)
        base = _per_iteration_time(profile, overlap, len(members))
        per_iter = np.max(factors[members, :] * base, axis=0)
        group_totals.append(float(np.sum(per_iter)))
    total = max(group_totals)
    if topology.num_groups > 1:
        total += final_reduce_time(profile)
    return total


@dataclass(frozen=True)
class ScheduleEstimate:
    """Queue wait plus run time for a job shape.

    `queue_wait` maps node count to either a single wait or a list of
    sampled waits.  For an independent-groups job every group is scheduled
    on `nodes // groups` nodes by itself; with sampled waits the job is
    gated by the slowest group (max over the first `groups` samples,
    cycling if fewer are provided).
    """

    queue_wait: Dict[int, Union[float, Tuple[float, ...]]]
    run_time: float
    nodes: int
    independent_groups: Optional[int] = None

    def __post_init__(self) -> None:
        if self.run_time < 0 or self.nodes < 1:
            raise ValueError("run_time must be nonnegative and nodes >= 1")
        if self.independent_groups is not None:
            if self.independent_groups < 1 or self.nodes % self.independent_groups != 0:
                raise ValueError("independent_groups must divide nodes")


def _wait_entry(estimate: ScheduleEstimate, nodes: int) -> Union[float, Tuple[float, ...]]:
    if nodes not in estimate.queue_wait:
        raise KeyError(f"queue wait table has no entry for {nodes} nodes")
    return estimate.queue_wait[nodes]


def time_to_result(estimate: ScheduleEstimate) -> float:
    """Queue-wait-inclusive wall time until the job's result exists."""
    if estimate.independent_groups is None:
        entry = _wait_entry(estimate, estimate.nodes)
        wait = entry[0] if isinstance(entry, tuple) else float(entry)
    else:
        groups = estimate.independent_groups
        entry = _wait_entry(estimate, estimate.nodes // groups)
        if isinstance(entry, tuple):
            samples = [entry[i % len(entry)] for i in range(groups)]
            wait = max(samples)
        else:
            wait = float(entry)  # identical waits, the max is that wait
    return wait + estimate.run_time


# ---------------------------------------------------------------------------
# serialization and shipped calibration profiles


def profile_from_dict(obj: Dict) -> CostProfile:
    layers = tuple(LayerCost(float(l[0]), float(l[1])) for l in obj["layers"])
    return CostProfile(
        name=str(obj.get("name", "profile")),
        layers=layers,
        forward_time=float(obj["forward_time"]),
        bandwidth=float(obj["bandwidth"]),
        latency_per_message=float(obj["latency_per_message"]),
        bucket_bytes=(float(obj["bucket_bytes"]) if obj.get("bucket_bytes") is not None else None),
    )


def profile_to_dict(profile: CostProfile) -> Dict:
    return {
        "name": profile.name,
        "layers": [[l.backward_time, l.gradient_bytes] for l in profile.layers],
        "forward_time": profile.forward_time,
        "bandwidth": profile.bandwidth,
        "latency_per_message": profile.latency_per_message,
        "bucket_bytes": profile.bucket_bytes,
    }


def jitter_from_dict(obj: Dict) -> JitterSpec:
    return JitterSpec(
        kind=str(obj.get("kind", "none")),
        mu=float(obj.get("mu", 0.0)),
        sigma=float(obj.get("sigma", 0.0)),
        node=int(obj.get("node", 0)),
        factor=float(obj.get("factor", 1.0)),
    )


def load_profiles(path: Path) -> Tuple[List[CostProfile], JitterSpec, Dict]:
    """Read a cost-model JSON file: profiles, optional jitter, extra knobs."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    profiles = [profile_from_dict(p) for p in obj["profiles"]]
    jitter = jitter_from_dict(obj.get("jitter", {"kind": "none"}))
    return profiles, jitter, obj


_GBPS = 1e9 / 8  # bytes per second per Gbit


def calibration_profiles() -> List[CostProfile]:
    """Synthetic transformer-ish profiles spanning small to very deep models.

    Per-layer compute and gradient sizes are chosen so that turning
    overlap off costs roughly 25-55% when moving from one node to four,
    while overlapped communication hides almost entirely on the deeper
    profiles.  These numbers describe the model, not any particular
    hardware.
    """
    specs = [
        # name, layers, per-layer backward s, per-layer grad MB
        ("depth12-base", 12, 0.0080, 290.0),
        ("depth24-large", 24, 0.0080, 240.0),
        ("depth32-huge", 32, 0.0080, 215.0),
        ("depth48-giant", 48, 0.0080, 190.0),
    ]
    bandwidth = 400.0 * _GBPS
    out = []
    for name, depth, bwd, grad_mb in specs:
        layers = tuple(LayerCost(bwd, grad_mb * 1e6) for _ in range(depth))
        out.append(
            CostProfile(
                name=name,
                layers=layers,
                forward_time=0.5 * depth * bwd,
                bandwidth=bandwidth,
                latency_per_message=2e-4,
                bucket_bytes=None,
            )
        )
    return out
