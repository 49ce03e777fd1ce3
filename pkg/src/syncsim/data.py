"""Synthetic classification tasks and coordinated-seed data sharding.

Tasks are class-conditional Gaussian clusters.  The pretraining split draws
from a label space twice as large as the fine-tuning split, and the
fine-tuning classes are an indexed subset of it, so a pretrained classifier
head can be carried over by row mapping.

`shard_epoch` gives every rank its slice of a single seed-determined global
permutation without any cross-rank communication.  Rank r takes the r-th
contiguous chunk of each global batch, so concatenating the rank streams in
rank order reproduces the single-worker batch stream exactly, order
included.  That identity is what the engine's synchronization-equivalence
guarantees stand on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

_MEANS_TAG = 0x11
_SPLIT_TAGS = {"pretrain": 0x21, "finetune_train": 0x22, "test_id": 0x23}
_NOISE_TAG = 0x31
_PERM_TAG = 0x41


@dataclass(frozen=True)
class ShiftSpec:
    """Deterministic input transform used to build the shifted test split.

    kind "rotation" rotates the (0, 1) coordinate plane by `magnitude`
    radians, "noise" adds Gaussian noise with std `magnitude` (seeded), and
    "scale" multiplies inputs by 1 + `magnitude`.  Magnitude zero is the
    identity for every kind.
    """

    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("rotation", "noise", "scale"):
            raise ValueError(f"unknown shift kind: {self.kind!r}")
        if not np.isfinite(self.magnitude):
            raise ValueError("shift magnitude must be finite")


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int
    input_dim: int
    cluster_spread: float
    pretrain_size: int
    finetune_size: int
    test_size: int
    shift: ShiftSpec
    seed: int

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2 (the shift plane needs two coordinates)")
        if self.cluster_spread <= 0:
            raise ValueError("cluster_spread must be positive")
        for name in ("pretrain_size", "finetune_size", "test_size"):
            if getattr(self, name) < self.num_classes:
                raise ValueError(f"{name} must be >= num_classes")


@dataclass
class Batch:
    """A matrix of examples with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be 2-D")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels must align with input rows")
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one example")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class TaskBundle:
    pretrain: Batch
    finetune_train: Batch
    test_id: Batch
    test_ood: Batch
    label_map: Tuple[int, ...]      # fine-tune label -> pretraining label
    num_pretrain_classes: int
    spec: TaskSpec


def apply_shift(inputs: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] < 2:
        raise ValueError("inputs must be 2-D with at least two columns")
    if shift.kind == "rotation":
        theta = shift.magnitude
        out = inputs.copy()
        c, s = np.cos(theta), np.sin(theta)
        out[:, 0] = c * inputs[:, 0] - s * inputs[:, 1]
        out[:, 1] = s * inputs[:, 0] + c * inputs[:, 1]
        return out
    if shift.kind == "noise":
        rng = np.random.default_rng(np.random.SeedSequence([_NOISE_TAG, shift.seed]))
        return inputs + shift.magnitude * rng.normal(size=inputs.shape)
    # scale
    return inputs * (1.0 + shift.magnitude)


def _sample_split(means: np.ndarray, labels: np.ndarray, spread: float, rng: np.random.Generator) -> Batch:
    noise = rng.normal(size=(labels.shape[0], means.shape[1]))
    return Batch(means[labels] + spread * noise, labels)


def _balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % num_classes
    return labels[rng.permutation(n)]


def generate_task(spec: TaskSpec) -> TaskBundle:
    """Build all four splits deterministically from the spec seed.

    The shifted test split is the in-distribution test split with the
    configured transform applied to its inputs; labels are untouched.
    """
    num_pre = 2 * spec.num_classes
    means_rng = np.random.default_rng(np.random.SeedSequence([_MEANS_TAG, spec.seed]))
    means = means_rng.normal(size=(num_pre, spec.input_dim))
    label_map = tuple(2 * c for c in range(spec.num_classes))

    def split_rng(name: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([_SPLIT_TAGS[name], spec.seed]))

    rng = split_rng("pretrain")
    pretrain = _sample_split(means, _balanced_labels(spec.pretrain_size, num_pre, rng), spec.cluster_spread, rng)

    ft_means = means[np.array(label_map)]
    rng = split_rng("finetune_train")
    finetune = _sample_split(ft_means, _balanced_labels(spec.finetune_size, spec.num_classes, rng), spec.cluster_spread, rng)

    rng = split_rng("test_id")
    test_id = _sample_split(ft_means, _balanced_labels(spec.test_size, spec.num_classes, rng), spec.cluster_spread, rng)
    test_ood = Batch(apply_shift(test_id.inputs, spec.shift), test_id.labels.copy())

    return TaskBundle(pretrain, finetune, test_id, test_ood, label_map, num_pre, spec)


def shard_epoch(
    dataset: Batch, epoch: int, rank: int, world_size: int, batch_size: int, seed: int
) -> List[Batch]:
    """Rank `rank`'s ordered batches for one epoch.

    All ranks derive the same global permutation from (seed, epoch); rank r
    owns the r-th chunk of size `batch_size` inside every global step of
    size `batch_size * world_size`.  The permutation is truncated to whole
    global steps, so the rank streams of one epoch partition it exactly.
    """
    if not (0 <= rank < world_size):
        raise ValueError(f"rank {rank} out of range for world size {world_size}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset.size
    global_step = batch_size * world_size
    if global_step > n:
        raise ValueError(f"batch_size * world_size = {global_step} exceeds dataset size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([_PERM_TAG, seed, epoch]))
    perm = rng.permutation(n)
    steps = n // global_step
    batches = []
    for t in range(steps):
        start = t * global_step + rank * batch_size
        batches.append(dataset.take(perm[start : start + batch_size]))
    return batches


def _batch_to_json(batch: Batch) -> Dict:
    return {"inputs": batch.inputs.tolist(), "labels": batch.labels.tolist()}


def _batch_from_json(obj: Dict) -> Batch:
    return Batch(np.array(obj["inputs"], dtype=np.float64), np.array(obj["labels"], dtype=np.int64))


def bundle_to_json(bundle: TaskBundle) -> Dict:
    spec = bundle.spec
    return {
        "spec": {
            "num_classes": spec.num_classes,
            "input_dim": spec.input_dim,
            "cluster_spread": spec.cluster_spread,
            "pretrain_size": spec.pretrain_size,
            "finetune_size": spec.finetune_size,
            "test_size": spec.test_size,
            "shift": {"kind": spec.shift.kind, "magnitude": spec.shift.magnitude, "seed": spec.shift.seed},
            "seed": spec.seed,
        },
        "label_map": list(bundle.label_map),
        "num_pretrain_classes": bundle.num_pretrain_classes,
        "splits": {
            "pretrain": _batch_to_json(bundle.pretrain),
            "finetune_train": _batch_to_json(bundle.finetune_train),
            "test_id": _batch_to_json(bundle.test_id),
            "test_ood": _batch_to_json(bundle.test_ood),
        },
    }


def bundle_from_json(obj: Dict) -> TaskBundle:
    s = obj["spec"]
    spec = TaskSpec(
        num_classes=s["num_classes"],
        input_dim=s["input_dim"],
        cluster_spread=s["cluster_spread"],
        pretrain_size=s["pretrain_size"],
        finetune_size=s["finetune_size"],
        test_size=s["test_size"],
        shift=ShiftSpec(**s["shift"]),
        seed=s["seed"],
    )
    splits = obj["splits"]
    return TaskBundle(
        pretrain=_batch_from_json(splits["pretrain"]),
        finetune_train=_batch_from_json(splits["finetune_train"]),
        test_id=_batch_from_json(splits["test_id"]),
        test_ood=_batch_from_json(splits["test_ood"]),
        label_map=tuple(obj["label_map"]),
        num_pretrain_classes=obj["num_pretrain_classes"],
        spec=spec,
    )


def save_bundle(bundle: TaskBundle, path: Path) -> None:
    Path(path).write_text(json.dumps(bundle_to_json(bundle), sort_keys=True), encoding="utf-8")


def load_bundle(path: Path) -> TaskBundle:
    return bundle_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
