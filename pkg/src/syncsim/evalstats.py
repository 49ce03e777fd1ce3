"""Accuracy, the exact McNemar paired test, and metric serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from math import comb
from pathlib import Path
from typing import TYPE_CHECKING, List, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .engine import RunResult


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label; ties go to the lowest class."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("logits must be 2-D with one label per row")
    preds = np.argmax(logits, axis=1)  # first maximum, i.e. lowest index
    return int(np.count_nonzero(preds == labels)) / logits.shape[0]


@dataclass(frozen=True)
class PairedOutcome:
    """Contingency counts for two classifiers on the same examples."""

    n00: int
    n01: int  # A wrong, B right
    n10: int  # A right, B wrong
    n11: int

    def __post_init__(self) -> None:
        if min(self.n00, self.n01, self.n10, self.n11) < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.n00 + self.n01 + self.n10 + self.n11

    @classmethod
    def from_predictions(cls, preds_a: np.ndarray, preds_b: np.ndarray, labels: np.ndarray) -> "PairedOutcome":
        preds_a, preds_b, labels = (np.asarray(x) for x in (preds_a, preds_b, labels))
        if not (preds_a.shape == preds_b.shape == labels.shape):
            raise ValueError("prediction and label vectors must align")
        a_right = preds_a == labels
        b_right = preds_b == labels
        return cls(
            int(np.count_nonzero(~a_right & ~b_right)),
            int(np.count_nonzero(~a_right & b_right)),
            int(np.count_nonzero(a_right & ~b_right)),
            int(np.count_nonzero(a_right & b_right)),
        )


def mcnemar_exact(outcome: PairedOutcome) -> Tuple[float, int]:
    """Exact two-sided binomial test on the discordant pairs.

    Under the null the discordant flips are fair coin tosses, so
    p = min(1, 2 * P[X >= max(n01, n10)]) for X ~ Binomial(n01+n10, 1/2),
    computed with integer arithmetic.  No discordance gives p = 1.
    """
    m = outcome.n01 + outcome.n10
    if m == 0:
        return 1.0, 0
    k = max(outcome.n01, outcome.n10)
    tail = sum(comb(m, j) for j in range(k, m + 1))
    p = min(Fraction(1), 2 * Fraction(tail, 2**m))
    return float(p), m


METRIC_COLUMNS = ("run_id", "epoch", "worker_id", "split", "metric", "value")


def write_metric_rows(rows: Sequence[Tuple[str, int, str, str, str, float]], path: Path) -> None:
    """Write metric rows as CSV with a stable column order and LF endings.

    Values are rendered with `repr`, which round-trips float64 exactly, so
    rereading the file reproduces every value bit for bit.
    """
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            for run_id, epoch, worker, split, metric, value in rows:
                writer.writerow([run_id, epoch, worker, split, metric, repr(float(value))])
    except OSError as exc:
        raise OSError(f"failed writing metrics to {path}: {exc}") from exc


def write_metrics(result: "RunResult", path: Path, run_id: str = "run") -> None:
    """Serialize a run's metric trajectory to CSV."""
    rows = [(run_id, m.epoch, m.worker, m.split, m.metric, m.value) for m in result.metrics]
    write_metric_rows(rows, path)


def read_metric_rows(path: Path) -> List[Tuple[str, int, str, str, str, float]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != METRIC_COLUMNS:
            raise ValueError(f"unexpected metrics header in {path}: {header}")
        return [(r[0], int(r[1]), r[2], r[3], r[4], float(r[5])) for r in reader]
