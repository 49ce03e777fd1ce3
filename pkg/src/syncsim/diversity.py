"""Paired-worker diversity regularization.

Pairs of workers observe the same mixed batch each step, and a weighted KL
divergence between their predictions is added to each worker's loss: a
negative weight pushes the predictions apart, a positive weight pulls them
together (co-distillation).  The partner's predictions enter as constants
(stop-gradient), so each worker's update only differentiates its own term.

Mixing is a convex combination of the two input batches (the inputs here
are plain vectors, so patch-based mixing has no analogue); both labels are
kept along with the coefficient and the loss is the matching convex
combination of cross-entropies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .data import Batch
from .network import (
    Mode,
    ParamVector,
    forward_with_trace,
    grad_from_dlogits,
    softmax,
)
from .reductions import scalar_mean

KL_CLAMP = 1e-12


@dataclass(frozen=True)
class DiversityConfig:
    """Weight, worker pairing, and mixing distribution for paired training.

    `pairing[w]` is worker w's partner; the map must be an involution with
    no fixed points.  `beta_a` parameterizes the symmetric Beta(a, a) the
    mixing coefficient is drawn from.
    """

    lam: float
    pairing: Tuple[int, ...]
    beta_a: float = 1.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")
        if self.beta_a <= 0:
            raise ValueError("beta_a must be positive")
        for w, p in enumerate(self.pairing):
            if p == w:
                raise ValueError("pairing must not contain fixed points")
            if not (0 <= p < len(self.pairing)) or self.pairing[p] != w:
                raise ValueError("pairing must be an involution over the workers")

    @classmethod
    def adjacent(cls, lam: float, num_workers: int, beta_a: float = 1.0) -> "DiversityConfig":
        if num_workers % 2 != 0:
            raise ValueError("adjacent pairing needs an even worker count")
        pairing = tuple(w + 1 if w % 2 == 0 else w - 1 for w in range(num_workers))
        return cls(lam, pairing, beta_a)

    def check_pairing(self, num_workers: int) -> None:
        if len(self.pairing) != num_workers:
            raise ValueError(f"pairing covers {len(self.pairing)} workers, run has {num_workers}")

    def pairs(self) -> List[Tuple[int, int]]:
        return [(w, p) for w, p in enumerate(self.pairing) if w < p]


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) with q floored at 1e-12; 0*log(0) reads as 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must have the same shape")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probabilities must be nonnegative")
    for name, dist in (("p", p), ("q", q)):
        off = abs(float(np.sum(dist)) - 1.0)
        if off > 1e-9:
            raise ValueError(f"{name} must sum to 1 (off by {off:.3g})")
    q = np.maximum(q, KL_CLAMP)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, KL_CLAMP)) - np.log(q)), 0.0)
    return max(0.0, float(np.sum(terms)))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p_i || q_i) for matrices of distributions (q clamped)."""
    q = np.maximum(q, KL_CLAMP)
    terms = np.where(p > 0, p * (np.log(np.maximum(p, KL_CLAMP)) - np.log(q)), 0.0)
    return np.sum(terms, axis=1)


@dataclass
class MixedBatch:
    """Convex input mixture with both source labels and the coefficient."""

    inputs: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray
    coeff: float


_MIX_TAG = 0x77


def mix_batches(
    batch_a: Batch, batch_b: Batch, mix_seed: int, beta_a: float = 1.0, coeff: Optional[float] = None
) -> MixedBatch:
    """Blend two equally sized batches; coefficient drawn from Beta(a, a) unless pinned."""
    if batch_a.inputs.shape != batch_b.inputs.shape:
        raise ValueError("batches must have identical shapes to be mixed")
    if coeff is None:
        rng = np.random.default_rng(np.random.SeedSequence([_MIX_TAG, mix_seed]))
        coeff = float(rng.beta(beta_a, beta_a))
    inputs = coeff * batch_a.inputs + (1.0 - coeff) * batch_b.inputs
    return MixedBatch(inputs, batch_a.labels.copy(), batch_b.labels.copy(), coeff)


def paired_loss(loss_a: float, loss_b: float, y1: np.ndarray, y2: np.ndarray, lam: float) -> Tuple[float, float]:
    """Totals with the partner's predictions treated as constants."""
    return loss_a + lam * kl_divergence(y1, y2), loss_b + lam * kl_divergence(y2, y1)


def _mixed_ce_terms(logits: np.ndarray, mb: MixedBatch) -> Tuple[np.ndarray, np.ndarray]:
    """Per-example mixed cross-entropy and its dlogits."""
    z = logits
    m = np.max(z, axis=1)
    lse = m + np.log(np.sum(np.exp(z - m[:, None]), axis=1))
    rows = np.arange(z.shape[0])
    losses = lse - (mb.coeff * z[rows, mb.labels_a] + (1.0 - mb.coeff) * z[rows, mb.labels_b])
    p = softmax(z)
    dlogits = p.copy()
    dlogits[rows, mb.labels_a] -= mb.coeff
    dlogits[rows, mb.labels_b] -= 1.0 - mb.coeff
    return losses, dlogits


def _kl_dlogits(p: np.ndarray, q_const: np.ndarray, kl_values: np.ndarray) -> np.ndarray:
    """d/dlogits of KL(softmax(logits) || q) with q held constant."""
    q = np.maximum(q_const, KL_CLAMP)
    inner = np.log(np.maximum(p, KL_CLAMP)) - np.log(q)
    return p * (inner - kl_values[:, None])


def paired_grads(
    params_a: ParamVector,
    params_b: ParamVector,
    mb: MixedBatch,
    lam: float,
    mode_a: Mode,
    mode_b: Mode,
) -> Tuple[float, ParamVector, float, ParamVector]:
    """Loss and gradient for both members of a pair on their shared batch.

    Each worker's gradient differentiates its own cross-entropy plus
    lam * KL(own predictions || partner predictions), with the partner
    fixed.  Returned losses are the optimized totals.
    """
    trace_a = forward_with_trace(params_a, mb.inputs, mode_a)
    trace_b = forward_with_trace(params_b, mb.inputs, mode_b)
    ce_a, dl_a = _mixed_ce_terms(trace_a.logits, mb)
    ce_b, dl_b = _mixed_ce_terms(trace_b.logits, mb)
    if lam == 0.0:
        grad_a = grad_from_dlogits(trace_a, dl_a)
        grad_b = grad_from_dlogits(trace_b, dl_b)
        return scalar_mean(ce_a.tolist()), grad_a, scalar_mean(ce_b.tolist()), grad_b

    pa = softmax(trace_a.logits)
    pb = softmax(trace_b.logits)
    kl_ab = kl_rows(pa, pb)
    kl_ba = kl_rows(pb, pa)
    total_a = scalar_mean((ce_a + lam * kl_ab).tolist())
    total_b = scalar_mean((ce_b + lam * kl_ba).tolist())
    grad_a = grad_from_dlogits(trace_a, dl_a + lam * _kl_dlogits(pa, pb, kl_ab))
    grad_b = grad_from_dlogits(trace_b, dl_b + lam * _kl_dlogits(pb, pa, kl_ba))
    return total_a, grad_a, total_b, grad_b


def disagreement(logits_a: np.ndarray, logits_b: np.ndarray) -> float:
    """Fraction of rows where the two models' argmax predictions differ."""
    pred_a = np.argmax(logits_a, axis=1)
    pred_b = np.argmax(logits_b, axis=1)
    return float(np.count_nonzero(pred_a != pred_b)) / len(pred_a)
