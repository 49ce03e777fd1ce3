"""Operations on whole parameter vectors.

Uniform averaging, debiased exponential moving averages, interpolation
between an initial and a fine-tuned model, output-space ensembling,
interpolation scans for loss barriers, and linear-probe head training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .data import Batch, shard_epoch
from .evalstats import accuracy
from .network import (
    EVAL,
    Layout,
    ParamVector,
    cross_entropy,
    forward,
    loss_and_grad,
    same_layout,
    softmax,
)
from .reductions import exact_mean


def _check_layouts(params_list: Sequence[ParamVector]) -> None:
    if len(params_list) == 0:
        raise ValueError("parameter list is empty")
    for p in params_list[1:]:
        if not same_layout(params_list[0], p):
            raise ValueError("parameter layouts do not match")


def uniform_average(params_list: Sequence[ParamVector]) -> ParamVector:
    """Elementwise mean of K models; exact, order-independent."""
    _check_layouts(params_list)
    return ParamVector(exact_mean([p.values for p in params_list]), params_list[0].layout)


# ---------------------------------------------------------------------------
# exponential moving average


@dataclass(frozen=True)
class EmaState:
    """Debiased EMA of a parameter stream.

    The running value is stored already debiased (`mean` is the weighted
    average of everything observed so far), updated as
    ``mean += w_t * (params - mean)`` with ``w_t = (1-beta)/(1-beta^t)``.
    This is algebraically the usual accumulate-then-divide recurrence, but
    a constant stream is a fixed point of it in floating point too, so the
    debiased value of a constant stream is exact at every step.
    """

    decay: float
    mean: ParamVector
    steps: int

    def __post_init__(self) -> None:
        if not (0.0 < self.decay < 1.0):
            raise ValueError("decay must lie strictly between 0 and 1")

    @property
    def accum(self) -> ParamVector:
        """The raw (biased) accumulator `beta*accum + (1-beta)*params`."""
        return self.mean.with_values(self.mean.values * (1.0 - self.decay ** self.steps))


def ema_init(decay: float, layout: Layout) -> EmaState:
    return EmaState(decay, ParamVector(np.zeros(layout.total_size), layout), 0)


def ema_update(state: EmaState, params: ParamVector) -> EmaState:
    if not same_layout(state.mean, params):
        raise ValueError("parameter layout does not match EMA state")
    t = state.steps + 1
    w = (1.0 - state.decay) / (1.0 - state.decay ** t)
    new_mean = state.mean.values + w * (params.values - state.mean.values)
    return EmaState(state.decay, params.with_values(new_mean), t)


def ema_debias(state: EmaState) -> ParamVector:
    if state.steps == 0:
        raise ValueError("EMA has not observed any parameters yet")
    return state.mean.copy()


# ---------------------------------------------------------------------------
# interpolation


def wise_ft(theta_init: ParamVector, theta_ft: ParamVector, alpha: float) -> ParamVector:
    """(1-alpha) * initial + alpha * fine-tuned, alpha clamped to [0, 1]."""
    if not same_layout(theta_init, theta_ft):
        raise ValueError("parameter layouts do not match")
    alpha = min(1.0, max(0.0, float(alpha)))
    if alpha == 0.0:
        return theta_init.copy()
    if alpha == 1.0:
        return theta_ft.copy()
    return theta_init.with_values((1.0 - alpha) * theta_init.values + alpha * theta_ft.values)


def ensemble_predict(params_list: Sequence[ParamVector], inputs: np.ndarray) -> np.ndarray:
    """Mean of per-model softmax probabilities."""
    _check_layouts(params_list)
    probs = [softmax(forward(p, inputs, EVAL)) for p in params_list]
    return exact_mean(probs)


@dataclass(frozen=True)
class ScanPoint:
    alpha: float
    loss: float
    accuracy: float


def dataset_evaluator(eval_set: Batch) -> Callable[[ParamVector], Tuple[float, float]]:
    """Loss/accuracy evaluation on a fixed set, for interpolation scans."""

    def evaluate(params: ParamVector) -> Tuple[float, float]:
        logits = forward(params, eval_set.inputs, EVAL)
        return cross_entropy(logits, eval_set.labels), accuracy(logits, eval_set.labels)

    return evaluate


def barrier_scan(
    theta_a: ParamVector,
    theta_b: ParamVector,
    num_points: int,
    eval_fn: Callable[[ParamVector], Tuple[float, float]],
) -> List[ScanPoint]:
    """Evaluate the straight line between two models at num_points coefficients."""
    if num_points < 2:
        raise ValueError("need at least the two endpoints")
    if not same_layout(theta_a, theta_b):
        raise ValueError("parameter layouts do not match")
    points = []
    for j in range(num_points):
        alpha = j / (num_points - 1)
        loss, acc = eval_fn(wise_ft(theta_a, theta_b, alpha))
        points.append(ScanPoint(alpha, loss, acc))
    return points


def loss_barrier(points: Sequence[ScanPoint]) -> float:
    """Max interpolated loss minus the larger endpoint loss."""
    losses = [p.loss for p in points]
    return max(losses) - max(losses[0], losses[-1])


# ---------------------------------------------------------------------------
# linear probe


@dataclass(frozen=True)
class ProbeConfig:
    steps: int
    batch_size: int
    lr: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size must be >= 1 and lr positive")


def linear_probe(theta_pre: ParamVector, data: Batch, probe: ProbeConfig) -> ParamVector:
    """SGD on the head segment only; every non-head coordinate stays bitwise put.

    The probe runs in eval mode (no block dropping), cycling deterministic
    epochs of the probe data until `steps` updates have been applied.
    """
    params = theta_pre.copy()
    head = params.head_slice()
    done = 0
    epoch = 0
    while done < probe.steps:
        for batch in shard_epoch(data, epoch, 0, 1, probe.batch_size, probe.seed):
            if done >= probe.steps:
                break
            _, grad = loss_and_grad(params, batch.inputs, batch.labels, EVAL)
            params.values[head] = params.values[head] - probe.lr * grad.values[head]
            done += 1
        epoch += 1
    return params
