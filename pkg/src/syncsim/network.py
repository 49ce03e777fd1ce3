"""Residual MLP with stochastic depth and exact reverse-mode gradients.

The architecture is deliberately small: a linear+tanh embedding, a stack of
residual tanh blocks that can be dropped stochastically at train time, and a
linear classification head.  Everything is computed in float64 with
shape-invariant kernels (see `reductions`), so the gradient of one example
is bitwise the same whether it is computed alone or inside a batch.

Train-time stochastic depth keeps a block with probability ``1 - drop_prob``
and scales the surviving residual branch by ``1 / (1 - drop_prob)``; the
eval path applies every block unscaled.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Tuple, Union

import numpy as np

from .reductions import batch_mean, det_matmul, scalar_mean


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    hidden_dim: int
    num_blocks: int
    num_classes: int
    drop_prob: float = 0.0

    def __post_init__(self) -> None:
        for name in ("input_dim", "hidden_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if not (0.0 <= self.drop_prob < 1.0):
            raise ValueError("drop_prob must lie in [0, 1)")


@dataclass(frozen=True)
class Layout:
    """Named, ordered segments of a flat parameter vector."""

    segments: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @classmethod
    def for_config(cls, config: NetworkConfig) -> "Layout":
        d, h, c = config.input_dim, config.hidden_dim, config.num_classes
        segs: List[Tuple[str, Tuple[int, ...]]] = [("embed.weight", (h, d)), ("embed.bias", (h,))]
        for i in range(config.num_blocks):
            segs.append((f"block{i}.weight", (h, h)))
            segs.append((f"block{i}.bias", (h,)))
        segs.append(("head.weight", (c, h)))
        segs.append(("head.bias", (c,)))
        return cls(tuple(segs))

    @property
    def total_size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.segments)

    def offsets(self) -> Dict[str, Tuple[int, int, Tuple[int, ...]]]:
        return _layout_offsets(self)

    @property
    def num_blocks(self) -> int:
        return sum(1 for name, _ in self.segments if name.endswith(".weight") and name.startswith("block"))

    @property
    def input_dim(self) -> int:
        return self.segments[0][1][1]

    @property
    def hidden_dim(self) -> int:
        return self.segments[0][1][0]

    @property
    def num_classes(self) -> int:
        return self.segments[-1][1][0]


@lru_cache(maxsize=128)
def _layout_offsets(layout: "Layout") -> Dict[str, Tuple[int, int, Tuple[int, ...]]]:
    out = {}
    pos = 0
    for name, shape in layout.segments:
        size = int(np.prod(shape))
        out[name] = (pos, pos + size, shape)
        pos += size
    return out


@dataclass
class ParamVector:
    """Flat float64 parameter vector plus the layout that names its pieces."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter values must be one-dimensional")
        if self.values.shape[0] != self.layout.total_size:
            raise ValueError(
                f"value length {self.values.shape[0]} does not match layout size {self.layout.total_size}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    def segment(self, name: str) -> np.ndarray:
        start, stop, shape = self.layout.offsets()[name]
        return self.values[start:stop].reshape(shape)

    def segment_slice(self, name: str) -> slice:
        start, stop, _ = self.layout.offsets()[name]
        return slice(start, stop)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64), self.layout)

    def head_slice(self) -> slice:
        offs = self.layout.offsets()
        start = offs["head.weight"][0]
        stop = offs["head.bias"][1]
        return slice(start, stop)

    def __len__(self) -> int:
        return self.values.shape[0]


def same_layout(a: ParamVector, b: ParamVector) -> bool:
    return a.layout == b.layout


@dataclass(frozen=True)
class EvalMode:
    """Deterministic forward pass, no block dropping."""


@dataclass(frozen=True)
class TrainMode:
    """Stochastic-depth forward; block mask is a pure function of rng_seed."""

    drop_prob: float
    rng_seed: int

    def __post_init__(self) -> None:
        if not (0.0 <= self.drop_prob < 1.0):
            raise ValueError("drop_prob must lie in [0, 1)")


Mode = Union[EvalMode, TrainMode]
EVAL = EvalMode()

_INIT_TAG = 0x1A2B
_DEPTH_TAG = 0x3C4D


def init_params(config: NetworkConfig, seed: int, zero_head: bool = False) -> ParamVector:
    """Deterministic Gaussian init, std 1/sqrt(fan_in); biases zero.

    With ``zero_head`` the head segment is all zeros, emulating fine-tuning
    with a freshly attached classifier.
    """
    layout = Layout.for_config(config)
    rng = np.random.default_rng(np.random.SeedSequence([_INIT_TAG, seed]))
    values = np.zeros(layout.total_size, dtype=np.float64)
    pv = ParamVector(values, layout)
    for name, shape in layout.segments:
        if name.endswith(".bias"):
            continue
        fan_in = shape[1]
        seg = rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape)
        if zero_head and name == "head.weight":
            seg = np.zeros(shape)
        start, stop, _ = layout.offsets()[name]
        values[start:stop] = seg.ravel()
    return pv


def block_scales(layout: Layout, mode: Mode) -> np.ndarray:
    """Per-block residual multipliers for one forward call."""
    n = layout.num_blocks
    if isinstance(mode, EvalMode) or n == 0:
        return np.ones(n, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([_DEPTH_TAG, mode.rng_seed]))
    keep = rng.random(n) >= mode.drop_prob
    if mode.drop_prob == 0.0:
        return np.ones(n, dtype=np.float64)
    return keep.astype(np.float64) / (1.0 - mode.drop_prob)


@dataclass
class ForwardTrace:
    """Intermediates needed to backpropagate one forward call."""

    inputs: np.ndarray
    embed_act: np.ndarray            # tanh output of the embedding
    block_inputs: List[np.ndarray]   # h_l entering block l
    block_acts: List[np.ndarray]     # tanh output of block l
    final_hidden: np.ndarray
    scales: np.ndarray
    logits: np.ndarray
    params: ParamVector


def _check_inputs(layout: Layout, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ValueError("inputs must be a 2-D example matrix")
    if inputs.shape[1] != layout.input_dim:
        raise ValueError(f"input dim {inputs.shape[1]} does not match network input dim {layout.input_dim}")
    return inputs


def forward_with_trace(params: ParamVector, inputs: np.ndarray, mode: Mode = EVAL) -> ForwardTrace:
    x = _check_inputs(params.layout, inputs)
    scales = block_scales(params.layout, mode)
    h = np.tanh(det_matmul(x, params.segment("embed.weight").T) + params.segment("embed.bias"))
    embed_act = h
    block_inputs: List[np.ndarray] = []
    block_acts: List[np.ndarray] = []
    for i in range(params.layout.num_blocks):
        block_inputs.append(h)
        t = np.tanh(det_matmul(h, params.segment(f"block{i}.weight").T) + params.segment(f"block{i}.bias"))
        block_acts.append(t)
        h = h + scales[i] * t
    logits = det_matmul(h, params.segment("head.weight").T) + params.segment("head.bias")
    return ForwardTrace(x, embed_act, block_inputs, block_acts, h, scales, logits, params)


def forward(params: ParamVector, inputs: np.ndarray, mode: Mode = EVAL) -> np.ndarray:
    """Logits for a batch of inputs, rows = examples."""
    return forward_with_trace(params, inputs, mode).logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - np.max(z, axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=1, keepdims=True)


def _log_sum_exp(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=1)
    return m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ValueError("labels must be a vector with one entry per example")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return labels.astype(np.int64)


def per_example_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    return _log_sum_exp(logits) - logits[np.arange(len(labels)), labels]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log softmax probability of the true class."""
    return scalar_mean(per_example_cross_entropy(logits, labels).tolist())


def grad_from_dlogits(trace: ForwardTrace, dlogits: np.ndarray) -> ParamVector:
    """Mean parameter gradient given per-example dL/dlogits.

    Per-example contributions are reduced with the canonical batch mean,
    which is what makes the batch gradient equal the mean of single-example
    gradients bit for bit.
    """
    params = trace.params
    layout = params.layout
    batch = trace.inputs.shape[0]
    offsets = layout.offsets()
    contrib = np.empty((batch, layout.total_size), dtype=np.float64)

    def put(name: str, values: np.ndarray) -> None:
        start, stop, _ = offsets[name]
        contrib[:, start:stop] = values.reshape(batch, -1)

    put("head.bias", dlogits)
    put("head.weight", dlogits[:, :, None] * trace.final_hidden[:, None, :])
    dh = det_matmul(dlogits, params.segment("head.weight"))

    for i in reversed(range(layout.num_blocks)):
        t = trace.block_acts[i]
        du = (trace.scales[i] * dh) * (1.0 - t * t)
        put(f"block{i}.bias", du)
        put(f"block{i}.weight", du[:, :, None] * trace.block_inputs[i][:, None, :])
        dh = dh + det_matmul(du, params.segment(f"block{i}.weight"))

    a = trace.embed_act
    dz = dh * (1.0 - a * a)
    put("embed.bias", dz)
    put("embed.weight", dz[:, :, None] * trace.inputs[:, None, :])

    mean = batch_mean(contrib)
    if not np.all(np.isfinite(mean)):
        raise RuntimeError("non-finite gradient (corrupted inputs or diverged parameters)")
    return ParamVector(mean, layout)


def loss_and_grad(params: ParamVector, inputs: np.ndarray, labels: np.ndarray, mode: Mode = EVAL) -> Tuple[float, ParamVector]:
    """Mean cross-entropy and its exact reverse-mode gradient."""
    trace = forward_with_trace(params, inputs, mode)
    labels = _check_labels(trace.logits, labels)
    loss = scalar_mean(per_example_cross_entropy(trace.logits, labels).tolist())
    p = softmax(trace.logits)
    dlogits = p.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return loss, grad_from_dlogits(trace, dlogits)


def central_difference(fn: Callable[[np.ndarray], float], theta: np.ndarray, eps: float) -> np.ndarray:
    """Generic central-difference gradient of a scalar function."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.shape[0]):
        bump = np.zeros_like(theta)
        bump[i] = eps
        grad[i] = (fn(theta + bump) - fn(theta - bump)) / (2.0 * eps)
    return grad


def finite_difference_gradient(
    params: ParamVector, inputs: np.ndarray, labels: np.ndarray, mode: Mode = EVAL, eps: float = 1e-5
) -> ParamVector:
    """Central-difference oracle for `loss_and_grad`.

    The mode (and with it the stochastic-depth mask) is held fixed across
    all probe evaluations, so the differentiated function is smooth.
    """

    def loss_at(values: np.ndarray) -> float:
        pv = params.with_values(values)
        return cross_entropy(forward(pv, inputs, mode), labels)

    return ParamVector(central_difference(loss_at, params.values, eps), params.layout)


def gradient_max_rel_error(analytic: ParamVector, numeric: ParamVector) -> float:
    """Max per-coordinate error, relative with a unit floor for tiny coordinates."""
    a, b = analytic.values, numeric.values
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))
