"""Deterministic simulator for multi-worker fine-tuning.

Compares per-step gradient synchronization against fully local fine-tuning
with a single final weight average, together with weight-space operations,
diversity regularizers, paired significance tests, and a communication
cost model.
"""

from .data import Batch, ShiftSpec, TaskBundle, TaskSpec, apply_shift, generate_task, shard_epoch
from .engine import (
    AdamW,
    CommStrategy,
    FullSync,
    GroupedSync,
    Independent,
    LocalSGD,
    RunResult,
    Sgd,
    SgdMomentum,
    Topology,
    TrainConfig,
    cosine_lr,
    reduce_mean,
    train,
)
from .network import (
    EVAL,
    EvalMode,
    NetworkConfig,
    ParamVector,
    TrainMode,
    cross_entropy,
    finite_difference_gradient,
    forward,
    init_params,
    loss_and_grad,
)
from .weightspace import (
    EmaState,
    ProbeConfig,
    barrier_scan,
    ema_debias,
    ema_init,
    ema_update,
    ensemble_predict,
    linear_probe,
    loss_barrier,
    uniform_average,
    wise_ft,
)

__version__ = "0.1.0"
