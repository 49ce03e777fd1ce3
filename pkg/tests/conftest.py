import numpy as np
import pytest

from syncsim.data import ShiftSpec, TaskSpec, generate_task
from syncsim.engine import SgdMomentum, TrainConfig
from syncsim.network import NetworkConfig, init_params


@pytest.fixture(scope="session")
def tiny_task():
    spec = TaskSpec(
        num_classes=4,
        input_dim=6,
        cluster_spread=0.5,
        pretrain_size=128,
        finetune_size=256,
        test_size=96,
        shift=ShiftSpec("noise", 0.6),
        seed=3,
    )
    return generate_task(spec)


@pytest.fixture(scope="session")
def tiny_net():
    return NetworkConfig(input_dim=6, hidden_dim=8, num_blocks=2, num_classes=4)


@pytest.fixture(scope="session")
def tiny_init(tiny_net):
    return init_params(tiny_net, 0)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(
        lr_base=0.05, epochs=2, global_batch=32, optimizer=SgdMomentum(0.9), drop_prob=0.2, seed=11
    )


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
