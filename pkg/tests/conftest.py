import numpy as np
import pytest

from idqn.env import LayoutConfig
from idqn.losses import Batch
from idqn.model import IDQN, ModelConfig

# 2×8×8 observations: a 2×2 grid world at 4 px per cell, two stacked frames
TINY_LAYOUT = LayoutConfig(width=2, height=2, n_pellets=2, cell_px=4, step_cap=12)
TINY = ModelConfig(obs_shape=(2, 8, 8), n_keys=4, embed_dim=5, conv_layers=((3, 2, 2), (4, 3, 1)))


def make_batch(rng, config=TINY, b=4, n_actions=4):
    shape = (b,) + config.obs_shape
    return Batch(
        obs=rng.uniform(0, 1, shape),
        actions=rng.integers(0, n_actions, b),
        rewards=rng.choice([0.0, 1.0], b),
        next_obs=rng.uniform(0, 1, shape),
        dones=np.array([False, True] * (b // 2) + [False] * (b % 2)),
    )


@pytest.fixture
def tiny_model():
    return IDQN.init(TINY, 0)


@pytest.fixture
def tiny_batch():
    return make_batch(np.random.default_rng(0))
