import numpy as np
import pytest

from safeturn.config import Config, EvalConfig
from safeturn.rl_agent import AgentConfig
from safeturn.state_encoder import RoiSpec
from safeturn.world_sim import build_layout


@pytest.fixture(scope="session")
def four_way():
    return build_layout("four-way")


@pytest.fixture(scope="session")
def three_way():
    return build_layout("three-way")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_roi():
    return RoiSpec(cell_length=0.5, cell_width=0.5)


@pytest.fixture(scope="session")
def small_agent():
    return AgentConfig(conv_filters=2, pool_kernel=3, pool_stride=2, learn_start=8, batch_size=8,
                       capacity=64, target_update_every=10, checkpoint_every=1)


@pytest.fixture(scope="session")
def small_config(small_roi, small_agent):
    return Config(roi=small_roi, agent=small_agent, eval=EvalConfig(episodes=2, workers=2))
