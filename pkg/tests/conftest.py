import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from fedcvu.nn.network import BlockNet, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Smallest model that still exercises every block role."""
    return ModelConfig(d_in=3, d=4, n_blocks=2, n_classes=3)


@pytest.fixture
def tiny_net(tiny_cfg, rng):
    return BlockNet(tiny_cfg, rng)
