import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from aoisched import ChannelModel, CostModel, ProblemInstance


@pytest.fixture(scope="session")
def iv_a_instance():
    """The main experimental configuration: 8-gain channel, caps 10."""
    gains = (0.0131, 0.0418, 0.0753, 0.1157, 0.1661, 0.2343, 0.3407, 0.6200)
    weights = np.array([1, 1, 2, 3, 3, 2, 1, 1], dtype=float)
    channel = ChannelModel(gains, tuple(weights / weights.sum()))
    costs = CostModel(0.2, tuple(0.2 / g for g in gains), 0.3)
    return ProblemInstance(10, 10, channel, costs)


@pytest.fixture(scope="session")
def fig2_instance():
    """Two-gain illustration instance: caps 10, expensive sampling."""
    channel = ChannelModel((1.0, 2.0), (0.5, 0.5))
    return ProblemInstance(10, 10, channel, CostModel(2.0, (3.5, 1.75), 3.0))


@pytest.fixture(scope="session")
def tiny_instance():
    """Small enough for exhaustive policy enumeration."""
    channel = ChannelModel((0.5, 2.0), (0.4, 0.6))
    return ProblemInstance(2, 2, channel, CostModel(0.3, (1.0, 0.25), 0.5))


@pytest.fixture(scope="session")
def zero_cost_instance():
    channel = ChannelModel((1.0,), (1.0,))
    return ProblemInstance(3, 3, channel, CostModel(0.0, (0.0,), 1.0))
