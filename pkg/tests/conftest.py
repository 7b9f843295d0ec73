import numpy as np
import pytest

from successor_lab.mrp import FiniteMrp, StateDistribution


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def two_cycle(gamma: float = 0.5, rewards=(1.0, 0.0)) -> FiniteMrp:
    return FiniteMrp(2, [[0.0, 1.0], [1.0, 0.0]], list(rewards), [0.0, 0.0], gamma)


def three_cycle(gamma: float = 0.9, rewards=(1.0, 0.0, 0.0)) -> FiniteMrp:
    P = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]
    return FiniteMrp(3, P, list(rewards), [0.0] * 3, gamma)


def random_dense_mrp(seed: int, num_states: int, gamma: float, noise: float = 0.0) -> FiniteMrp:
    rng = philox(seed)
    P = rng.dirichlet(np.ones(num_states), size=num_states)
    R = rng.normal(0.0, 1.0, num_states)
    return FiniteMrp(num_states, P, R, np.full(num_states, noise), gamma)


def uniform(num_states: int) -> StateDistribution:
    return StateDistribution(np.full(num_states, 1.0 / num_states))


def random_positive_distribution(seed: int, num_states: int) -> StateDistribution:
    rng = philox(seed)
    w = rng.dirichlet(np.ones(num_states) * 5.0)
    w = w + 0.01
    return StateDistribution(w / w.sum())


@pytest.fixture
def rng():
    return philox(12345)
