import numpy as np
import pytest

from dtdaudit.experiment import random_network
from dtdaudit.network import LayerSpec, Network


def make_net(*layers):
    """Network from ``(W, b, activation)`` triples."""
    return Network(tuple(LayerSpec(np.array(W, float), np.array(b, float), act) for W, b, act in layers))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_net():
    return make_net((np.eye(2), [0, 0], "relu"))


@pytest.fixture
def random_relu(rng):
    def build(dims=(10, 10, 10, 10), bias_mode="unrestricted", activation="relu"):
        return random_network(dims, rng, bias_mode, activation)

    return build
