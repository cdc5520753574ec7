import numpy as np
import pytest

from advml.harness.datasets import gen_dataset
from advml.net import DenseLayer, Network, init_network, train_sgd

MOONS_HIDDEN = (16, 16)
MOONS_EPOCHS = 200
MOONS_LR = 0.3


def random_net(dims, seed, scale=1.0):
    """Dense ReLU net with Gaussian weights (no training)."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        act = "id" if i == len(dims) - 2 else "relu"
        layers.append(DenseLayer(scale * rng.normal(size=(b, a)) / np.sqrt(a), 0.1 * rng.normal(size=b), act))
    return Network(layers)


def linear_net(w, b):
    """Two-logit linear classifier whose logit difference is w.x + b."""
    w = np.asarray(w, dtype=float)
    W = np.stack([np.zeros_like(w), w])
    return Network([DenseLayer(W, np.array([0.0, b]), "id")])


def moons_model(seed):
    train = gen_dataset("two-moons", 400, 0.1, seed)
    test = gen_dataset("two-moons", 200, 0.1, 1000 + seed)
    net = train_sgd(init_network([2, *MOONS_HIDDEN, 2], seed), train.pairs(), MOONS_EPOCHS, MOONS_LR, seed)
    return net, train, test


@pytest.fixture(scope="session")
def moons():
    return moons_model(0)
