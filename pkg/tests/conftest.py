import os

# Keep BLAS single-threaded: bit-exact reproducibility contracts are
# stated for single-threaded execution, and the matrices here are too
# small for threading to pay off anyway.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from reptrain import nn


@pytest.fixture
def tiny_layers():
    """2-conv + 1-dense stack for 1x8x8 inputs."""
    return (
        nn.Conv(1, 2, 3, stride=1, padding=1),
        nn.ReLU(),
        nn.MaxPool(2, 2),
        nn.Conv(2, 3, 3, stride=1, padding=1),
        nn.ReLU(),
        nn.Flatten(),
        nn.Dense(3 * 4 * 4, 3),
    )


@pytest.fixture
def tiny_net(tiny_layers):
    return nn.build_network(tiny_layers, [2, 3, 4], seed=0, input_shape=(1, 8, 8))


def cross_entropy_of(net, x, targets):
    """Independent loss evaluation used by finite-difference oracles."""
    acts = nn.forward(net, x)
    n = acts.probs.shape[0]
    picked = acts.probs[np.arange(n), np.asarray(targets)].astype(np.float64)
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))
