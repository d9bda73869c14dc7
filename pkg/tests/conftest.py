import numpy as np
import pytest

from fedchain.crypto import derive_entropy, generate_round_keypair
from fedchain.model import ModelWeights, init_model


@pytest.fixture(scope="session")
def round_keys():
    """Three seeded round keypairs; RSA generation is the slow part of crypto tests."""
    return [generate_round_keypair(r, derive_entropy(99, "round-key", r)) for r in (1, 2, 3)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_model(rng, dims) -> ModelWeights:
    model = init_model(dims, int(rng.integers(2**32)))
    for layer in model.layers:
        layer.bias[:] = rng.normal(size=layer.bias.shape)
    return model
