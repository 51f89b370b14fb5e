import numpy as np
import pytest

from sabfl.data import generate_synthetic
from sabfl.models import Minibatch, ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return generate_synthetic(400, 6, 3, 3.0, seed=5)


@pytest.fixture(params=["quadratic", "logistic_regression", "mlp"])
def any_spec(request):
    if request.param == "quadratic":
        return ModelSpec("quadratic", 5, quadratic_target=np.linspace(-1, 1, 5))
    if request.param == "logistic_regression":
        return ModelSpec("logistic_regression", 4, 3)
    return ModelSpec("mlp", 4, 3, hidden_dim=5)


def random_batch(rng, n, d, c):
    return Minibatch(rng.standard_normal((n, d)), rng.integers(0, c, size=n))


def tiny_config(**overrides):
    """A run that finishes in well under a second."""
    from sabfl.config import config_from_dict, deep_merge

    base = {
        "seed": 3, "num_participants": 8, "K": 5, "V": 2, "epochs": 1, "lr": 0.1,
        "batch_size": 16, "stopping_window": 50, "max_rounds": 4,
        "data": {"num_train": 600, "num_test": 200, "input_dim": 5, "num_classes": 3,
                 "class_separation": 3.0, "seed": 3},
        "partition": {"lambda": 1.0, "seed": 3, "min_shard_size": 20},
    }
    return config_from_dict(deep_merge(base, overrides))
