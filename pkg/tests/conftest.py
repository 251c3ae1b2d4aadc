import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


def random_kernel(rng, D, dim=None):
    """Gram matrix of D random vectors: PSD and well conditioned for dim >= D."""
    x = rng.standard_normal((D, dim or D + 2))
    return x @ x.T / x.shape[1] + 0.1 * np.eye(D)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_image0():
    from ngpflow.mnist import read_images
    return read_images(DATA / "train-images-idx3-ubyte.gz")[0].reshape(1, 784).astype(np.float64)
