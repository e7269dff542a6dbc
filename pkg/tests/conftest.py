import numpy as np
import pytest

from mtlattack import scenegen
from mtlattack.model import MultiTaskPerceptionModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset():
    """30 scenes -> 25 train / 5 test, default 64x64 parameters."""
    return scenegen.generate_dataset(30, scenegen.SceneParams(), seed=7)


@pytest.fixture(scope="session")
def quick_model(small_dataset):
    """A briefly trained model: cheap, but past random initialization."""
    model = MultiTaskPerceptionModel(epochs=6, seed=1)
    model.fit(small_dataset.train[:12])
    return model
