import numpy as np
import pytest

from invoxel.scenedata import ToyScene, generate_toy_scene


@pytest.fixture(scope="session")
def tiny_scene():
    return ToyScene(H=24, W=24, train_views=3, test_views=2)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_scene):
    return generate_toy_scene(tiny_scene, steps=512)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
