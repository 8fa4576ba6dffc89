import numpy as np
import pytest

from pickmae import config as cfgmod
from pickmae import dataset, scenegen


@pytest.fixture(scope="session")
def cfg():
    return cfgmod.default_config()


@pytest.fixture(scope="session")
def scene(cfg):
    return scenegen.generate_scene("standard", 42, cfg, scene_id=7)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory, cfg):
    """A tiny standard-flavor dataset shared by trainer/evaluator/cli tests."""
    root = tmp_path_factory.mktemp("data")
    dataset.build_dataset(
        "standard", {"pretrain": 8, "train": 48, "val": 24, "test": 24},
        11.0, 123, cfg, str(root))
    return str(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
