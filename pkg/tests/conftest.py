import numpy as np
import pytest

from ocflow.config import preset, with_overrides
from ocflow.data import SceneParams
from ocflow.model import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training reproduction (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(feature_channels=8, downsample=2, radius=1, hidden_channels=8, iterations=2, seed=0)


@pytest.fixture
def tiny_scene():
    return SceneParams(width=16, height=16, frames=4, min_sprites=1, max_sprites=2, min_size=4, max_size=6)


@pytest.fixture
def tiny_run(tmp_path):
    """Build a small, fast RunConfig for a strategy; extra dotted-key overrides are allowed."""

    def make(strategy="baseline", **overrides):
        values = {
            "model.feature_channels": 8,
            "model.hidden_channels": 8,
            "model.radius": 1,
            "model.iterations": 2,
            "scene.width": 16,
            "scene.height": 16,
            "scene.min_size": 4,
            "scene.max_size": 6,
            "train_sequences": 2,
            "eval_sequences": 1,
            "steps": 2,
            "eval_every": 1,
            "out_dir": str(tmp_path / strategy),
        }
        values.update(overrides)
        return with_overrides(preset(strategy), values)

    return make
