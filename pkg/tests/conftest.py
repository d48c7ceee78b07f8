import numpy as np
import pytest

from cmanet.channel import Scene, build_dataset
from cmanet.commands.diagnostics import tiny_config
from cmanet.dataio import read_dataset
from cmanet.models import PipelineConfig


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def config() -> PipelineConfig:
    return tiny_config()


@pytest.fixture
def scene(config) -> Scene:
    return Scene.from_config(config)


@pytest.fixture
def dataset_path(tmp_path, scene):
    path = tmp_path / "tiny.bin"
    build_dataset(scene, 24, seed=3, path=path)
    return path


@pytest.fixture
def dataset(dataset_path):
    return read_dataset(dataset_path)
