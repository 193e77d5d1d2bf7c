import sys
import warnings
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from dynedit.backends.synthetic import SyntheticBackend
from dynedit.config import RunConfig
from dynedit.fixtures import make_two_object_scene
from dynedit.pipeline import run_pipeline

torch.manual_seed(0)


@pytest.fixture(scope="session")
def backend():
    return SyntheticBackend(num_steps=50)


@pytest.fixture(scope="session")
def scene(backend):
    return make_two_object_scene(backend)


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def pipeline_result(backend, scene, run_config):
    """One full default-config run, shared by everything downstream."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_pipeline(backend, scene.image, scene.prompt, scene.noun_words, run_config)


@pytest.fixture(scope="session")
def stock_cond(backend, scene):
    return backend.encode_prompt(scene.prompt, noun_words=scene.noun_words)
