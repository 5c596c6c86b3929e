import logging

import numpy as np
import pytest

from retina_align.embedding import init_model
from retina_align.evalkit import synth_dataset
from retina_align.featurizer import SurrogateTextFeaturizer
from retina_align.prompt_bank import load_bank, load_registry
from retina_align.utils import UI


@pytest.fixture(scope='function')
def ui():
    ui = UI(logging.DEBUG, False)
    yield ui
    ui.close()


@pytest.fixture(scope='session')
def bank():
    return load_bank()


@pytest.fixture(scope='session')
def registry():
    return load_registry()


@pytest.fixture
def featurizer():
    return SurrogateTextFeaturizer(16, seed=3)


@pytest.fixture
def small_model():
    """Random model over 6-dim images and 16-dim texts."""
    return init_model(6, 16, d_out=8, seed=11)


@pytest.fixture(scope='session')
def clustered():
    """Three well separated 8-dim clusters, 30 samples each."""
    return synth_dataset(3, 30, 8, class_separation=5.0, noise=0.3, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
