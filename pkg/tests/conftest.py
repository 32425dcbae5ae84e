import numpy as np
import pytest

from memefusion.backbone.mock import MockBackbone
from memefusion.config import default_config, resolve_config
from memefusion.data import generate_synthetic_confounders
from memefusion.training import build_model


@pytest.fixture(scope="session")
def mock_backbone():
    return MockBackbone(seed=0)


@pytest.fixture()
def small_config():
    cfg = default_config()
    cfg["data"]["n_synthetic"] = 32
    cfg["train"]["stage1_epochs"] = 2
    cfg["train"]["stage2_epochs"] = 2
    return resolve_config(cfg)


@pytest.fixture()
def small_model(small_config):
    return build_model(small_config)


@pytest.fixture(scope="session")
def synth16():
    return generate_synthetic_confounders(16, 0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
