import os
import sys

import pytest
import torch

# Add the parent directory to sys.path to import modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.config import Settings
from model.models import ExperimentConfig, ModelConfig, SiteParams
from services.volume_pipeline import CaseRecord, synth_phantom


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow experiment tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def settings():
    """Load settings for tests."""
    return Settings()


@pytest.fixture
def float64():
    """Run the test with float64 as torch's default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


@pytest.fixture
def tiny_model_config():
    return ModelConfig.tiny()


@pytest.fixture
def tiny_experiment(tmp_path):
    """16^3 phantoms, tiny backbone, 64-bit training."""
    return ExperimentConfig.model_validate(
        {
            "name": "tiny",
            "phantom": {"n_train": 4, "n_val": 2, "side": 16, "seed": 3},
            "model": ModelConfig.tiny().model_dump(),
            "training": {"epochs": 1, "batch_size": 2, "lr": 1e-3, "dtype": "float64"},
            "output_dir": str(tmp_path / "run"),
        }
    )


def make_cases(site: str, params: SiteParams, n: int, side: int = 16, offset: int = 0):
    cases = []
    for i in range(n):
        volume, mask = synth_phantom(offset + i, params, side)
        cases.append(CaseRecord(f"case_{i:04d}", site, "train", volume, mask))
    return cases


@pytest.fixture
def phantom_cases():
    """Four source and four target 16^3 phantom cases."""
    target = SiteParams(intensity_gain=1.3, intensity_offset=50.0, noise_sigma=5.0, blur_sigma=1.0)
    return make_cases("source", SiteParams(), 4), make_cases("target", target, 4, offset=100)


@pytest.fixture
def case_factory():
    return make_cases
