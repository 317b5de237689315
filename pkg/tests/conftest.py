import numpy as np
import pytest
import torch

from mambacafu.config import ModelConfig
from mambacafu.data import load_dataset, synth_generate


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture
def tiny_cfg():
    return ModelConfig.tiny_config(num_classes=3, input_size=64)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synth_generate(6, 64, 3, seed=3, out_dir=out, split="train")
    synth_generate(4, 64, 3, seed=4, out_dir=out, split="val")
    return out


@pytest.fixture(scope="session")
def synth_samples(synth_dir):
    return load_dataset(synth_dir / "train.tsv")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _restore_torch_state():
    dtype = torch.get_default_dtype()
    yield
    torch.set_default_dtype(dtype)
    torch.use_deterministic_algorithms(False)
