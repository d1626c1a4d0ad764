import numpy as np
import pytest

from drlfd.dataset import load_dataset, make_samples
from drlfd.synthgen import SynthConfig, gen_dataset


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """Three short synthetic trials on disk."""
    root = tmp_path_factory.mktemp("synth3")
    gen_dataset(SynthConfig(n_trials=3, cells_per_trial=(50, 54), seed=11), root)
    return root


@pytest.fixture(scope="session")
def small_trials(small_root):
    return load_dataset(small_root)


@pytest.fixture(scope="session")
def small_samples(small_trials):
    return [s for tr in small_trials for s in make_samples(tr, (32, 32), with_calib=True)]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
