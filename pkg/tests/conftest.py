import numpy as np
import pytest

from flownae import diffusion as dfn
from flownae import nn
from flownae.detector import train_detector
from flownae.flow_data import SynthSpec, holdout, split, synth_generate
from flownae.taxonomy import categorize


@pytest.fixture(scope="session")
def small_data():
    ds = synth_generate(SynthSpec(n_flows=3000, class_separation=5.0, independent_weight=0.9), seed=3)
    pool, test = holdout(ds, 0.2, seed=3)
    d1, d2 = split(pool, seed=3)
    return ds, d1, d2, test


@pytest.fixture(scope="session")
def small_det(small_data):
    _, d1, _, _ = small_data
    return train_detector(d1, cfg=nn.TrainConfig(seed=3))


@pytest.fixture(scope="session")
def small_dm(small_data):
    _, _, d2, _ = small_data
    return dfn.train_diffusion(d2, hidden=(64, 64), schedule=dfn.linear_schedule(40), iters=600, lr=2e-3, seed=3)


@pytest.fixture(scope="session")
def small_cat(small_data):
    return categorize(small_data[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
