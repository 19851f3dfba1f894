import numpy as np
import pytest

import patchsim as ps
from patchsim import distort as dt


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    ps.synthesize_corpus(d, count=3, height=128, width=128, seed=9)
    return d


@pytest.fixture(scope="session")
def small_bank():
    return dt.sample_distortion_bank(8, 12, ps.Rng(42))


@pytest.fixture()
def rng_np():
    return np.random.default_rng(0)
