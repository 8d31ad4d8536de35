import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from npdid.simulation import SetupSpec, gen_setup


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture(scope="session")
def setup_a_small():
    return gen_setup(SetupSpec(id="A", n=400, d=5, seed=11))


@pytest.fixture(scope="session")
def setup_a_noiseless():
    return gen_setup(SetupSpec(id="A", n=400, d=5, seed=12), noise_sd=0.0)
