import numpy as np
import pytest

from armor.selfcheck import random_problem, random_state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def instance(rng):
    """Random 8x8 state with block size 4 plus a matching target and calibration."""
    st = random_state(rng, 8, 8, 4)
    w_bar, d = random_problem(rng, 8, 8)
    return st, w_bar, d
