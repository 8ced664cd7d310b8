import math

import pytest

from czlab import measure as M
from czlab import operator as O

CANTOR_DIM = math.log(2) / math.log(3)


def sign_kernel(m, s):
    return O.sign_power_kernel(s, 1.0, M.calibrate_dominating(m, s))


@pytest.fixture(scope="session")
def uniform256():
    return M.uniform_1d(256)


@pytest.fixture(scope="session")
def cantor6():
    return M.cantor_third(6)


@pytest.fixture(scope="session")
def uniform16():
    return M.uniform_1d(16)
