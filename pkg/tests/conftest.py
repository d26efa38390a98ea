import numpy as np
import pytest

from edtorus.fields import ExponentTable, SpinStructure, TorusGrid


@pytest.fixture(scope="session")
def exps():
    return ExponentTable(3)


@pytest.fixture(scope="session")
def spin():
    return SpinStructure()


@pytest.fixture
def rng():
    return np.random.default_rng(1729)


@pytest.fixture(scope="session")
def grid6():
    return TorusGrid(6)


@pytest.fixture(scope="session")
def grid8():
    return TorusGrid(8)
