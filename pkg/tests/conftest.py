import pytest

from hoifkit.model import make_functional
from hoifkit.sim import make_rng, random_discrete_truth


@pytest.fixture
def spec_1b():
    return make_functional("ExpCondCov1b")


@pytest.fixture
def small_truth():
    return random_discrete_truth(make_rng(11), G=4)
