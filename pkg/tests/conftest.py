import numpy as np
import pytest

from egt.divergence import builtin_generator
from egt.grid import warmup_target


@pytest.fixture(scope="session")
def js2():
    return builtin_generator("js")


@pytest.fixture(scope="session")
def warmup():
    return warmup_target()


@pytest.fixture
def rng():
    def make(seed: int) -> np.random.Generator:
        return np.random.default_rng(seed)

    return make
