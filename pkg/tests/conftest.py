"""Shared compact fixtures for the test suite."""

import numpy as np
import pytest

from chainfit.nma import ENMConfig, chain_bases
from chainfit.toy import toy_structure


@pytest.fixture(scope="session")
def two_chain():
    """Small two-chain Calpha structure reused across module tests."""
    return toy_structure((12, 10), seed=2)


@pytest.fixture(scope="session")
def two_chain_bases(two_chain):
    return chain_bases(two_chain, ENMConfig(num_modes=5))


@pytest.fixture(scope="session")
def rng_factory():
    def make(seed):
        return np.random.default_rng(seed)

    return make
