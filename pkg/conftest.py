"""
Shared fixtures for the peernet test suite.
"""

import logging

import numpy as np
import pytest
import scipy.sparse as sp

from peernet.models import DgpConfig, StructuralParams
from peernet.netgraph import SchoolNetwork


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the Monte Carlo acceptance checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: Monte Carlo checks that take minutes")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_package_logger():
    """The CLI installs its own handlers; give every test a propagating package logger."""
    yield
    logger = logging.getLogger("peernet")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def chain_net():
    """Chain i1 -> i3 -> i4 -> i2; i2 nominates nobody."""
    return SchoolNetwork.from_edges("chain", ["i1", "i2", "i3", "i4"], ["i1", "i3", "i4"], ["i3", "i4", "i2"])


@pytest.fixture
def chain_star_net():
    """The chain of chain_net plus i5 -> i7 and i6 -> i7."""
    nodes = [f"i{k}" for k in range(1, 8)]
    return SchoolNetwork.from_edges(
        "chain_star", nodes, ["i1", "i3", "i4", "i5", "i6"], ["i3", "i4", "i2", "i7", "i7"]
    )


@pytest.fixture
def random_net():
    """Factory for Erdos-Renyi directed networks."""

    def make(n, p, seed, school_id="0"):
        rng = np.random.default_rng(seed)
        A = (rng.random((n, n)) < p).astype(float)
        np.fill_diagonal(A, 0.0)
        return SchoolNetwork(school_id=school_id, adjacency=sp.csr_matrix(A))

    return make


@pytest.fixture
def params():
    return StructuralParams(**{
        "lambda": 0.5, "beta": [1.0, -0.5], "gamma": [0.8, 0.3], "delta": 1.2, "theta": [0.2, 0.1],
        "sigma_eta2": 2.0, "sigma_eps2": 1.5, "rho": 0.3,
    })


@pytest.fixture
def small_dgp():
    return DgpConfig(n_schools=8, school_size=30, replications=2, master_seed=11, variant="C")
