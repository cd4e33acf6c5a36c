import pytest

from ratchetlab.crypto_core import SeededTestRandom
from ratchetlab.server import LogicalClock, Server


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: runs the full-size seeded simulation")


@pytest.fixture
def rng():
    return SeededTestRandom(1234)


@pytest.fixture
def clock():
    return LogicalClock()


@pytest.fixture
def server(clock):
    return Server(clock)
