import numpy as np
import pytest

from tensor_autodiff import set_precision


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run toy-scale training runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: toy-scale training runs, skipped unless --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def float32_default():
    # some tests switch to float64; never leak that into the next test
    set_precision("float32")
    yield
    set_precision("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
