import os

import pytest

# read by conic_nmf.config at import time
os.environ.setdefault("CONIC_NMF_LOG_FILE", "0")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow factorization tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
