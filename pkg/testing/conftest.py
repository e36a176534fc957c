#!/usr/bin/env python3
"""
Shared pytest setup
- --runslow enables acceptance-scale tests marked @pytest.mark.slow
- small fixtures reused across module tests
"""

import numpy as np
import pytest

from core.schedules import NoiseSchedule


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def schedule():
    return NoiseSchedule(0.1, 1.0, 1.0)

