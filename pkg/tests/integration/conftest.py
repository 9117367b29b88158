#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import pytest

from helpers import build_scenario
from vnetsim.config import SimScenario


@pytest.fixture
def quiet_net() -> SimScenario:
    """Lossless network whose delays never exceed the cycle window."""
    return build_scenario(p_loss=0.0, jitter_max_ms=200.0)


@pytest.fixture
def lossy_net() -> SimScenario:
    """Drops and wide jitter, so consensus is needed now and then."""
    return build_scenario(p_loss=0.2, jitter_std_ms=150.0)
