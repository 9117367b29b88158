#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Replica-group event synchronization for peer-to-peer virtual worlds, on a simulated network."""

__all__ = [
    "BaseConfigFormatter",
    "BaseReplica",
    "ConfigOption",
    "ExperimentPlan",
    "Metrics",
    "Replica",
    "ScenarioFormatter",
    "SimScenario",
    "closed_form",
    "run",
    "run_plan",
]

from .base import BaseReplica
from .config import BaseConfigFormatter, ConfigOption, ScenarioFormatter, SimScenario
from .experiments import ExperimentPlan, run_plan
from .metrics import Metrics, closed_form
from .replica import Replica
from .runner import run
