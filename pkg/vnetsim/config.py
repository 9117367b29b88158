#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Objects which abstract away scenario configuration and flat option names."""

import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import yaml
from pydantic import BaseModel, Field, root_validator, validator

from .models import LateEventMode, ScenarioError, Strategy

logger = logging.getLogger(__name__)

OPTION_TYPES = {str: "string", int: "int", float: "float", bool: "boolean"}


class NetModel(BaseModel):
    """One-way delay D_min + truncated-normal jitter, plus independent per-message loss."""

    d_min_ms: float = 50.0
    jitter_mean_ms: float = 50.0
    jitter_std_ms: float = 50.0
    jitter_max_ms: Optional[float] = None
    p_loss: float = 0.0

    @validator("p_loss")
    def _check_loss(cls, value: float) -> float:
        if not 0.0 <= value < 1.0:
            raise ValueError(f"p_loss must lie in [0, 1), got {value}")
        return value

    @validator("d_min_ms", "jitter_std_ms")
    def _check_non_negative(cls, value: float) -> float:
        if value < 0:
            raise ValueError("delays and deviations are non-negative")
        return value

    @validator("jitter_max_ms")
    def _check_cap(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 0:
            raise ValueError("jitter_max_ms must be positive when set")
        return value


class ChurnModel(BaseModel):
    """Weibull distributed replica session lengths."""

    enabled: bool = False
    session_mean_s: float = 1800.0
    shape: float = 0.5

    @validator("session_mean_s", "shape")
    def _check_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("session mean and shape must be positive")
        return value


class ClockModel(BaseModel):
    """Normal clock error of event senders; synchronization forces it to zero."""

    offset_std_ms: float = 0.0
    sync_enabled: bool = False


class TimingParams(BaseModel):
    """Cycle length and the network delay bounds it is derived from."""

    delta_t: float
    net_low: float
    net_high: float

    @root_validator(skip_on_failure=True)
    def _check_bounds(cls, values: dict) -> dict:
        delta_t, low, high = values["delta_t"], values["net_low"], values["net_high"]
        if delta_t <= 0 or abs(delta_t - (high - low)) > 1e-9:
            raise ValueError(
                f"cycle length {delta_t} must equal net_high - net_low = {high - low} and be positive"
            )
        return values


class ScriptAction(str, Enum):
    """Enum for scripted scenario actions."""

    JOIN = "join"
    LEAVE = "leave"
    CRASH_LEADER = "crash_leader"
    CRASH_REPLICA = "crash_replica"


class ScriptEntry(BaseModel):
    """A scripted neighbor change or fault injection."""

    action: ScriptAction
    at_ms: float
    client: Optional[str] = None
    notifier: Optional[str] = None
    replica: Optional[int] = None

    @root_validator(skip_on_failure=True)
    def _check_targets(cls, values: dict) -> dict:
        action = values["action"]
        if action in (ScriptAction.JOIN, ScriptAction.LEAVE) and not (
            values.get("client") and values.get("notifier")
        ):
            raise ValueError(f"{action.value} entries need both client and notifier")
        if action == ScriptAction.CRASH_REPLICA and values.get("replica") is None:
            raise ValueError("crash_replica entries need a replica id")
        return values


class SimScenario(BaseModel):
    """Everything that determines a simulated run."""

    seed: int = 0
    client_count: int = 10
    group_size: int = 5
    spare_count: int = 0
    cycle_ms: float = 200.0
    start_ms: float = 1000.0
    events_per_client: int = 1000
    strategy: Strategy = Strategy.FAST
    late_events: LateEventMode = LateEventMode.DYNAMIC
    net: NetModel = Field(default_factory=NetModel)
    churn: ChurnModel = Field(default_factory=ChurnModel)
    clock: ClockModel = Field(default_factory=ClockModel)
    gc_enabled: bool = True
    gc_period_ms: float = 5000.0
    update_timeout_ms: float = 5000.0
    join_lead_cycles: Optional[int] = None
    heartbeat_miss_limit: int = 1
    query_retry_cycles: int = 1
    rto_base_ms: float = 300.0
    rto_max_ms: float = 600.0
    rto_attempts: int = 12
    op_probability: float = 1.0
    sample_interval_ms: float = 1000.0
    max_sim_ms: Optional[float] = None
    script: list[ScriptEntry] = Field(default_factory=list)

    @validator("client_count", "group_size", "events_per_client", "heartbeat_miss_limit")
    def _check_positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("counts must be at least 1")
        return value

    @validator("gc_period_ms", "cycle_ms", "update_timeout_ms", "sample_interval_ms")
    def _check_periods(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("periods must be positive")
        return value

    @property
    def timing(self) -> TimingParams:
        """Cycle length with the network bounds D_min and D_min + dt."""
        return TimingParams(
            delta_t=self.cycle_ms,
            net_low=self.net.d_min_ms,
            net_high=self.net.d_min_ms + self.cycle_ms,
        )

    @property
    def join_lead(self) -> int:
        """Cycles between a notifier's event and the first cycle of a joining sender."""
        return self.join_lead_cycles or self.group_size

    def to_plain(self) -> dict[str, Any]:
        """JSON compatible dict, enums rendered as values."""
        return json.loads(self.json())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_plain(), sort_keys=False)

    @classmethod
    def from_yaml_text(cls, text: str) -> "SimScenario":
        """Parses a scenario from YAML text."""
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ScenarioError("scenario YAML must hold a mapping at top level")

        return cls.parse_obj(data)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "SimScenario":
        """Loads a scenario file."""
        return cls.from_yaml_text(Path(path).read_text())


class ConfigOption(BaseModel):
    """One flat option name and the scenario field it sets.

    `json_key` is the dotted path inside SimScenario, e.g. `net.p_loss`. Options
    that are not `configurable` are listed for reference but reject overrides.
    """

    json_key: str
    default: Any
    configurable: bool = True
    description: str = ""


class BaseConfigFormatter:
    """Maps flat option names, declared as `ConfigOption` class attributes, to nested fields.

        p_loss = ConfigOption(json_key="net.p_loss", default=0.0, description="...")
    """

    @classmethod
    def options(cls) -> dict[str, ConfigOption]:
        """Every declared option by flat name, subclasses overriding their bases."""
        return {
            name: value
            for klass in reversed(cls.__mro__)
            for name, value in vars(klass).items()
            if isinstance(value, ConfigOption)
        }

    @classmethod
    def option(cls, name: str) -> ConfigOption:
        try:
            return cls.options()[name]
        except KeyError:
            raise ScenarioError(f"unknown option {name!r}") from None

    @classmethod
    def to_dict(cls, overrides: dict[str, Any]) -> dict:
        """Expands flat overrides into a nested dict following the `json_key` paths."""
        ret: dict[str, Any] = {}
        for k, value in overrides.items():
            option = cls.option(k)

            if not option.configurable:
                logger.warning(f"Option {k} is not configurable, ignoring override")
                continue

            node = ret
            *parents, leaf = option.json_key.split(".")
            for parent in parents:
                node = node.setdefault(parent, {})
            node[leaf] = value

        return ret

    @classmethod
    def describe(cls) -> dict[str, Any]:
        """Template of the configurable options with default, type and scenario path."""
        described = {}
        for name, option in sorted(cls.options().items()):
            if not option.configurable:
                continue
            entry = {
                "default": option.default,
                "type": OPTION_TYPES.get(type(option.default), "string"),
                "path": option.json_key,
            }
            if option.description:
                entry["description"] = option.description
            described[name] = entry
        return {"options": described}


def _deep_merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ScenarioFormatter(BaseConfigFormatter):
    """Flat option names used by the command line and by experiment sweeps."""

    seed = ConfigOption(json_key="seed", default=0, description="Run seed")
    client_count = ConfigOption(
        json_key="client_count", default=10, description="Number of clients"
    )
    group_size = ConfigOption(json_key="group_size", default=5, description="Replica group size n")
    spare_count = ConfigOption(
        json_key="spare_count", default=0, description="Extra replicas e created on repair"
    )
    cycle_ms = ConfigOption(json_key="cycle_ms", default=200.0, description="Cycle length")
    events_per_client = ConfigOption(
        json_key="events_per_client", default=1000, description="Events each client sends"
    )
    strategy = ConfigOption(
        json_key="strategy", default="fast", description="Replication strategy"
    )
    late_events = ConfigOption(
        json_key="late_events", default="dynamic", description='"dynamic" or "simple_discard"'
    )
    d_min_ms = ConfigOption(json_key="net.d_min_ms", default=50.0, description="Minimum delay")
    jitter_mean_ms = ConfigOption(
        json_key="net.jitter_mean_ms", default=50.0, description="Jitter mean"
    )
    jitter_std_ms = ConfigOption(
        json_key="net.jitter_std_ms", default=50.0, description="Jitter standard deviation"
    )
    jitter_max_ms = ConfigOption(
        json_key="net.jitter_max_ms",
        default=None,
        description="Upper jitter bound, unbounded if unset",
    )
    p_loss = ConfigOption(json_key="net.p_loss", default=0.0, description="Per message drop rate")
    churn = ConfigOption(json_key="churn.enabled", default=False, description="Replica churn")
    session_mean_s = ConfigOption(
        json_key="churn.session_mean_s", default=1800.0, description="Mean replica session"
    )
    clock_offset_std_ms = ConfigOption(
        json_key="clock.offset_std_ms", default=0.0, description="Sender clock error deviation"
    )
    time_sync = ConfigOption(
        json_key="clock.sync_enabled", default=False, description="Synchronized sender clocks"
    )
    gc_enabled = ConfigOption(json_key="gc_enabled", default=True, description="Gossip GC")
    gc_cycle_ms = ConfigOption(
        json_key="gc_period_ms", default=5000.0, description="Gossip GC period"
    )
    update_timeout_ms = ConfigOption(
        json_key="update_timeout_ms", default=5000.0, description="Update loss timeout"
    )
    op_probability = ConfigOption(
        json_key="op_probability",
        default=1.0,
        description="Probability an event carries an operation",
    )
    start_ms = ConfigOption(
        json_key="start_ms", default=1000.0, configurable=False, description="First cycle time"
    )

    @classmethod
    def apply(cls, scenario: SimScenario, overrides: dict[str, Any]) -> SimScenario:
        """Returns a validated copy of `scenario` with flat `overrides` applied."""
        if not overrides:
            return scenario

        return SimScenario.parse_obj(_deep_merge(scenario.to_plain(), cls.to_dict(overrides)))
