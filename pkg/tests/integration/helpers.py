import logging
from typing import Any

from vnetsim.config import ScenarioFormatter, ScriptAction, ScriptEntry, SimScenario
from vnetsim.metrics import Metrics

logger = logging.getLogger(__name__)

T0 = 1000.0
DELTA_T = 200.0
EVENTS = 60

SAFETY_KINDS = (
    "total_order",
    "state",
    "event_lambda",
    "omega",
    "gc",
    "state_sync",
    "integrity",
    "protocol",
)


def at_cycle(cycle: int) -> float:
    return T0 + cycle * DELTA_T


def build_scenario(script: list[ScriptEntry] | None = None, **overrides: Any) -> SimScenario:
    """Small scenario with a short gossip period, flat option names as overrides."""
    base = SimScenario(
        client_count=4,
        group_size=3,
        events_per_client=EVENTS,
        gc_period_ms=1000.0,
        script=script or [],
    )
    return ScenarioFormatter.apply(base, overrides)


def crash_leader_at(cycle: int) -> list[ScriptEntry]:
    return [ScriptEntry(action=ScriptAction.CRASH_LEADER, at_ms=at_cycle(cycle))]


def join_and_leave(join_cycle: int, leave_cycle: int) -> list[ScriptEntry]:
    return [
        ScriptEntry(action=ScriptAction.JOIN, at_ms=at_cycle(join_cycle), client="c010", notifier="c001"),
        ScriptEntry(action=ScriptAction.LEAVE, at_ms=at_cycle(leave_cycle), client="c002", notifier="c003"),
    ]


def safety_violations(metrics: Metrics) -> dict[str, int]:
    return {k: v for k, v in metrics.violations.items() if k in SAFETY_KINDS and v}


def assert_safe(metrics: Metrics) -> None:
    """No safety property was broken and the group survived."""
    broken = safety_violations(metrics)
    if broken:
        logger.error(f"Violations: {broken}")
    assert not broken
    assert not metrics.group_failed
