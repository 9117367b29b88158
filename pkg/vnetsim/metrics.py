#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Run metrics and the closed-form predictions they are compared against."""

import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .models import Strategy

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    """Everything measured during one simulated run."""

    strategy: str
    events_sent: int = 0
    updates_delivered: int = 0
    latencies_ms: list[float] = field(default_factory=list)
    consensus_cycles: set[int] = field(default_factory=set)
    delivered_cycles: set[int] = field(default_factory=set)
    instances: int = 0
    instance_durations_ms: list[float] = field(default_factory=list)
    multicast_ms: list[float] = field(default_factory=list)
    sync_delays_ms: list[float] = field(default_factory=list)
    # (time, replica, |Q_d|)
    qd_samples: list[tuple[float, int, int]] = field(default_factory=list)
    elections: int = 0
    election_durations_ms: list[float] = field(default_factory=list)
    reconfigurations: int = 0
    reconfig_durations_ms: list[float] = field(default_factory=list)
    replicas_created: int = 0
    replica_failures: int = 0
    group_failed: bool = False
    divergences: int = 0
    pb_primary_applied: int = 0
    noop_leaves: int = 0
    joins: int = 0
    unknown_discards: int = 0
    late_discards: int = 0
    violations: dict[str, int] = field(default_factory=dict)
    leader_agreement: Optional[bool] = None
    messages: dict[str, int] = field(default_factory=dict)
    end_ms: float = 0.0

    @property
    def delivery_rate(self) -> float:
        if not self.events_sent:
            return 0.0
        return min(1.0, self.updates_delivered / self.events_sent)

    @property
    def loss_rate(self) -> float:
        return 1.0 - self.delivery_rate if self.events_sent else 0.0

    @property
    def p_sync(self) -> float:
        """Share of delivered cycles that needed consensus somewhere in the group."""
        if not self.delivered_cycles:
            return 0.0
        return len(self.consensus_cycles & self.delivered_cycles) / len(self.delivered_cycles)

    @property
    def latency_mean_ms(self) -> float:
        return float(np.mean(self.latencies_ms)) if self.latencies_ms else float("nan")

    @property
    def latency_p95_ms(self) -> float:
        return float(np.percentile(self.latencies_ms, 95)) if self.latencies_ms else float("nan")

    @property
    def d_m_ms(self) -> float:
        """Mean completion time of the reliable decision multicast."""
        return float(np.mean(self.multicast_ms)) if self.multicast_ms else 0.0

    @property
    def d_c_ms(self) -> float:
        """Mean proposal collection time of a consensus instance."""
        if not self.instance_durations_ms:
            return 0.0
        return max(0.0, float(np.mean(self.instance_durations_ms)) - self.d_m_ms)

    @property
    def sync_delay_ms(self) -> float:
        return float(np.mean(self.sync_delays_ms)) if self.sync_delays_ms else 0.0

    @property
    def qd_max(self) -> int:
        return max((size for _, _, size in self.qd_samples), default=0)

    @property
    def qd_mean(self) -> float:
        return float(np.mean([size for _, _, size in self.qd_samples])) if self.qd_samples else 0.0

    @property
    def qd_final(self) -> int:
        if not self.qd_samples:
            return 0
        last = self.qd_samples[-1][0]
        return max(size for t, _, size in self.qd_samples if t == last)

    @property
    def violation_count(self) -> int:
        return sum(self.violations.values())

    def summary(self) -> dict[str, Any]:
        """One flat result row."""
        return {
            "strategy": self.strategy,
            "events_sent": self.events_sent,
            "updates_delivered": self.updates_delivered,
            "delivery_rate": self.delivery_rate,
            "latency_mean_ms": self.latency_mean_ms,
            "latency_p95_ms": self.latency_p95_ms,
            "sync_delay_ms": self.sync_delay_ms,
            "p_sync": self.p_sync,
            "consensus_triggers": len(self.consensus_cycles),
            "instances": self.instances,
            "d_c_ms": self.d_c_ms,
            "d_m_ms": self.d_m_ms,
            "qd_mean": self.qd_mean,
            "qd_max": self.qd_max,
            "qd_final": self.qd_final,
            "elections": self.elections,
            "reconfigurations": self.reconfigurations,
            "replicas_created": self.replicas_created,
            "replica_failures": self.replica_failures,
            "group_failed": self.group_failed,
            "divergences": self.divergences,
            "violations": self.violation_count,
            "late_discards": self.late_discards,
            "unknown_discards": self.unknown_discards,
            "end_ms": self.end_ms,
        }


@dataclass(frozen=True)
class ClosedForm:
    """Predicted synchronization delay and update loss rate of one approach."""

    sync_delay_ms: float
    loss_rate: float

    @property
    def delivery_rate(self) -> float:
        return 1.0 - self.loss_rate


def replicated_loss(p_loss: float, n: int) -> float:
    """An update is lost when all n inbound or all n outbound copies are."""
    all_lost = p_loss**n
    return all_lost + (1.0 - all_lost) * all_lost


def single_path_loss(p_loss: float) -> float:
    return p_loss + (1.0 - p_loss) * p_loss


def closed_form(
    approach: Strategy | str,
    n: int,
    p_loss: float,
    d_c: float = 0.0,
    d_m: float = 0.0,
    p_sync: float = 0.0,
) -> ClosedForm:
    """Synchronization delay and update loss rate predicted for `approach`."""
    if not 0.0 <= p_loss <= 1.0:
        raise ValueError(f"p_loss must lie in [0, 1], got {p_loss}")
    if n < 1:
        raise ValueError("a group has at least one replica")

    strategy = Strategy(approach)
    if strategy == Strategy.FAST:
        return ClosedForm((d_c + 2 * d_m) * p_sync, replicated_loss(p_loss, n))
    if strategy == Strategy.CONSENSUS:
        return ClosedForm(d_c + 2 * d_m, replicated_loss(p_loss, n))
    if strategy == Strategy.RELIABLE_PRIMARY_BACKUP:
        return ClosedForm(d_c + d_m, single_path_loss(p_loss))
    return ClosedForm(0.0, single_path_loss(p_loss))
