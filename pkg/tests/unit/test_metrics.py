#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import logging
import math

import pytest

from vnetsim.metrics import Metrics, closed_form, replicated_loss, single_path_loss
from vnetsim.models import Strategy

logger = logging.getLogger(__name__)


def test_fast_loss_needs_every_copy_lost() -> None:
    # When
    prediction = closed_form(Strategy.FAST, 5, 0.5)

    # Then
    assert prediction.loss_rate == pytest.approx(0.03125 + 0.96875 * 0.03125)
    assert prediction.loss_rate == pytest.approx(0.06152, abs=1e-5)


def test_primary_backup_loss_is_single_path() -> None:
    # When
    prediction = closed_form("primary_backup", 5, 0.3)

    # Then
    assert prediction.loss_rate == pytest.approx(0.51)
    assert prediction.delivery_rate == pytest.approx(0.49)
    assert prediction.sync_delay_ms == 0.0


@pytest.mark.parametrize(
    "strategy,expected",
    [
        (Strategy.FAST, (20.0 + 2 * 30.0) * 0.25),
        (Strategy.CONSENSUS, 20.0 + 2 * 30.0),
        (Strategy.RELIABLE_PRIMARY_BACKUP, 20.0 + 30.0),
        (Strategy.PRIMARY_BACKUP, 0.0),
    ],
)
def test_sync_delay_rows(strategy: Strategy, expected: float) -> None:
    assert closed_form(strategy, 5, 0.0, d_c=20.0, d_m=30.0, p_sync=0.25).sync_delay_ms == expected


def test_fast_without_consensus_has_no_sync_delay() -> None:
    assert closed_form(Strategy.FAST, 5, 0.0, d_c=20.0, d_m=30.0, p_sync=0.0).sync_delay_ms == 0.0


def test_replication_always_beats_a_single_path() -> None:
    for step in range(1, 100):
        for n in range(2, 11):
            assert replicated_loss(step / 100, n) < single_path_loss(step / 100)


def test_closed_form_rejects_bad_inputs() -> None:
    with pytest.raises(ValueError):
        closed_form(Strategy.FAST, 5, 1.5)
    with pytest.raises(ValueError):
        closed_form(Strategy.FAST, 0, 0.1)


def test_derived_rates() -> None:
    # Given
    metrics = Metrics(
        strategy="fast",
        events_sent=10,
        updates_delivered=8,
        latencies_ms=[100.0, 200.0, 300.0],
        delivered_cycles={1, 2, 3, 4},
        consensus_cycles={2, 9},
        instance_durations_ms=[90.0, 110.0],
        multicast_ms=[40.0],
        qd_samples=[(0.0, 0, 3), (1.0, 0, 7), (1.0, 1, 5)],
        violations={"gc": 1, "omega": 2},
    )

    # Then
    assert metrics.delivery_rate == pytest.approx(0.8)
    assert metrics.loss_rate == pytest.approx(0.2)
    assert metrics.p_sync == pytest.approx(0.25)
    assert metrics.latency_mean_ms == pytest.approx(200.0)
    assert metrics.d_m_ms == 40.0
    assert metrics.d_c_ms == 60.0
    assert (metrics.qd_max, metrics.qd_final) == (7, 7)
    assert metrics.violation_count == 3


def test_empty_metrics_are_well_defined() -> None:
    # Given
    metrics = Metrics(strategy="fast")

    # Then
    assert metrics.delivery_rate == 0.0
    assert metrics.p_sync == 0.0
    assert math.isnan(metrics.latency_mean_ms)
    assert metrics.summary()["events_sent"] == 0
