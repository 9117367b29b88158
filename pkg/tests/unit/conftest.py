#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import pytest

from factories import make_record
from vnetsim.config import SimScenario, TimingParams
from vnetsim.core import CycleClock, DeliveryQueue
from vnetsim.delivery import CycleDelivery, SenderTable
from vnetsim.membership import GroupState
from vnetsim.metrics import Metrics


@pytest.fixture()
def timing() -> TimingParams:
    return TimingParams(delta_t=200.0, net_low=50.0, net_high=250.0)


@pytest.fixture()
def clock() -> CycleClock:
    return CycleClock(cycle_length_ms=200.0, first_cycle_time=1000.0)


@pytest.fixture()
def scenario() -> SimScenario:
    return SimScenario(client_count=3, group_size=3, events_per_client=20)


@pytest.fixture()
def senders() -> SenderTable:
    """Two senders, both contributing from cycle 0."""
    return SenderTable([make_record("a"), make_record("b")])


@pytest.fixture()
def engine(clock: CycleClock, senders: SenderTable, mocker) -> CycleDelivery:
    return CycleDelivery(clock, senders, DeliveryQueue(), on_query=mocker.Mock())


@pytest.fixture()
def group() -> GroupState:
    return GroupState(
        members=frozenset({0, 1, 2}),
        live=frozenset({0, 1, 2}),
        leader=0,
        ages={0: 0, 1: 0, 2: 0},
        min_size=3,
    )


@pytest.fixture()
def host(mocker, group: GroupState):
    """Stand-in for the replica that owns a coordinator, collector or membership manager."""
    host = mocker.MagicMock()
    host.replica_id = 0
    host.now = 1000.0
    host.group = group
    host.is_leader = True
    host.is_member = True
    host.consensus_only = False
    host.initialized = True
    host.metrics = Metrics(strategy="fast")
    host.queue = DeliveryQueue()
    host.engine.cycle = 0
    return host
