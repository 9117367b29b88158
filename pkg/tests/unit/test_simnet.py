#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import logging
from dataclasses import dataclass, field

import numpy as np
import pytest

from vnetsim.config import ChurnModel, ClockModel, NetModel
from vnetsim.helpers import RandomStreams
from vnetsim.models import Message, MessageKind
from vnetsim.simnet import (
    RECEIVE,
    TIMER,
    RetransmitPolicy,
    Simulator,
    Transport,
    sample_clock_offset,
    sample_delay,
    sample_session_ms,
    truncated_delay_mean,
    weibull_scale,
)

logger = logging.getLogger(__name__)


@dataclass
class Inbox:
    address: str
    alive: bool = True
    received: list[Message] = field(default_factory=list)

    def receive(self, msg: Message) -> None:
        self.received.append(msg)


def make_transport(net: NetModel, fixed=()) -> tuple[Simulator, Transport, Inbox, Inbox]:
    sim = Simulator()
    transport = Transport(sim, net, RandomStreams(7), RetransmitPolicy(300.0, 3000.0, 30), fixed=fixed)
    a, b = Inbox("a"), Inbox("b")
    transport.register(a)
    transport.register(b)
    return sim, transport, a, b


def test_degenerate_jitter_gives_a_fixed_delay() -> None:
    # Given
    net = NetModel(d_min_ms=50.0, jitter_mean_ms=50.0, jitter_std_ms=0.0)
    rng = np.random.default_rng(0)

    # Then
    assert {sample_delay(net, rng) for _ in range(10)} == {100.0}
    assert truncated_delay_mean(net) == 100.0


def test_sampled_delay_matches_the_truncated_mean() -> None:
    # Given
    net = NetModel(d_min_ms=50.0, jitter_mean_ms=50.0, jitter_std_ms=50.0)
    rng = np.random.default_rng(11)

    # When
    samples = np.array([sample_delay(net, rng) for _ in range(100_000)])

    # Then
    assert samples.min() >= 50.0
    assert abs(samples.mean() - truncated_delay_mean(net)) / truncated_delay_mean(net) < 0.03


def test_jitter_cap_bounds_every_delay() -> None:
    # Given
    net = NetModel(jitter_std_ms=150.0, jitter_max_ms=200.0)
    rng = np.random.default_rng(2)

    # Then
    assert max(sample_delay(net, rng) for _ in range(5000)) <= 250.0


def test_session_lengths_follow_the_requested_mean() -> None:
    # Given
    churn = ChurnModel(enabled=True, session_mean_s=20.0, shape=0.5)
    rng = np.random.default_rng(5)

    # When
    samples = np.array([sample_session_ms(churn, rng) for _ in range(100_000)])

    # Then
    assert weibull_scale(20000.0, 0.5) == pytest.approx(10000.0)
    assert (samples > 0).all()
    assert samples.mean() == pytest.approx(20000.0, rel=0.05)


def test_synchronized_clocks_have_no_offset() -> None:
    # Given
    rng = np.random.default_rng(0)

    # Then
    assert sample_clock_offset(ClockModel(offset_std_ms=400.0, sync_enabled=True), rng) == 0.0
    assert sample_clock_offset(ClockModel(offset_std_ms=400.0), rng) != 0.0


def test_simulator_orders_by_time_priority_and_insertion() -> None:
    # Given
    sim = Simulator()
    seen = []

    sim.schedule(10.0, seen.append, "timer", priority=TIMER)
    sim.schedule(10.0, seen.append, "receive-1", priority=RECEIVE)
    sim.schedule(10.0, seen.append, "receive-2", priority=RECEIVE)
    sim.schedule(5.0, seen.append, "early")
    sim.schedule(50.0, seen.append, "late")

    # When
    now = sim.run(until=20.0)

    # Then
    assert seen == ["early", "receive-1", "receive-2", "timer"]
    assert now == 20.0
    assert sim.pending == 1


def test_retransmission_timeouts_back_off() -> None:
    # Given
    policy = RetransmitPolicy(300.0, 3000.0, 12)

    # Then
    assert [policy.timeout(n) for n in range(1, 6)] == [300.0, 600.0, 1200.0, 2400.0, 3000.0]
    assert not policy.exhausted(11)
    assert policy.exhausted(12)


def test_unreliable_sends_drop_at_the_configured_rate() -> None:
    # Given
    sim, transport, a, b = make_transport(NetModel(jitter_std_ms=0.0, p_loss=0.3))

    # When
    for _ in range(10_000):
        transport.send(Message(MessageKind.EVENT, "a", "b"))
    sim.run()

    # Then
    assert len(b.received) / 10_000 == pytest.approx(0.7, abs=0.02)
    assert transport.counters["dropped"] == 10_000 - len(b.received)


def test_reliable_send_delivers_once_despite_loss() -> None:
    # Given
    sim, transport, a, b = make_transport(NetModel(jitter_std_ms=0.0, p_loss=0.5))
    delivered = []

    # When
    for n in range(20):
        transport.send_reliable(Message(MessageKind.DECISION, "a", "b", n), on_delivered=delivered.append)
    sim.run()

    # Then
    assert sorted(m.body for m in b.received) == list(range(20))
    assert len(delivered) == 20
    assert min(delivered) >= 100.0


def test_reliable_send_gives_up_on_unwanted_peers() -> None:
    # Given
    sim, transport, a, b = make_transport(NetModel(jitter_std_ms=0.0))

    # When
    transport.send_reliable(Message(MessageKind.DECISION, "a", "b"), still_wanted=lambda: False)
    sim.run()

    # Then
    assert transport.counters["given_up"] == 1
    assert b.received == []


def test_fixed_links_never_drop() -> None:
    # Given
    sim, transport, a, b = make_transport(NetModel(p_loss=0.9), fixed=("b",))

    # When
    for _ in range(100):
        transport.send(Message(MessageKind.HEARTBEAT, "a", "b"))
    sim.run()

    # Then
    assert len(b.received) == 100
    assert sim.now == 50.0


def test_messages_to_crashed_endpoints_vanish() -> None:
    # Given
    sim, transport, a, b = make_transport(NetModel(jitter_std_ms=0.0))
    transport.send(Message(MessageKind.EVENT, "a", "b"))
    b.alive = False

    # When
    sim.run()

    # Then
    assert b.received == []
    assert transport.counters["to_dead"] == 1


def test_retransmitted_copies_are_delivered_once() -> None:
    # Given
    sim, transport, a, b = make_transport(NetModel(jitter_std_ms=0.0, p_loss=0.5))

    # When
    for n in range(50):
        transport.send_reliable(Message(MessageKind.DECISION, "a", "b", n))
    sim.run()

    # Then
    assert sorted(m.body for m in b.received) == list(range(50))
    assert transport.counters["duplicates"] > 0
