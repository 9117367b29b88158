#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Discrete-event kernel, network transport and the sampling distributions."""

import heapq
import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Callable, Iterable, Optional, Protocol

import numpy as np
from scipy import special, stats
from tenacity import RetryCallState, stop_after_attempt, wait_exponential

from .config import ChurnModel, ClockModel, NetModel
from .helpers import RandomStreams
from .models import Address, Message, MessageKind

logger = logging.getLogger(__name__)

# Ordering of simultaneous occurrences: receive, then collect, then deliver, then timers.
RECEIVE, COLLECT, DELIVER, TIMER = range(4)


def sample_delay(net: NetModel, rng: np.random.Generator) -> float:
    """D_min plus normal jitter, resampled until it falls inside [0, jitter_max]."""
    if net.jitter_std_ms == 0:
        return net.d_min_ms + min(max(net.jitter_mean_ms, 0.0), net.jitter_max_ms or math.inf)

    cap = net.jitter_max_ms if net.jitter_max_ms is not None else math.inf
    while True:
        jitter = rng.normal(net.jitter_mean_ms, net.jitter_std_ms)
        if 0.0 <= jitter <= cap:
            return net.d_min_ms + jitter


def truncated_delay_mean(net: NetModel) -> float:
    """Analytic mean of `sample_delay`."""
    if net.jitter_std_ms == 0:
        return net.d_min_ms + max(net.jitter_mean_ms, 0.0)

    lower = (0.0 - net.jitter_mean_ms) / net.jitter_std_ms
    upper = (
        (net.jitter_max_ms - net.jitter_mean_ms) / net.jitter_std_ms
        if net.jitter_max_ms is not None
        else np.inf
    )
    return net.d_min_ms + float(
        stats.truncnorm.mean(lower, upper, loc=net.jitter_mean_ms, scale=net.jitter_std_ms)
    )


def weibull_scale(mean: float, shape: float) -> float:
    """Scale parameter giving a Weibull distribution the requested mean."""
    return mean / float(special.gamma(1.0 + 1.0 / shape))


def sample_session_ms(churn: ChurnModel, rng: np.random.Generator) -> float:
    scale = weibull_scale(churn.session_mean_s * 1000.0, churn.shape)
    return scale * float(rng.weibull(churn.shape))


def sample_clock_offset(clock: ClockModel, rng: np.random.Generator) -> float:
    """Sender clock error; exactly zero when clocks are synchronized."""
    if clock.sync_enabled or clock.offset_std_ms == 0:
        return 0.0
    return float(rng.normal(0.0, clock.offset_std_ms))


class Simulator:
    """Single-threaded virtual clock over a priority queue of timestamped callbacks."""

    def __init__(self, start: float = 0.0):
        self.now = start
        self._queue: list[tuple[float, int, int, Callable[..., Any], tuple]] = []
        self._counter = itertools.count()
        self._stopped = False
        self.processed = 0

    def schedule(
        self, at: float, callback: Callable[..., Any], *args: Any, priority: int = TIMER
    ) -> None:
        """Runs `callback(*args)` at `at`; ties break by priority, then insertion order."""
        heapq.heappush(
            self._queue, (max(at, self.now), priority, next(self._counter), callback, args)
        )

    def call_later(
        self, delay: float, callback: Callable[..., Any], *args: Any, priority: int = TIMER
    ) -> None:
        self.schedule(self.now + delay, callback, *args, priority=priority)

    def stop(self) -> None:
        self._stopped = True

    @property
    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: Optional[float] = None) -> float:
        """Processes callbacks in order until the queue drains, `until` passes or `stop()`."""
        self._stopped = False
        while self._queue and not self._stopped:
            at = self._queue[0][0]
            if until is not None and at > until:
                self.now = until
                break

            at, _, _, callback, args = heapq.heappop(self._queue)
            self.now = at
            callback(*args)
            self.processed += 1

        return self.now


class RetransmitPolicy:
    """Retransmission timeouts of the reliable channel.

    Expressed with tenacity's wait/stop strategies, evaluated against the attempt
    number instead of sleeping on the wall clock.
    """

    def __init__(self, base_ms: float, max_ms: float, attempts: int):
        self.wait = wait_exponential(multiplier=base_ms, max=max_ms)
        self.stop = stop_after_attempt(attempts)

    def _state(self, attempt: int) -> RetryCallState:
        state = RetryCallState(retry_object=None, fn=None, args=(), kwargs={})
        state.attempt_number = attempt
        return state

    def timeout(self, attempt: int) -> float:
        """Time to wait for an acknowledgment of attempt `attempt` (1-based)."""
        return float(self.wait(self._state(attempt)))

    def exhausted(self, attempt: int) -> bool:
        return bool(self.stop(self._state(attempt)))


class Endpoint(Protocol):
    address: Address
    alive: bool

    def receive(self, msg: Message) -> None: ...


@dataclass
class _ReliableSend:
    msg: Message
    still_wanted: Optional[Callable[[], bool]]
    on_delivered: Optional[Callable[[float], None]]
    sent_at: float
    acked: bool = False
    delivered: bool = False
    attempt: int = 0


class Transport:
    """Simulated links between actors.

    Plain sends are fire-and-forget. Reliable sends retransmit on the policy timeout
    until acknowledged, until the sender stops wanting the peer, or until the policy
    gives up. Links touching a fixed endpoint (the Rendezvous) never drop and always
    take D_min.
    """

    def __init__(
        self,
        sim: Simulator,
        net: NetModel,
        streams: RandomStreams,
        policy: RetransmitPolicy,
        fixed: Iterable[Address] = (),
    ):
        self.sim = sim
        self.net = net
        self.streams = streams
        self.policy = policy
        self.fixed = set(fixed)
        self.endpoints: dict[Address, Endpoint] = {}
        self.counters: Counter = Counter()
        self._ids = itertools.count(1)

    def register(self, endpoint: Endpoint) -> None:
        self.endpoints[endpoint.address] = endpoint

    def is_alive(self, address: Address) -> bool:
        endpoint = self.endpoints.get(address)
        return bool(endpoint and endpoint.alive)

    def _link(self, src: Address, dst: Address) -> tuple[bool, float]:
        """(dropped, delay) for one transmission from `src` to `dst`."""
        if src == dst:
            return False, 0.0

        if src in self.fixed or dst in self.fixed:
            return False, self.net.d_min_ms

        dropped = (
            self.net.p_loss > 0 and self.streams.stream(src, "drop").random() < self.net.p_loss
        )
        return dropped, sample_delay(self.net, self.streams.stream(src, "delay"))

    def _stamp(self, msg: Message) -> Message:
        return replace(msg, msg_id=next(self._ids))

    def send(self, msg: Message) -> bool:
        """Unreliable send. Returns False if the message was dropped."""
        if not self.is_alive(msg.src):
            return False

        msg = self._stamp(msg)
        self.counters[msg.kind.value] += 1
        dropped, delay = self._link(msg.src, msg.dst)
        if dropped:
            self.counters["dropped"] += 1
            return False

        self.sim.schedule(self.sim.now + delay, self._deliver, msg, priority=RECEIVE)
        return True

    def multicast(
        self, kind: MessageKind, src: Address, dsts: Iterable[Address], body: Any = None, **kw
    ) -> None:
        for dst in dsts:
            self.send(Message(kind=kind, src=src, dst=dst, body=body, **kw))

    def _deliver(self, msg: Message) -> None:
        endpoint = self.endpoints.get(msg.dst)
        if endpoint is None or not endpoint.alive:
            self.counters["to_dead"] += 1
            return
        endpoint.receive(msg)

    def send_reliable(
        self,
        msg: Message,
        still_wanted: Optional[Callable[[], bool]] = None,
        on_delivered: Optional[Callable[[float], None]] = None,
    ) -> None:
        """Reliable point-to-point send with acknowledgments and retransmission."""
        if not self.is_alive(msg.src):
            return

        state = _ReliableSend(
            msg=self._stamp(msg),
            still_wanted=still_wanted,
            on_delivered=on_delivered,
            sent_at=self.sim.now,
        )
        self.counters[msg.kind.value] += 1
        self._attempt(state)

    def multicast_reliable(
        self,
        kind: MessageKind,
        src: Address,
        dsts: Iterable[Address],
        body: Any = None,
        still_wanted: Optional[Callable[[Address], bool]] = None,
        on_delivered: Optional[Callable[[Address, float], None]] = None,
        **kw,
    ) -> None:
        for dst in dsts:
            self.send_reliable(
                Message(kind=kind, src=src, dst=dst, body=body, **kw),
                still_wanted=(lambda d=dst: still_wanted(d)) if still_wanted else None,
                on_delivered=(lambda t, d=dst: on_delivered(d, t)) if on_delivered else None,
            )

    def _attempt(self, state: _ReliableSend) -> None:
        msg = state.msg
        if state.acked or not self.is_alive(msg.src):
            return

        if state.still_wanted is not None and not state.still_wanted():
            self.counters["given_up"] += 1
            return

        state.attempt += 1
        if state.attempt > 1:
            self.counters["retransmissions"] += 1

        dropped, delay = self._link(msg.src, msg.dst)
        if dropped:
            self.counters["dropped"] += 1
        else:
            self.sim.schedule(
                self.sim.now + delay, self._deliver_reliable, state, priority=RECEIVE
            )

        if msg.src != msg.dst:
            self.sim.call_later(self.policy.timeout(state.attempt), self._check_ack, state)

    def _check_ack(self, state: _ReliableSend) -> None:
        if state.acked:
            return

        if self.policy.exhausted(state.attempt):
            self.counters["abandoned"] += 1
            logger.warning(
                f"Reliable {state.msg.kind.value} {state.msg.src}->{state.msg.dst} abandoned after {state.attempt} attempts"
            )
            return

        self._attempt(state)

    def _deliver_reliable(self, state: _ReliableSend) -> None:
        msg = state.msg
        endpoint = self.endpoints.get(msg.dst)
        if endpoint is None or not endpoint.alive:
            self.counters["to_dead"] += 1
            return

        # Copies of one send share its state, which goes away with the last copy.
        if not state.delivered:
            state.delivered = True
            if state.on_delivered is not None:
                state.on_delivered(self.sim.now - state.sent_at)
            endpoint.receive(msg)
        else:
            self.counters["duplicates"] += 1

        if msg.src == msg.dst:
            state.acked = True
            return

        dropped, delay = self._link(msg.dst, msg.src)
        if not dropped:
            self.sim.schedule(self.sim.now + delay, self._ack, state, priority=RECEIVE)

    @staticmethod
    def _ack(state: _ReliableSend) -> None:
        state.acked = True
