#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Event senders, update broadcast and neighbor join/leave handling."""

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional, Protocol

from .base import BaseActor
from .codec import decode_operation, encode_operation
from .config import SimScenario
from .core import CycleClock
from .delivery import SenderRecord, SenderTable, schedule
from .helpers import RandomStreams
from .models import (
    ControlKind,
    ControlOp,
    Event,
    Message,
    MessageKind,
    Payload,
    ReplicaId,
    SenderId,
)
from .simnet import Simulator, Transport, sample_clock_offset

if TYPE_CHECKING:
    from .observer import GlobalObserver

logger = logging.getLogger(__name__)

WORKLOAD_BYTES = 8

# (lambda, sender, seq, state digest) of one applied operation.
UpdateEntry = tuple[int, SenderId, int, bytes]


@dataclass
class InteractionState:
    """Sender set S, recipient set U and the objects this group holds authoritatively."""

    senders: SenderTable = field(default_factory=SenderTable)
    recipients: dict[SenderId, int] = field(default_factory=dict)
    authoritative: set[SenderId] = field(default_factory=set)

    def copy(self) -> "InteractionState":
        return InteractionState(
            self.senders.copy(), dict(self.recipients), set(self.authoritative)
        )


class UpdateSink(Protocol):
    def send(self, kind: MessageKind, dst, body=None, **kw) -> None: ...


def join_start_time(t_recv_notifier: float, lead_cycles: int, delta_t: float) -> float:
    """t_start,k = t_recv,j(y) + n * dt."""
    return t_recv_notifier + lead_cycles * delta_t


def first_event_cycle(t_recv_first: float, t_now: float, cycle: int, delta_t: float) -> int:
    """c_k = ceil((t_recv,k(1) - t_now) / dt) + c."""
    return math.ceil(round((t_recv_first - t_now) / delta_t, 9)) + cycle


def neighbor_join(
    state: InteractionState,
    clock: CycleClock,
    scenario: SimScenario,
    cycle: int,
    notifier_event: Event,
    control: ControlOp,
) -> Optional[SenderRecord]:
    """Adds the joining client to S and U; returns its record, None for a repeated join."""
    notifier = state.senders.get(notifier_event.sender)
    delta_t = clock.cycle_length_ms
    if notifier is None:
        t_recv_notifier = clock.deadline(cycle)
    else:
        t_recv_notifier = schedule(notifier.t_start, notifier_event.seq + 1, scenario.timing)[1]

    t_start = join_start_time(t_recv_notifier, scenario.join_lead, delta_t)
    first_cycle = first_event_cycle(t_start + delta_t, clock.deadline(cycle), cycle, delta_t)
    if first_cycle <= cycle:
        first_cycle = cycle + 1
        t_start = clock.start_of(first_cycle)

    record = SenderRecord(id=control.client, t_start=t_start, first_cycle=first_cycle)
    if not state.senders.add(record):
        logger.debug(f"Repeated ADD_NEIGHBOR for {control.client} ignored")
        return None

    state.recipients[control.client] = control.group
    logger.info(
        f"{control.client} joins at cycle {first_cycle} (t_start {t_start:.0f} ms), announced at cycle {cycle}"
    )
    return record


def neighbor_leave(state: InteractionState, cycle: int, control: ControlOp) -> bool:
    """Retires the client after `cycle`. False when it is not an active sender."""
    if not state.senders.retire(control.client, cycle):
        logger.debug(f"RM_NEIGHBOR for unknown or retired {control.client} ignored")
        return False

    logger.info(f"{control.client} leaves after cycle {cycle}")
    return True


def drop_retired(state: InteractionState, cycle: int) -> list[SenderId]:
    """Removes from U the senders whose last cycle was `cycle`."""
    gone = [
        r.id for r in state.senders if r.last_cycle is not None and r.last_cycle <= cycle
    ]
    for sender in gone:
        state.recipients.pop(sender, None)
    return gone


def controls_of(event: Event) -> list[ControlOp]:
    if not event.is_operation:
        return []
    return decode_operation(event.payload.data)[1]


def broadcast_update(
    sink: UpdateSink, recipients: Iterable[SenderId], entries: list[UpdateEntry]
) -> int:
    """Sends the applied entries of one cycle to every recipient in U."""
    if not entries:
        return 0

    batch = tuple(entries)
    sent = 0
    for recipient in sorted(recipients):
        sink.send(MessageKind.UPDATE, recipient, batch)
        sent += 1
    return sent


@dataclass
class GroupLink:
    """A client's subscription to one replica group."""

    group: int
    members: tuple[ReplicaId, ...]
    t_start: Optional[float] = None
    next_seq: int = 0
    version: tuple[int, int] = (-1, -1)


class ClientActor(BaseActor):
    """Event sender: one event per cycle per subscribed group."""

    role = "client"

    def __init__(
        self,
        sender_id: SenderId,
        sim: Simulator,
        transport: Transport,
        scenario: SimScenario,
        streams: RandomStreams,
        observer: Optional["GlobalObserver"] = None,
        quota: Optional[int] = None,
    ):
        super().__init__(sender_id, sim, transport)
        self.id = sender_id
        self.scenario = scenario
        self.timing = scenario.timing
        self.observer = observer
        self.quota = quota if quota is not None else scenario.events_per_client
        self.links: dict[int, GroupLink] = {}
        self.controls: list[ControlOp] = []
        self.pending: dict[int, float] = {}
        self.resolved: dict[int, float] = {}
        self.sent = 0
        self.last_send_at: Optional[float] = None
        self.stopped = False
        self.finished = False

        self.clock_rng = streams.stream(sender_id, "clock")
        self.workload_rng = streams.stream(sender_id, "workload")
        # One clock error per sender, fixed for the whole run.
        self.clock_offset = sample_clock_offset(scenario.clock, self.clock_rng)
        self._started = False

    def subscribe(self, group: int, members: Iterable[ReplicaId], t_start: Optional[float] = None):
        self.links[group] = GroupLink(group=group, members=tuple(sorted(members)), t_start=t_start)
        if self._started and t_start is not None:
            self._plan(group, 1)

    def start(self) -> None:
        self._started = True
        for group in sorted(self.links):
            if self.links[group].t_start is not None:
                self._plan(group, 1)

    def _plan(self, group: int, n: int) -> None:
        """Schedules the n-th event of `group` at its sender-clock instant."""
        link = self.links.get(group)
        if self.stopped or link is None or link.t_start is None:
            return

        if n > self.quota:
            self.finished = True
            return

        t_send, _ = schedule(link.t_start, n, self.timing)
        self.at(max(t_send + self.clock_offset, self.now), self._emit_planned, group, n)

    def _emit_planned(self, group: int, n: int) -> None:
        if n == self.quota:
            # The last event retires its own sender, so the group stops expecting more.
            self.announce(ControlKind.RM_NEIGHBOR, self.id, group)
        self.client_cycle_emit(group, n - 1)
        self._plan(group, n + 1)

    def _payload(self) -> Payload:
        app = b""
        if self.workload_rng.random() < self.scenario.op_probability:
            app = self.workload_rng.bytes(WORKLOAD_BYTES)

        controls, self.controls = tuple(self.controls), []
        return Payload.operation(encode_operation(app, controls))

    def client_cycle_emit(self, group: int, seq: int) -> Optional[Event]:
        """Multicasts event `seq` to every replica of `group`."""
        link = self.links.get(group)
        if self.stopped or link is None:
            return None

        event = Event(self.id, seq, self._payload())
        self.multicast(MessageKind.EVENT, link.members, event)
        link.next_seq = seq + 1
        self.pending[seq] = self.now
        self.sent += 1
        self.last_send_at = self.now
        if self.observer is not None:
            self.observer.on_sent(event)
        return event

    def announce(self, kind: ControlKind, client: SenderId, group: int = 0) -> None:
        """Piggybacks a neighbor change on the next event."""
        self.controls.append(ControlOp(kind, client, group))

    def leave(self) -> None:
        self.stopped = True

    def receive(self, msg: Message) -> None:
        if msg.kind == MessageKind.UPDATE:
            self.on_update(msg.body)
        elif msg.kind == MessageKind.HANDSHAKE:
            self.on_handshake(*msg.body)
        elif msg.kind == MessageKind.GROUP_CONFIG:
            self.on_group_config(*msg.body)

    def on_update(self, entries: tuple[UpdateEntry, ...]) -> None:
        for _lam, sender, seq, _digest in entries:
            if self.observer is not None:
                self.observer.on_update_received(self, sender, seq)
            if sender != self.id or seq in self.resolved or seq not in self.pending:
                continue

            latency = self.now - self.pending[seq]
            if latency <= self.scenario.update_timeout_ms:
                self.resolved[seq] = latency

    def on_handshake(self, t_start: float, group: int, members: tuple[ReplicaId, ...]) -> None:
        link = self.links.get(group)
        if link is not None and link.t_start is not None:
            return

        self.links[group] = GroupLink(group=group, members=tuple(sorted(members)), t_start=t_start)
        first_send = t_start - self.timing.net_low
        n = 1
        if first_send < self.now:
            n = math.ceil((self.now - first_send) / self.timing.delta_t) + 1
            logger.warning(f"{self.id} handshake arrived late, starting at event {n}")
        self._plan(group, n)

    def on_group_config(
        self, group: int, members: tuple[ReplicaId, ...], epoch: int, cid: int
    ) -> None:
        link = self.links.get(group)
        if link is None or (epoch, cid) <= link.version:
            return
        link.members = tuple(sorted(members))
        link.version = (epoch, cid)

    def resolved_by(self, instant: float) -> bool:
        """True when every sent event is either confirmed or past the update timeout."""
        return all(
            seq in self.resolved or instant - sent >= self.scenario.update_timeout_ms
            for seq, sent in self.pending.items()
        )
