#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Primary-backup replicas used as comparison baselines.

Clients send to the primary only. The primary applies the events of each cycle
when its collection closes and discards anything later. The plain variant
replies at once and forwards to backups without acknowledgment; the reliable
variant replies only once every live backup acknowledged the forward.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional

from .base import BaseReplica
from .config import SimScenario
from .core import ApplicationState, CycleClock
from .delivery import seq_of_cycle
from .helpers import DEFAULT_HASH, HashProvider
from .interaction import (
    InteractionState,
    UpdateEntry,
    broadcast_update,
    controls_of,
    drop_retired,
    neighbor_join,
    neighbor_leave,
)
from .models import ControlKind, Event, Message, MessageKind, ReplicaId, SenderId, Strategy
from .simnet import Simulator, Transport

if TYPE_CHECKING:
    from .metrics import Metrics

logger = logging.getLogger(__name__)


@dataclass
class PendingForward:
    cycle: int
    entries: list[UpdateEntry]
    targets: frozenset[ReplicaId] = frozenset()
    acks: set[ReplicaId] = field(default_factory=set)


class PrimaryBackupReplica(BaseReplica):
    """Primary applies and answers immediately; backups are updated asynchronously."""

    strategy = Strategy.PRIMARY_BACKUP

    def __init__(
        self,
        replica_id: ReplicaId,
        sim: Simulator,
        transport: Transport,
        scenario: SimScenario,
        clock: CycleClock,
        metrics: "Metrics",
        live: Iterable[ReplicaId],
        primary: Optional[ReplicaId],
        interaction: Optional[InteractionState] = None,
        hasher: HashProvider = DEFAULT_HASH,
        initialized: bool = True,
    ):
        super().__init__(replica_id, sim, transport, scenario, clock)
        self.metrics = metrics
        self.live = frozenset(live)
        self.primary = primary
        self.interaction = interaction or InteractionState()
        self.app = ApplicationState(hasher)
        self.received: dict[tuple[SenderId, int], Event] = {}
        self.applied = 0
        self.forwarded_upto = self.collected_upto
        self.backlog: dict[int, tuple[Event, ...]] = {}
        self.version = 0
        self.pending: dict[int, PendingForward] = {}
        self._initialized = initialized

    @property
    def initialized(self) -> bool:
        return self._initialized

    @property
    def is_primary(self) -> bool:
        return self.primary == self.replica_id

    @property
    def backups(self) -> list[ReplicaId]:
        return sorted(self.live - {self.replica_id})

    def receive(self, msg: Message) -> None:
        if msg.kind == MessageKind.EVENT:
            self._on_event(msg.body)
        elif msg.kind == MessageKind.PB_FORWARD:
            self._on_forward(msg.src, *msg.body)
        elif msg.kind == MessageKind.PB_ACK:
            self._on_ack(msg.src, msg.body)
        elif msg.kind == MessageKind.MEMBER_STATE:
            self.on_member_state(*msg.body)

    def _on_event(self, event: Event) -> None:
        if not self.is_primary:
            return

        record = self.interaction.senders.get(event.sender)
        if record is None:
            self.metrics.unknown_discards += 1
            return

        late = record.first_cycle + event.seq <= self.collected_upto
        if late or event.seq <= record.max_seq_delivered:
            self.metrics.late_discards += 1
            return

        self.received[event.key] = event

    def _take_cycle(self, cycle: int) -> list[Event]:
        events = []
        for record in self.interaction.senders.active(cycle):
            seq = seq_of_cycle(record, cycle)
            event = self.received.pop((record.id, seq), None)
            record.max_seq_delivered = seq
            if event is not None:
                events.append(event)
        return events

    def on_cycle_timeout(self, cycle: int) -> None:
        if not self.is_primary:
            return

        events = self._take_cycle(cycle)
        entries = self._apply(cycle, events)
        self.metrics.delivered_cycles.add(cycle)
        self.metrics.pb_primary_applied = self.applied
        self._replicate(cycle, events, entries)

    def _apply(self, cycle: int, events: list[Event]) -> list[UpdateEntry]:
        entries: list[UpdateEntry] = []
        for event in events:
            digest = self.app.apply(self.applied, event)
            if digest is not None:
                entries.append((self.applied, event.sender, event.seq, digest))
            self.applied += 1
            for control in controls_of(event):
                self._on_control(cycle, event, control)

        drop_retired(self.interaction, cycle)
        return entries

    def _on_control(self, cycle: int, event: Event, control) -> None:
        if control.kind == ControlKind.ADD_NEIGHBOR:
            record = neighbor_join(
                self.interaction, self.clock, self.scenario, cycle, event, control
            )
            if record is not None and self.is_primary:
                self.transport.send_reliable(
                    Message(
                        MessageKind.HANDSHAKE,
                        self.address,
                        record.id,
                        (record.t_start, control.group, (self.replica_id,)),
                    )
                )
        elif not neighbor_leave(self.interaction, cycle, control):
            self.metrics.noop_leaves += 1

    def _replicate(self, cycle: int, events: list[Event], entries: list[UpdateEntry]) -> None:
        self.metrics.sync_delays_ms.append(0.0)
        broadcast_update(self, self.interaction.recipients, entries)
        self.multicast(MessageKind.PB_FORWARD, self.backups, (cycle, tuple(events)))

    def _on_forward(self, src: ReplicaId, cycle: int, events: tuple[Event, ...]) -> None:
        """Backups apply whatever arrives in cycle order; lost forwards leave gaps."""
        if self.is_primary or cycle <= self.forwarded_upto:
            return
        self._apply_forward(cycle, events)

    def _apply_forward(self, cycle: int, events: tuple[Event, ...]) -> None:
        for record in self.interaction.senders.active(cycle):
            record.max_seq_delivered = seq_of_cycle(record, cycle)
        self._apply(cycle, list(events))
        self.forwarded_upto = cycle

    def _on_ack(self, src: ReplicaId, cycle: int) -> None:
        logger.debug(f"r{self.replica_id} ignores PB_ACK for {cycle}")

    def on_member_state(self, live: frozenset[ReplicaId], created: frozenset[ReplicaId]) -> None:
        self.live = live
        if self.primary in live:
            return

        survivors = sorted(r for r in live if r not in created)
        self.primary = min(survivors) if survivors else min(live)
        if not self.is_primary:
            return

        self.version += 1
        if self.applied < self.metrics.pb_primary_applied:
            self.metrics.divergences += 1
            logger.warning(
                f"r{self.replica_id} promoted with {self.applied} applied events, the old primary had {self.metrics.pb_primary_applied}"
            )
        logger.info(f"r{self.replica_id} promoted to primary")
        self.metrics.elections += 1
        self.forwarded_upto = self.collected_upto
        for sender in sorted(self.interaction.recipients):
            self.send(MessageKind.GROUP_CONFIG, sender, (0, (self.replica_id,), self.version, 0))


class ReliablePrimaryBackupReplica(PrimaryBackupReplica):
    """Primary replies only after every live backup acknowledged the cycle."""

    strategy = Strategy.RELIABLE_PRIMARY_BACKUP

    def _replicate(self, cycle: int, events: list[Event], entries: list[UpdateEntry]) -> None:
        self.pending[cycle] = PendingForward(cycle, entries, frozenset(self.backups))
        self.transport.multicast_reliable(
            MessageKind.PB_FORWARD,
            self.address,
            self.backups,
            (cycle, tuple(events)),
            still_wanted=lambda dst: dst in self.live,
        )
        self._maybe_release(cycle)

    def _on_forward(self, src: ReplicaId, cycle: int, events: tuple[Event, ...]) -> None:
        """Acknowledges every copy and applies forwards strictly in cycle order."""
        self.transport.send_reliable(Message(MessageKind.PB_ACK, self.address, src, cycle))
        if self.is_primary or cycle <= self.forwarded_upto:
            return

        self.backlog[cycle] = events
        while self.forwarded_upto + 1 in self.backlog:
            following = self.forwarded_upto + 1
            self._apply_forward(following, self.backlog.pop(following))

    def _on_ack(self, src: ReplicaId, cycle: int) -> None:
        pending = self.pending.get(cycle)
        if pending is None:
            return
        pending.acks.add(src)
        self._maybe_release(cycle)

    def _maybe_release(self, cycle: int) -> None:
        pending = self.pending.get(cycle)
        if pending is None or not (pending.targets & self.live).issubset(pending.acks):
            return

        del self.pending[cycle]
        self.metrics.sync_delays_ms.append(self.now - self.clock.deadline(cycle))
        self.metrics.multicast_ms.append(self.now - self.clock.deadline(cycle))
        broadcast_update(self, self.interaction.recipients, pending.entries)

    def on_member_state(self, live: frozenset[ReplicaId], created: frozenset[ReplicaId]) -> None:
        super().on_member_state(live, created)
        if self.is_primary:
            for cycle in sorted(self.pending):
                self._maybe_release(cycle)


def baseline_primary_backup(scenario: SimScenario) -> "Metrics":
    """Runs `scenario` with the primary-backup baseline."""
    from .runner import run

    return run(scenario.copy(update={"strategy": Strategy.PRIMARY_BACKUP}))


def baseline_reliable_pb(scenario: SimScenario) -> "Metrics":
    from .runner import run

    return run(scenario.copy(update={"strategy": Strategy.RELIABLE_PRIMARY_BACKUP}))


def baseline_consensus(scenario: SimScenario) -> "Metrics":
    """Runs `scenario` with every cycle delivered through a consensus instance."""
    from .runner import run

    return run(scenario.copy(update={"strategy": Strategy.CONSENSUS}))
