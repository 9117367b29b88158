#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Replica of the fast total-order strategy and of the consensus-only baseline."""

import logging
from typing import TYPE_CHECKING, Any, Callable, Iterable, Optional

from .base import BaseReplica
from .config import SimScenario
from .consensus import ConsensusCoordinator
from .core import ApplicationState, CycleClock, DeliveryQueue
from .delivery import CycleDelivery, SenderTable, Windows
from .gc import GarbageCollector
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
from .membership import GroupState, InitPackage, MembershipManager, SyncPackage
from .models import (
    ControlKind,
    DeliveryOutcome,
    DeliverySlot,
    Event,
    Message,
    MessageKind,
    ProtocolViolation,
    ReplicaId,
    SenderId,
    Strategy,
)
from .simnet import Simulator, Transport

if TYPE_CHECKING:
    from .metrics import Metrics
    from .observer import GlobalObserver

logger = logging.getLogger(__name__)


class Replica(BaseReplica):
    """Fast delivery with opportunistic consensus."""

    strategy = Strategy.FAST

    def __init__(
        self,
        replica_id: ReplicaId,
        sim: Simulator,
        transport: Transport,
        scenario: SimScenario,
        clock: CycleClock,
        group: GroupState,
        observer: "GlobalObserver",
        metrics: "Metrics",
        interaction: Optional[InteractionState] = None,
        hasher: HashProvider = DEFAULT_HASH,
        initialized: bool = True,
    ):
        super().__init__(replica_id, sim, transport, scenario, clock)
        self.group = group
        self.observer = observer
        self.metrics = metrics
        self.interaction = interaction or InteractionState()
        self.queue = DeliveryQueue()
        self.app = ApplicationState(hasher)
        self.engine = CycleDelivery(
            clock,
            self.interaction.senders,
            self.queue,
            scenario.late_events,
            on_query=self._on_query,
            on_control=self._on_control,
            on_commit=self._on_commit,
        )
        self.engine.collected_upto = self.collected_upto
        self.consensus = ConsensusCoordinator(self)
        self.gc = GarbageCollector(self, scenario.gc_period_ms, scenario.gc_enabled)
        self.membership = MembershipManager(self)
        self._initialized = initialized
        self._delivering = False
        self._early: list[Event] = []

        self._handlers: dict[MessageKind, Callable[[Message], Any]] = {
            MessageKind.EVENT: self._on_event_msg,
            MessageKind.QUERY: self._on_query_msg,
            MessageKind.QUERY_REPLY: self._on_decision_msg,
            MessageKind.DECISION: self._on_decision_msg,
            MessageKind.CONSENSUS_QUERY: lambda m: self.consensus.replica_propose(
                m.src, *m.body, m.epoch, m.cid
            ),
            MessageKind.QUERY_RESULT: self._on_result_msg,
            MessageKind.GC_LAMBDA: lambda m: self.gc.on_lambda(m.src, m.body),
            MessageKind.MEMBER_STATE: lambda m: self.on_member_state(*m.body),
            MessageKind.LE_QUERY: lambda m: self.membership.on_le_query(m.src),
            MessageKind.LE_STATE: lambda m: self.membership.on_le_state(m.src, m.body),
            MessageKind.NACK: lambda m: self.membership.on_nack(m.src, m.body),
            MessageKind.LOAD_LEADER: lambda m: self.membership.on_load_leader(m.src, *m.body),
            MessageKind.ACK: lambda m: self.membership.on_ack(m.src, m.body),
            MessageKind.GR_QUERY: lambda m: self.membership.on_gr_query(
                m.src, m.body, m.epoch, m.cid
            ),
            MessageKind.GE_STATE: lambda m: self.membership.on_ge_state(m.src, m.body),
            MessageKind.LOAD_CONFIG: lambda m: self.membership.on_load_config(
                m.src, m.body, m.epoch
            ),
        }

    # Host interface

    @property
    def initialized(self) -> bool:
        return self._initialized

    @property
    def queue_length(self) -> Optional[int]:
        return len(self.queue) if self._initialized else None

    @property
    def holds_state(self) -> bool:
        return self.is_member

    @property
    def consensus_only(self) -> bool:
        return self.strategy == Strategy.CONSENSUS

    @property
    def is_leader(self) -> bool:
        return self._initialized and self.group.leader == self.replica_id

    @property
    def is_member(self) -> bool:
        return self._initialized and self.replica_id in self.group.members

    @property
    def recipients(self) -> dict[SenderId, int]:
        return self.interaction.recipients

    def _wanted(self, dst) -> bool:
        return dst == self.replica_id or dst in self.group.live

    def send_reliable(self, kind: MessageKind, dst, body: Any = None, still_wanted=None) -> None:
        self.transport.send_reliable(
            Message(kind, self.address, dst, body, epoch=self.group.epoch, cid=self.group.cid),
            still_wanted=still_wanted or (lambda: self._wanted(dst)),
        )

    def multicast_reliable(
        self,
        kind: MessageKind,
        dsts: Iterable,
        body: Any = None,
        on_delivered: Optional[Callable[[Any, float], None]] = None,
    ) -> None:
        self.transport.multicast_reliable(
            kind,
            self.address,
            dsts,
            body,
            still_wanted=self._wanted,
            on_delivered=on_delivered,
            epoch=self.group.epoch,
            cid=self.group.cid,
        )

    def start(self) -> None:
        super().start()
        self.gc.start()

    def receive(self, msg: Message) -> None:
        handler = self._handlers.get(msg.kind)
        if handler is None:
            logger.debug(f"r{self.replica_id} ignores {msg.kind.value}")
            return
        handler(msg)

    # Delivery

    def on_cycle_timeout(self, cycle: int) -> None:
        self.engine.on_cycle_timeout(cycle)
        if not self.is_member:
            return

        self.consensus.release_deferred()
        self._retry_stale_queries()
        self.drive_delivery()

    def drive_delivery(self) -> None:
        """Delivers as many consecutive cycles as possible, then queries ahead for the rest."""
        if self._delivering or not self.is_member or self.group.busy:
            return

        fast_path = not self.consensus_only
        self._delivering = True
        try:
            while (
                self.engine.try_deliver_cycle(self.engine.cycle, self.now, fast_path=fast_path)
                == DeliveryOutcome.DELIVERED
            ):
                pass
            self.engine.query_ahead(self.now, fast_path=fast_path)
        finally:
            self._delivering = False

    def _retry_stale_queries(self) -> None:
        """Queries the next cycle to deliver again when no answer came in time."""
        cycle = self.engine.cycle
        asked_at = self.engine.queried.get(cycle)
        limit = self.scenario.query_retry_cycles * self.clock.cycle_length_ms
        if asked_at is None or self.now - asked_at < limit:
            return
        logger.info(f"r{self.replica_id} queries cycle {cycle} again")
        self.engine.queried[cycle] = self.now
        self.consensus.request(cycle, self.engine.windows(cycle))

    def _on_query(self, cycle: int, windows: Windows) -> None:
        if self.is_leader:
            self.metrics.consensus_cycles.add(cycle)
            self.consensus.leader_handle_query(self.replica_id, cycle, windows)
        elif self.consensus_only:
            self.metrics.consensus_cycles.add(cycle)
        else:
            self.consensus.request(cycle, windows)

    def _on_event_msg(self, msg: Message) -> None:
        if not self._initialized:
            self._early.append(msg.body)
            return
        self.engine.on_event_received(msg.body)

    def _on_query_msg(self, msg: Message) -> None:
        if msg.epoch != self.group.epoch:
            return
        self.consensus.leader_handle_query(msg.src, *msg.body)

    def _on_decision_msg(self, msg: Message) -> None:
        cycle, events = msg.body
        self.consensus.apply_decision(cycle, events, msg.epoch, msg.cid)

    def _on_result_msg(self, msg: Message) -> None:
        if msg.epoch != self.group.epoch or msg.cid != self.group.cid:
            return
        self.consensus.leader_on_result(msg.body)

    def _on_control(self, cycle: int, event: Event) -> None:
        for control in controls_of(event):
            if control.kind == ControlKind.ADD_NEIGHBOR:
                record = neighbor_join(
                    self.interaction, self.clock, self.scenario, cycle, event, control
                )
                if record is None:
                    continue
                self.observer.on_join(self, record.id, record.first_cycle)
                self.send_reliable(
                    MessageKind.HANDSHAKE,
                    record.id,
                    (record.t_start, control.group, tuple(sorted(self.group.members))),
                    still_wanted=lambda k=record.id: k in self.interaction.recipients,
                )
            elif not neighbor_leave(self.interaction, cycle, control):
                self.metrics.noop_leaves += 1

    def _on_commit(
        self, cycle: int, slots: list[DeliverySlot], windows: Optional[Windows]
    ) -> None:
        if windows is not None:
            self.observer.on_windows(self, cycle, windows)
            self.metrics.sync_delays_ms.append(self.now - self.clock.deadline(cycle))
            self.metrics.delivered_cycles.add(cycle)

        entries: list[UpdateEntry] = []
        for slot in slots:
            digest = self.app.apply(slot.lam, slot.event)
            self.queue.mark_applied(slot.lam)
            self.observer.on_apply(self, slot, self.app.state)
            if digest is not None:
                entries.append((slot.lam, slot.event.sender, slot.event.seq, digest))

        broadcast_update(self, self.interaction.recipients, entries)
        drop_retired(self.interaction, cycle)

    def forget_decisions_before(self, cycle: int) -> None:
        """Drops decided sets of cycles that can no longer be queried."""
        for stale in [c for c in self.engine.decided if c <= cycle]:
            del self.engine.decided[stale]
        for stale in [c for c in self.engine.delivered_windows if c <= cycle]:
            del self.engine.delivered_windows[stale]

    # Membership

    def on_member_state(self, live: frozenset[ReplicaId], created: frozenset[ReplicaId]) -> None:
        self.membership.on_member_state(live, created)

    def notify_senders(self) -> None:
        """Tells every sender in S the current group configuration."""
        body = (0, tuple(sorted(self.group.members)), self.group.epoch, self.group.cid)
        for sender in sorted(self.interaction.recipients):
            self.send(MessageKind.GROUP_CONFIG, sender, body)

    def init_package(self) -> InitPackage:
        return InitPackage(
            t0=self.clock.first_cycle_time,
            senders=tuple(r.copy() for r in self.interaction.senders),
            cycle=self.engine.cycle,
            applied=self.queue.applied_upto,
            state=self.app.state,
            ages=tuple(sorted(self.group.ages.items())),
            recipients=tuple(sorted(self.interaction.recipients)),
        )

    def sync_package(self) -> SyncPackage:
        """This replica's state for an election or a reconfiguration."""
        return SyncPackage(
            replica=self.replica_id,
            queue=self.queue.copy(),
            decided=dict(self.engine.decided),
            config=(self.group.cid, self.group.members),
            epoch=self.group.epoch,
            init=self.init_package() if self._initialized else None,
        )

    def load_state(
        self,
        package: SyncPackage,
        *,
        leader: ReplicaId,
        epoch: int,
        cid: int,
        members: frozenset[ReplicaId],
        ages: dict[ReplicaId, int],
    ) -> None:
        """Brings this replica to the merged state and the new configuration."""
        if package.init is not None:
            if not self._initialized or not self._replay(package):
                self._adopt(package.init, package.queue)

        self.engine.decided = {
            cycle: events for cycle, events in package.decided.items() if cycle >= self.engine.cycle
        }

        self.consensus.reset()
        self.engine.reset_consensus_marks()

        group = self.group
        group.members = frozenset(members)
        group.epoch = epoch
        group.cid = cid
        group.leader = leader
        group.ages = dict(ages)
        group.new_replica = False
        self.gc.reset_members(group.members)
        logger.info(
            f"r{self.replica_id} loaded state: leader r{leader}, epoch {epoch}, cid {cid}, next lambda {self.queue.next_lambda}"
        )

    def _replay(self, package: SyncPackage) -> bool:
        """Delivers the merged slots this replica misses. False when they were pruned away."""
        source = package.queue
        if not self.queue.is_prefix_compatible(source):
            raise ProtocolViolation(f"r{self.replica_id} diverges from the merged Q_d")

        if source.next_lambda > self.queue.next_lambda and (
            source.pruned_upto is not None and source.pruned_upto >= self.queue.next_lambda
        ):
            return False

        assert package.init is not None
        self.engine.replay(source.slots, through_cycle=package.init.cycle)
        return True

    def _adopt(self, init: InitPackage, queue: DeliveryQueue) -> None:
        """Takes the whole state of a package, as a fresh replica does."""
        self.queue.adopt(queue)
        self.queue.applied_upto = init.applied
        self.interaction.senders = SenderTable(r.copy() for r in init.senders)
        self.engine.senders = self.interaction.senders
        self.interaction.recipients = {
            s: self.interaction.recipients.get(s, 0) for s in init.recipients
        }
        self.clock.current_cycle = init.cycle
        self.app.state = init.state
        for record in self.interaction.senders:
            self.engine.buffers.purge(record.id, record.max_seq_delivered)
        self._initialized = True
        early, self._early = self._early, []
        for event in early:
            self.engine.on_event_received(event)
        logger.info(f"r{self.replica_id} adopted state at cycle {init.cycle}")


class ConsensusReplica(Replica):
    """Baseline that resolves every cycle through a consensus instance."""

    strategy = Strategy.CONSENSUS
