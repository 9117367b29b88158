#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Leader coordinated per-cycle consensus over the events of a cycle."""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional

from .delivery import Windows, restrict
from .models import BOTTOM, EMPTY, Event, MessageKind, ProtocolViolation, ReplicaId, SenderId

if TYPE_CHECKING:
    from .replica import Replica

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Proposal:
    """What one replica knows about the queried window seqs of a cycle.

    `delivered` proposals carry the exact event set the replica already placed
    in Q_d for the cycle.
    """

    replica: ReplicaId
    cycle: int
    entries: tuple[Event, ...]
    delivered: bool = False

    def lookup(self) -> dict[tuple[SenderId, int], Event]:
        return {e.key: e for e in self.entries}

    def within(self, windows: Windows) -> bool:
        """True when every entry's seq lies inside its sender's queried range."""
        bounds = {sender: (lower, upper) for sender, lower, upper in windows}
        for event in self.entries:
            lower, upper = bounds.get(event.sender, (0, -1))
            if not lower <= event.seq <= upper:
                return False
        return True


@dataclass
class ConsensusLedger:
    """P (pending), Z (in flight) and the collected proposals of the leader."""

    pending: dict[int, Windows] = field(default_factory=dict)
    in_flight: dict[int, Windows] = field(default_factory=dict)
    proposals: dict[int, dict[ReplicaId, Proposal]] = field(default_factory=dict)
    started_at: dict[int, float] = field(default_factory=dict)

    def clear(self) -> None:
        self.pending.clear()
        self.in_flight.clear()
        self.proposals.clear()
        self.started_at.clear()


def build_proposal(
    replica: ReplicaId,
    cycle: int,
    windows: Windows,
    held: dict[tuple[SenderId, int], Event],
    delivered: Optional[tuple[Event, ...]] = None,
) -> Proposal:
    """Proposal over `windows`: held events, Bottom for the rest."""
    if delivered is not None:
        return Proposal(replica, cycle, tuple(sorted(delivered, key=lambda e: e.key)), True)

    entries = []
    for sender, lower, upper in windows:
        for seq in range(lower, upper + 1):
            entries.append(held.get((sender, seq)) or Event(sender, seq, BOTTOM))
    return Proposal(replica, cycle, tuple(entries))


def decide(cycle: int, windows: Windows, proposals: Iterable[Proposal]) -> tuple[Event, ...]:
    """Decided event set of `cycle`.

    A set already delivered by some replica is decided verbatim. Otherwise each
    window seq takes any non-Bottom proposed event, or Empty when nobody has one.
    """
    ordered = sorted(proposals, key=lambda p: p.replica)

    delivered = [p for p in ordered if p.delivered]
    if delivered:
        first = delivered[0].entries
        for other in delivered[1:]:
            if other.entries != first:
                raise ProtocolViolation(
                    f"replicas {delivered[0].replica} and {other.replica} delivered different events for cycle {cycle}"
                )
        return first

    lookups = [p.lookup() for p in ordered]
    decided = []
    for sender, lower, upper in windows:
        for seq in range(lower, upper + 1):
            chosen = None
            for lookup in lookups:
                candidate = lookup.get((sender, seq))
                if candidate is not None and not candidate.is_bottom:
                    chosen = candidate
                    break
            decided.append(chosen or Event(sender, seq, EMPTY))

    for event in decided:
        if event.is_operation and not any(
            lookup.get(event.key) == event for lookup in lookups
        ):
            raise ProtocolViolation(f"decided {event.key} was never proposed")

    return tuple(sorted(decided, key=lambda e: e.key))


def conflicting(first: Iterable[Event], second: Iterable[Event]) -> bool:
    """True when two decided sets disagree on some sender seq they both cover."""
    lookup = {e.key: e for e in first}
    return any(e.key in lookup and lookup[e.key] != e for e in second)


class ConsensusCoordinator:
    """Consensus handlers of one replica, leader side and member side."""

    def __init__(self, host: "Replica"):
        self.host = host
        self.ledger = ConsensusLedger()
        self.deferred: dict[int, Windows] = {}
        self.held: dict[int, tuple[tuple[Event, ...], int, int]] = {}

    @property
    def engine(self):
        return self.host.engine

    @property
    def group(self):
        return self.host.group

    def _stale(self, epoch: int, cid: int) -> bool:
        return epoch != self.group.epoch or cid != self.group.cid

    def reset(self) -> None:
        """Abandons every instance; called whenever a new state is loaded."""
        self.ledger.clear()
        self.deferred.clear()

    # Member side

    def request(self, cycle: int, windows: Windows) -> None:
        """Asks the leader to resolve `cycle`."""
        leader = self.group.leader
        self.host.metrics.consensus_cycles.add(cycle)
        if leader is None:
            return
        logger.debug(f"r{self.host.replica_id} queries r{leader} for cycle {cycle}")
        self.host.send_reliable(MessageKind.QUERY, leader, (cycle, windows))

    def replica_propose(self, src: ReplicaId, cycle: int, windows: Windows, epoch: int, cid: int):
        """Answers an instance QUERY with what this replica holds."""
        if self.group.busy or self._stale(epoch, cid):
            logger.debug(f"r{self.host.replica_id} drops stale consensus query for {cycle}")
            return

        if cycle > self.engine.collected_upto:
            self.deferred[cycle] = windows
            return

        delivered = self.engine.delivered_events(cycle)
        proposal = build_proposal(
            self.host.replica_id, cycle, windows, self.engine.buffers.received, delivered
        )
        if delivered is None:
            self.engine.proposed.add(cycle)

        self.host.send_reliable(MessageKind.QUERY_RESULT, src, proposal)

    def release_deferred(self) -> None:
        """Proposes for deferred queries whose cycle has now been collected."""
        for cycle in sorted(c for c in self.deferred if c <= self.engine.collected_upto):
            windows = self.deferred.pop(cycle)
            self.replica_propose(
                self.group.leader if self.group.leader is not None else self.host.replica_id,
                cycle,
                windows,
                self.group.epoch,
                self.group.cid,
            )

    def apply_decision(self, cycle: int, events: tuple[Event, ...], epoch: int, cid: int) -> None:
        """Stores E(c); delivery consumes it on the next attempt.

        Decisions arriving while LE or GR is set are held back until both clear.
        """
        if self._stale(epoch, cid):
            logger.debug(f"r{self.host.replica_id} drops stale decision for cycle {cycle}")
            return

        if self.group.busy:
            self.held[cycle] = (events, epoch, cid)
            return

        self.host.observer.on_decision_applied(self.host, cycle)

        events = tuple(sorted(events, key=lambda e: e.key))
        if cycle < self.engine.cycle:
            self._check_delivered(cycle, events)
            return

        existing = self.engine.decided.get(cycle)
        if existing is not None:
            if conflicting(existing, events):
                self.host.observer.violation(
                    "integrity", f"r{self.host.replica_id}: second decision for cycle {cycle}"
                )
                return
        else:
            self.engine.decided[cycle] = events
        self.host.drive_delivery()

    def _check_delivered(self, cycle: int, events: tuple[Event, ...]) -> None:
        windows = self.engine.delivered_windows.get(cycle)
        delivered = self.engine.delivered_events(cycle)
        if windows is None or delivered is None:
            return
        if conflicting(delivered, restrict(events, windows)):
            self.host.observer.violation(
                "total_order", f"r{self.host.replica_id}: decision for delivered cycle {cycle}"
            )

    def release_held(self) -> None:
        """Applies held back decisions once LE and GR are clear; stale ones are dropped."""
        if self.group.busy:
            return
        held, self.held = self.held, {}
        for cycle in sorted(held):
            self.apply_decision(cycle, *held[cycle])

    # Leader side

    def leader_handle_query(self, src: ReplicaId, cycle: int, windows: Windows) -> None:
        if not self.host.is_leader:
            return

        known = self.engine.decided.get(cycle) or self.engine.delivered_events(cycle)
        if known is not None:
            self._reply(src, cycle, known)
            return

        if self.group.busy:
            self.ledger.pending.setdefault(cycle, windows)
            return

        if cycle in self.ledger.in_flight:
            return

        held = None
        if not self.host.consensus_only and cycle == self.engine.cycle:
            held = self.engine.holds_all(cycle, self.engine.windows(cycle))
        if held is not None:
            # The reply fixes the cycle: later queries get the same set and no instance starts.
            self.engine.decided[cycle] = tuple(sorted(held, key=lambda e: e.key))
            self._reply(src, cycle, self.engine.decided[cycle])
            return

        self.ledger.pending.setdefault(cycle, windows)
        self.leader_start_instance()

    def _reply(self, dst: ReplicaId, cycle: int, events: tuple[Event, ...]) -> None:
        self.host.send_reliable(MessageKind.QUERY_REPLY, dst, (cycle, events))

    def leader_start_instance(self) -> None:
        """Starts an instance for every pending cycle not already running."""
        if self.group.busy or not self.host.is_leader:
            return

        for cycle in sorted(self.ledger.pending):
            windows = self.ledger.pending.pop(cycle)
            if cycle in self.ledger.in_flight:
                continue

            decided = self.engine.decided.get(cycle) or self.engine.delivered_events(cycle)
            if decided is not None:
                self.host.multicast_reliable(
                    MessageKind.DECISION, sorted(self.group.live_members), (cycle, decided)
                )
                continue

            self.ledger.in_flight[cycle] = windows
            self.ledger.proposals[cycle] = {}
            self.ledger.started_at[cycle] = self.host.now
            self.host.metrics.instances += 1
            logger.debug(f"Leader r{self.host.replica_id} starts consensus for cycle {cycle}")
            self.host.multicast_reliable(
                MessageKind.CONSENSUS_QUERY, sorted(self.group.live_members), (cycle, windows)
            )

    def leader_on_result(self, proposal: Proposal) -> None:
        if proposal.cycle not in self.ledger.in_flight or not self.host.is_leader:
            return

        windows = self.ledger.in_flight[proposal.cycle]
        if not proposal.delivered and not proposal.within(windows):
            logger.warning(f"Proposal from r{proposal.replica} escapes the queried windows")
            return

        self.ledger.proposals[proposal.cycle][proposal.replica] = proposal
        self.maybe_decide(proposal.cycle)

    def maybe_decide(self, cycle: int) -> None:
        """Decides once every live member has proposed and neither LE nor GR is set."""
        proposals = self.ledger.proposals.get(cycle, {})
        live = self.group.live_members
        if self.group.busy or not live or not live.issubset(proposals):
            return

        windows = self.ledger.in_flight.pop(cycle)
        self.ledger.proposals.pop(cycle, None)
        started = self.ledger.started_at.pop(cycle, self.host.now)
        decided = decide(cycle, windows, (proposals[r] for r in sorted(live)))
        self.host.metrics.instance_durations_ms.append(self.host.now - started)
        if cycle >= self.engine.cycle:
            self.engine.decided.setdefault(cycle, decided)

        self.host.multicast_reliable(
            MessageKind.DECISION,
            sorted(live),
            (cycle, decided),
            on_delivered=lambda _dst, elapsed: self.host.metrics.multicast_ms.append(elapsed),
        )

    def on_membership_change(self) -> None:
        """Re-evaluates running instances against the new live set."""
        for cycle in sorted(self.ledger.in_flight):
            self.maybe_decide(cycle)
