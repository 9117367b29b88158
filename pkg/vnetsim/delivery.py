#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Per-replica event collection, deliverable windows and cycle delivery."""

import logging
from dataclasses import dataclass, replace
from itertools import groupby
from typing import Callable, Iterable, Iterator, Optional, Sequence

from .config import TimingParams
from .core import CycleClock, DeliveryQueue
from .models import (
    BOTTOM,
    EMPTY,
    DeliveryOutcome,
    DeliverySlot,
    Event,
    InactiveSenderError,
    LateEventMode,
    ProtocolViolation,
    SenderId,
)

logger = logging.getLogger(__name__)

# ((sender, MinSeq, Seq), ...) sorted by sender; hashable so it can travel in messages.
Windows = tuple[tuple[SenderId, int, int], ...]


@dataclass
class SenderRecord:
    """Delivery bookkeeping for one sender of the group."""

    id: SenderId
    t_start: float
    first_cycle: int
    max_seq_delivered: int = -1
    last_cycle: Optional[int] = None
    index: int = 0

    def active_at(self, cycle: int) -> bool:
        return self.first_cycle <= cycle and (self.last_cycle is None or cycle <= self.last_cycle)

    def copy(self) -> "SenderRecord":
        return replace(self)


class SenderTable:
    """The sender set S. Iteration and indexing follow SenderId order."""

    def __init__(self, records: Iterable[SenderRecord] = ()):
        self._records: dict[SenderId, SenderRecord] = {}
        for record in records:
            self.add(record)

    def __contains__(self, sender: object) -> bool:
        return sender in self._records

    def __iter__(self) -> Iterator[SenderRecord]:
        return iter(sorted(self._records.values(), key=lambda r: r.id))

    def __len__(self) -> int:
        return len(self._records)

    def get(self, sender: SenderId) -> Optional[SenderRecord]:
        return self._records.get(sender)

    def add(self, record: SenderRecord) -> bool:
        """Adds a sender. A second join of the same id is a no-op."""
        if record.id in self._records:
            return False
        self._records[record.id] = record
        return True

    def retire(self, sender: SenderId, last_cycle: int) -> bool:
        """Marks `last_cycle` as the final cycle in which `sender` contributes."""
        record = self._records.get(sender)
        if record is None or record.last_cycle is not None:
            return False
        record.last_cycle = last_cycle
        return True

    def active(self, cycle: int) -> list[SenderRecord]:
        """Senders contributing to `cycle`, sorted, with Index(s) refreshed to 1..k."""
        records = [r for r in self if r.active_at(cycle)]
        for index, record in enumerate(records, start=1):
            record.index = index
        return records

    def index_map(self, cycle: int) -> dict[SenderId, int]:
        return {r.id: r.index for r in self.active(cycle)}

    def copy(self) -> "SenderTable":
        return SenderTable(r.copy() for r in self)


def seq_of_cycle(sender: SenderRecord, cycle: int) -> int:
    """Seq(s, c) = c - c_0."""
    if cycle < sender.first_cycle:
        raise InactiveSenderError(
            f"cycle {cycle} precedes the first cycle {sender.first_cycle} of {sender.id}"
        )
    return cycle - sender.first_cycle


def expected_window(
    sender: SenderRecord, cycle: int, mode: LateEventMode = LateEventMode.DYNAMIC
) -> tuple[int, int]:
    """Omega(s, c) as the inclusive range (MinSeq, Seq(s, c))."""
    upper = seq_of_cycle(sender, cycle)
    if mode == LateEventMode.SIMPLE_DISCARD:
        return (upper, upper)

    lower = sender.max_seq_delivered + 1
    if lower > upper:
        raise ProtocolViolation(
            f"empty window [{lower}, {upper}] for {sender.id} at cycle {cycle}"
        )
    return (lower, upper)


def windows_for(
    senders: SenderTable, cycle: int, mode: LateEventMode = LateEventMode.DYNAMIC
) -> Windows:
    return tuple((r.id, *expected_window(r, cycle, mode)) for r in senders.active(cycle))


def gamma_offsets(cycle: int, senders: Sequence[SenderRecord]) -> dict[SenderId, int]:
    """Sum of (Seq(k, c) + 1) over the senders ranked before each sender."""
    offsets, acc = {}, 0
    for record in senders:
        offsets[record.id] = acc
        acc += seq_of_cycle(record, cycle) + 1
    return offsets


def gamma(event: Event, cycle: int, senders: Sequence[SenderRecord]) -> int:
    """In-cycle delivery index of `event`; `senders` is the sorted active sender set."""
    offsets = gamma_offsets(cycle, senders)
    if event.sender not in offsets:
        raise ValueError(f"{event.sender} is not an active sender at cycle {cycle}")
    return event.seq + offsets[event.sender]


def restrict(events: Iterable[Event], windows: Windows) -> tuple[Event, ...]:
    """`events` cut down to `windows`, with Empty for every window seq they leave out."""
    lookup = {e.key: e for e in events}
    kept = []
    for sender, lower, upper in windows:
        for seq in range(lower, upper + 1):
            event = lookup.get((sender, seq))
            if event is None or event.is_bottom:
                event = Event(sender, seq, EMPTY)
            kept.append(event)
    return tuple(kept)


def schedule(t_start: float, n: int, timing: TimingParams) -> tuple[float, float]:
    """Send instant and receive deadline of a sender's n-th event (n >= 1)."""
    if n < 1:
        raise ValueError("event ordinals start at 1")
    t_send = t_start - timing.net_low + (n - 1) * timing.delta_t
    t_recv = t_start + n * timing.delta_t
    return t_send, t_recv


class CollectionBuffers:
    """Q_r (received, undelivered events) and Q_p (entries staged per cycle)."""

    def __init__(self):
        self.received: dict[tuple[SenderId, int], Event] = {}
        self.staged: dict[int, dict[tuple[SenderId, int], Event]] = {}

    def receive(self, event: Event) -> bool:
        if event.key in self.received:
            return False
        self.received[event.key] = event
        return True

    def holds(self, sender: SenderId, seq: int) -> Optional[Event]:
        return self.received.get((sender, seq))

    def stage(self, cycle: int, windows: Windows) -> dict[tuple[SenderId, int], Event]:
        """Stages every window seq for `cycle`, with a Bottom placeholder where nothing arrived."""
        entries = {}
        for sender, lower, upper in windows:
            for seq in range(lower, upper + 1):
                entries[(sender, seq)] = self.received.get((sender, seq)) or Event(
                    sender, seq, BOTTOM
                )
        self.staged[cycle] = entries
        return entries

    def purge(self, sender: SenderId, upto: int) -> None:
        stale = [key for key in self.received if key[0] == sender and key[1] <= upto]
        for key in stale:
            del self.received[key]

    def clear_cycle(self, cycle: int) -> None:
        self.staged.pop(cycle, None)


class CycleDelivery:
    """Collection and delivery state machine of one replica.

    Collection runs on the cycle grid. Delivery of cycle c starts only after c - 1
    has been delivered, either directly when every window seq has arrived, or from a
    decided event set. Consensus for later collected cycles may be asked for ahead of
    delivery, so decisions can be reached for several cycles at once.
    """

    def __init__(
        self,
        clock: CycleClock,
        senders: SenderTable,
        queue: DeliveryQueue,
        mode: LateEventMode = LateEventMode.DYNAMIC,
        on_query: Optional[Callable[[int, Windows], None]] = None,
        on_control: Optional[Callable[[int, Event], None]] = None,
        on_commit: Optional[Callable[[int, list[DeliverySlot], Optional[Windows]], None]] = None,
    ):
        self.clock = clock
        self.senders = senders
        self.queue = queue
        self.mode = mode
        self.on_query = on_query
        self.on_control = on_control
        self.on_commit = on_commit

        self.buffers = CollectionBuffers()
        self.decided: dict[int, tuple[Event, ...]] = {}
        self.proposed: set[int] = set()
        self.queried: dict[int, float] = {}
        self.delivered_windows: dict[int, Windows] = {}
        self.collected_upto = -1

        self.unknown_discards = 0
        self.late_discards = 0

    @property
    def cycle(self) -> int:
        """Next cycle to deliver."""
        return self.clock.current_cycle

    def windows(self, cycle: int) -> Windows:
        return windows_for(self.senders, cycle, self.mode)

    def on_event_received(self, event: Event) -> bool:
        """Buffers `event` if it can still be delivered."""
        if event.is_bottom:
            raise ValueError("bottom placeholders never cross the network")

        record = self.senders.get(event.sender)
        if record is None or (
            record.last_cycle is not None and event.seq > record.last_cycle - record.first_cycle
        ):
            self.unknown_discards += 1
            return False

        if event.seq <= record.max_seq_delivered:
            self.late_discards += 1
            return False

        if (
            self.mode == LateEventMode.SIMPLE_DISCARD
            and record.first_cycle + event.seq <= self.collected_upto
        ):
            self.late_discards += 1
            return False

        return self.buffers.receive(event)

    def on_cycle_timeout(self, cycle: int) -> dict[tuple[SenderId, int], Event]:
        """Closes the collection of `cycle`, staging it when it is the next to deliver."""
        self.collected_upto = max(self.collected_upto, cycle)
        if cycle != self.cycle:
            return {}
        return self.buffers.stage(cycle, self.windows(cycle))

    def try_deliver_cycle(
        self, cycle: int, now: float = 0.0, fast_path: bool = True
    ) -> DeliveryOutcome:
        """One delivery attempt for `cycle`."""
        if cycle != self.cycle or cycle > self.collected_upto:
            return DeliveryOutcome.NOT_READY

        windows = self.windows(cycle)
        decided = self.decided.get(cycle)
        if decided is not None:
            self.commit(cycle, restrict(decided, windows), windows)
            return DeliveryOutcome.DELIVERED

        if fast_path and cycle not in self.proposed:
            entries = self.buffers.stage(cycle, windows)
            if not any(e.is_bottom for e in entries.values()):
                self.commit(cycle, entries.values(), windows)
                return DeliveryOutcome.DELIVERED

        self._query(cycle, windows, now)
        return DeliveryOutcome.AWAITING

    def _query(self, cycle: int, windows: Windows, now: float) -> bool:
        if cycle in self.queried:
            return False
        self.queried[cycle] = now
        if self.on_query is not None:
            self.on_query(cycle, windows)
        return True

    def misses_current_event(self, cycle: int) -> bool:
        """True when the event some active sender sent for `cycle` itself has not arrived."""
        for record in self.senders.active(cycle):
            if self.buffers.holds(record.id, seq_of_cycle(record, cycle)) is None:
                return True
        return False

    def query_ahead(self, now: float = 0.0, fast_path: bool = True) -> list[int]:
        """Queries collected cycles past the next one to deliver that cannot be delivered directly.

        The queried range of such a cycle starts at the current MinSeq, so it covers
        the window the cycle will have once its predecessors are delivered.
        """
        asked = []
        for cycle in range(self.cycle + 1, self.collected_upto + 1):
            if cycle in self.queried or cycle in self.decided:
                continue
            if fast_path and not self.misses_current_event(cycle):
                continue
            if self._query(cycle, self.windows(cycle), now):
                asked.append(cycle)
        return asked

    def delivered_events(self, cycle: int) -> Optional[tuple[Event, ...]]:
        """Events already placed in Q_d for `cycle`, None if not delivered here."""
        if cycle >= self.cycle:
            return None
        slots = self.queue.cycle_slots(cycle)
        return tuple(s.event for s in slots) if slots else None

    def holds_all(self, cycle: int, windows: Windows) -> Optional[tuple[Event, ...]]:
        """Every queried event of `cycle` not yet delivered here, if all are held, else None."""
        delivered = self.delivered_events(cycle)
        if delivered is not None:
            return delivered

        events = []
        for sender, lower, upper in windows:
            record = self.senders.get(sender)
            if record is None:
                return None
            for seq in range(max(lower, record.max_seq_delivered + 1), upper + 1):
                event = self.buffers.holds(sender, seq)
                if event is None:
                    return None
                events.append(event)
        return tuple(events)

    def commit(
        self, cycle: int, events: Iterable[Event], windows: Optional[Windows] = None
    ) -> list[DeliverySlot]:
        """Moves the events of `cycle` into Q_d in gamma order and advances the cycle."""
        active = self.senders.active(cycle)
        offsets = gamma_offsets(cycle, active)

        ordered = []
        for event in events:
            if event.sender not in offsets:
                logger.warning(f"Skipping {event.key} at cycle {cycle}: sender not active")
                continue
            ordered.append((event.seq + offsets[event.sender], event))
        ordered.sort(key=lambda pair: pair[0])

        slots = [self.queue.insert(cycle, g, event) for g, event in ordered]

        for record in active:
            if self.mode == LateEventMode.SIMPLE_DISCARD:
                record.max_seq_delivered = max(
                    record.max_seq_delivered, seq_of_cycle(record, cycle)
                )
            else:
                best = max(
                    (e.seq for _, e in ordered if e.sender == record.id and not e.is_empty),
                    default=-1,
                )
                record.max_seq_delivered = max(record.max_seq_delivered, best)
            self.buffers.purge(record.id, record.max_seq_delivered)

        if windows is not None:
            self.delivered_windows[cycle] = windows
        self.buffers.clear_cycle(cycle)
        self.proposed.discard(cycle)
        self.queried.pop(cycle, None)
        self.clock.advance()

        if self.on_control is not None:
            for slot in slots:
                if slot.event.is_operation:
                    self.on_control(cycle, slot.event)

        if self.on_commit is not None:
            self.on_commit(cycle, slots, windows)

        return slots

    def replay(self, slots: Iterable[DeliverySlot], through_cycle: int) -> int:
        """Delivers slots ordered elsewhere that this replica has not delivered yet.

        Returns the number of slots replayed. The result must reproduce the same
        lambda and gamma for every slot, otherwise the queues were not prefix related.
        """
        fresh = [s for s in slots if s.lam >= self.queue.next_lambda]
        replayed = 0
        for cycle, group in groupby(fresh, key=lambda s: s.cycle):
            batch = list(group)
            if cycle < self.cycle:
                raise ProtocolViolation(
                    f"replayed slot at cycle {cycle} precedes next undelivered cycle {self.cycle}"
                )
            while self.cycle < cycle:
                self.clock.advance()

            produced = self.commit(cycle, [s.event for s in batch])
            for expected, got in zip(batch, produced):
                if (expected.lam, expected.gamma) != (got.lam, got.gamma):
                    raise ProtocolViolation(
                        f"replay diverged at cycle {cycle}: expected {expected.key}/{expected.lam}, got {got.key}/{got.lam}"
                    )
            replayed += len(batch)

        while self.cycle < through_cycle:
            self.clock.advance()

        return replayed

    def reset_consensus_marks(self) -> None:
        """Forgets queries and proposals, so stuck cycles are queried again."""
        self.proposed.clear()
        self.queried.clear()
