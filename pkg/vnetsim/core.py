#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Shared domain vocabulary: cycle clock, delivery queue and the replicated application."""

import bisect
import logging
import math
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

from .codec import encode_event, encode_slots
from .helpers import DEFAULT_HASH, HashProvider
from .models import DeliverySlot, Event, SenderId

logger = logging.getLogger(__name__)

NONE_APPLIED = -1


def order_key(slot: DeliverySlot) -> tuple[int, int]:
    """Delivery order of a slot: cycle first, then the in-cycle index."""
    return (slot.cycle, slot.gamma)


@dataclass
class CycleClock:
    """Group cycle grid. Cycle `c` spans [t_0 + c*dt, t_0 + (c+1)*dt)."""

    cycle_length_ms: float
    first_cycle_time: float
    current_cycle: int = 0
    now: float = 0.0

    def start_of(self, cycle: int) -> float:
        return self.first_cycle_time + cycle * self.cycle_length_ms

    def deadline(self, cycle: int) -> float:
        """Instant at which the collection of `cycle` closes."""
        return self.first_cycle_time + (cycle + 1) * self.cycle_length_ms

    def cycle_at(self, instant: float) -> int:
        """Cycle whose span contains `instant`."""
        return math.floor(round((instant - self.first_cycle_time) / self.cycle_length_ms, 9))

    def advance(self) -> int:
        """Moves to the next cycle once the current one has been delivered."""
        self.current_cycle += 1
        return self.current_cycle


class DeliveryQueue:
    """The replicated log Q_d.

    Slots are kept in (cycle, gamma) order. The delivery sequence number lambda is
    assigned when a slot is inserted and never renumbered, so pruning leaves the
    lambda of every surviving slot untouched.
    """

    def __init__(self):
        self._slots: list[DeliverySlot] = []
        self._by_key: dict[tuple[int, int], DeliverySlot] = {}
        self.next_lambda = 0
        self.applied_upto = NONE_APPLIED
        self.pruned_upto: Optional[int] = None

    def __len__(self) -> int:
        return len(self._slots)

    def __iter__(self) -> Iterator[DeliverySlot]:
        return iter(self._slots)

    @property
    def slots(self) -> tuple[DeliverySlot, ...]:
        return tuple(self._slots)

    @property
    def last_slot(self) -> Optional[DeliverySlot]:
        return self._slots[-1] if self._slots else None

    @property
    def last_lambda(self) -> Optional[int]:
        """Lambda of the most recently inserted slot, pruned or not."""
        return self.next_lambda - 1 if self.next_lambda else None

    @property
    def last_cycle(self) -> Optional[int]:
        return self._slots[-1].cycle if self._slots else None

    def insert(self, cycle: int, gamma: int, event: Event) -> DeliverySlot:
        """Appends a slot. Keys must arrive in strictly increasing (cycle, gamma) order."""
        if event.is_bottom:
            raise ValueError("bottom placeholders never enter the delivery queue")

        if self._slots and (cycle, gamma) <= self._slots[-1].key:
            raise ValueError(
                f"slot ({cycle}, {gamma}) does not follow {self._slots[-1].key} in delivery order"
            )

        slot = DeliverySlot(cycle=cycle, gamma=gamma, event=event, lam=self.next_lambda)
        self._slots.append(slot)
        self._by_key[slot.key] = slot
        self.next_lambda += 1
        return slot

    def lambda_of(self, cycle: int, gamma: int) -> Optional[int]:
        slot = self._by_key.get((cycle, gamma))
        return slot.lam if slot else None

    def slot_at(self, lam: int) -> Optional[DeliverySlot]:
        if not self._slots:
            return None

        index = lam - self._slots[0].lam
        if 0 <= index < len(self._slots):
            return self._slots[index]

        return None

    def cycle_slots(self, cycle: int) -> list[DeliverySlot]:
        """Slots delivered for `cycle`, in gamma order."""
        lo = bisect.bisect_left(self._slots, (cycle, -1), key=order_key)
        hi = bisect.bisect_left(self._slots, (cycle + 1, -1), key=order_key)
        return self._slots[lo:hi]

    def find_event(self, sender: SenderId, seq: int) -> Optional[DeliverySlot]:
        """Most recent slot holding (sender, seq)."""
        for slot in reversed(self._slots):
            if slot.event.sender == sender and slot.event.seq == seq:
                return slot
        return None

    def mark_applied(self, lam: int) -> None:
        if lam < self.applied_upto:
            raise ValueError(f"applied_upto cannot move back from {self.applied_upto} to {lam}")
        self.applied_upto = lam

    def prune_upto(self, lam: int) -> list[DeliverySlot]:
        """Removes every slot with lambda <= `lam` and returns them."""
        cut = 0
        while cut < len(self._slots) and self._slots[cut].lam <= lam:
            cut += 1

        removed, self._slots = self._slots[:cut], self._slots[cut:]
        for slot in removed:
            del self._by_key[slot.key]

        if self.pruned_upto is None or lam > self.pruned_upto:
            self.pruned_upto = lam

        return removed

    def is_prefix_compatible(self, other: "DeliveryQueue") -> bool:
        """True when both queues agree on every lambda they both still hold."""
        for slot in self._slots:
            theirs = other.slot_at(slot.lam)
            if theirs is not None and theirs != slot:
                return False
        return True

    def adopt(self, other: "DeliveryQueue") -> None:
        """Takes the slots of `other`. applied_upto never moves backwards."""
        self._slots = list(other._slots)
        self._by_key = dict(other._by_key)
        self.next_lambda = other.next_lambda
        self.pruned_upto = other.pruned_upto
        self.applied_upto = max(self.applied_upto, other.applied_upto)

    def copy(self) -> "DeliveryQueue":
        clone = DeliveryQueue()
        clone._slots = list(self._slots)
        clone._by_key = dict(self._by_key)
        clone.next_lambda = self.next_lambda
        clone.applied_upto = self.applied_upto
        clone.pruned_upto = self.pruned_upto
        return clone

    def encode(self) -> bytes:
        return encode_slots(self._slots, self.applied_upto, self.pruned_upto, self.next_lambda)


def lambda_of(queue: DeliveryQueue, cycle: int, gamma: int) -> Optional[int]:
    """Lambda of the slot at (cycle, gamma), or None when absent."""
    return queue.lambda_of(cycle, gamma)


def last_applied(queue: DeliveryQueue) -> int:
    """Last lambda handed to the application, NONE_APPLIED before the first one."""
    return queue.applied_upto


class ApplicationState:
    """Deterministic application: the state is a hash fold over applied events."""

    def __init__(self, hasher: HashProvider = DEFAULT_HASH, state: Optional[bytes] = None):
        self.hasher = hasher
        self.state = state if state is not None else bytes(hasher.digest_size)

    def apply(self, lam: int, event: Event) -> Optional[bytes]:
        """Folds `event` into the state. Empty events are no-ops and return None."""
        if event.is_bottom:
            raise ValueError("bottom placeholders never reach the application")

        if event.is_empty:
            return None

        self.state = self.hasher.digest_many(
            [self.state, struct.pack("<q", lam), encode_event(event)]
        )
        return self.state
