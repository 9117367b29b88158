#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Global observer checking safety properties across every replica of a run."""

import logging
import struct
from collections import Counter
from typing import TYPE_CHECKING, Hashable, Iterable, Optional

from .codec import encode_decision
from .delivery import Windows
from .helpers import DEFAULT_HASH, HashProvider
from .models import DeliverySlot, Event, SenderId

if TYPE_CHECKING:
    from .interaction import ClientActor
    from .replica import Replica

logger = logging.getLogger(__name__)

MAX_RECORDED = 50


class GlobalObserver:
    """Sees every replica's delivery and reports broken invariants as violations."""

    def __init__(self, hasher: HashProvider = DEFAULT_HASH):
        self.hasher = hasher
        self.violations: Counter = Counter()
        self.details: list[str] = []

        self.by_lambda: dict[int, tuple[int, int, Event]] = {}
        self.state_by_lambda: dict[int, bytes] = {}
        self.lambda_by_event: dict[tuple[SenderId, int], int] = {}
        self.windows: dict[tuple[int, SenderId], tuple[int, int]] = {}
        self.loads: dict[Hashable, bytes] = {}
        self.joins: dict[SenderId, int] = {}
        self.sent: set[tuple[SenderId, int]] = set()
        self.replicas: dict[int, "Replica"] = {}

    def register(self, replica: "Replica") -> None:
        self.replicas[replica.replica_id] = replica

    def violation(self, kind: str, detail: str) -> None:
        self.violations[kind] += 1
        if len(self.details) < MAX_RECORDED:
            self.details.append(f"{kind}: {detail}")
        logger.error(f"Invariant {kind} broken: {detail}")

    @property
    def clean(self) -> bool:
        return not self.violations

    def on_windows(self, replica: "Replica", cycle: int, windows: Windows) -> None:
        """Every replica computes the same expected window per sender and cycle."""
        for sender, lower, upper in windows:
            seen = self.windows.setdefault((cycle, sender), (lower, upper))
            if seen != (lower, upper):
                self.violation(
                    "omega",
                    f"r{replica.replica_id} window {sender}@{cycle} = {(lower, upper)}, others {seen}",
                )

    def on_apply(self, replica: "Replica", slot: DeliverySlot, state: bytes) -> None:
        placed = (slot.cycle, slot.gamma, slot.event)
        seen = self.by_lambda.setdefault(slot.lam, placed)
        if seen != placed:
            self.violation(
                "total_order", f"r{replica.replica_id} lambda {slot.lam} holds {slot.key}, others {seen[:2]}"
            )

        digest = self.state_by_lambda.setdefault(slot.lam, state)
        if digest != state:
            self.violation("state", f"r{replica.replica_id} state differs after lambda {slot.lam}")

        if slot.event.is_operation:
            lam = self.lambda_by_event.setdefault(slot.event.key, slot.lam)
            if lam != slot.lam:
                self.violation(
                    "event_lambda", f"{slot.event.key} delivered at lambda {slot.lam} and {lam}"
                )

    def on_prune(self, replica: "Replica", lam: int) -> None:
        """No live member may still need a slot that is about to be pruned."""
        for other in self._live_members(replica):
            if other.queue.applied_upto < lam:
                self.violation(
                    "gc",
                    f"r{replica.replica_id} prunes up to {lam}, r{other.replica_id} applied {other.queue.applied_upto}",
                )

    def _live_members(self, replica: "Replica") -> Iterable["Replica"]:
        for rid in sorted(replica.group.members):
            other = self.replicas.get(rid)
            if other is not None and other.alive and other.is_member:
                yield other

    def snapshot(self, replica: "Replica") -> bytes:
        """Digest of the state a load must make identical across replicas."""
        group = replica.group
        parts = [
            struct.pack(
                "<qqq", replica.queue.next_lambda, replica.queue.applied_upto, replica.engine.cycle
            ),
            replica.app.state,
            repr((group.epoch, group.cid, group.leader, sorted(group.members))).encode(),
            repr(
                [
                    (r.id, r.first_cycle, r.max_seq_delivered, r.last_cycle)
                    for r in replica.engine.senders
                ]
            ).encode(),
        ]
        for cycle in sorted(c for c in replica.engine.decided if c >= replica.engine.cycle):
            parts.append(encode_decision(cycle, replica.engine.decided[cycle]))
        return self.hasher.digest_many(parts)

    def on_state_loaded(self, replica: "Replica", tag: Hashable) -> None:
        digest = self.snapshot(replica)
        seen = self.loads.setdefault(tag, digest)
        if seen != digest:
            self.violation("state_sync", f"r{replica.replica_id} loaded a different state for {tag}")

    def on_decision_applied(self, replica: "Replica", cycle: int) -> None:
        if replica.group.busy:
            self.violation(
                "priority", f"r{replica.replica_id} applied a decision for {cycle} while LE/GR is set"
            )

    def on_join(self, replica: "Replica", sender: SenderId, first_cycle: int) -> None:
        seen = self.joins.setdefault(sender, first_cycle)
        if seen != first_cycle:
            self.violation(
                "join", f"r{replica.replica_id} starts {sender} at {first_cycle}, others at {seen}"
            )

    def on_sent(self, event: Event) -> None:
        self.sent.add(event.key)

    def on_update_received(self, client: "ClientActor", sender: SenderId, seq: int) -> None:
        if (sender, seq) not in self.sent:
            self.violation("phantom", f"{client.id} got an update for unsent {sender}#{seq}")

    def first_lambda(self, sender: SenderId) -> Optional[int]:
        lams = [lam for (s, _), lam in self.lambda_by_event.items() if s == sender]
        return min(lams) if lams else None

    def last_lambda(self, sender: SenderId) -> Optional[int]:
        lams = [lam for (s, _), lam in self.lambda_by_event.items() if s == sender]
        return max(lams) if lams else None

    def finalize(self, replicas: Iterable["Replica"]) -> Optional[bool]:
        """Checks that live members agree on one leader and one epoch at the end."""
        members = [r for r in replicas if r.alive and r.is_member]
        if not members:
            return None

        views = {(r.group.leader, r.group.epoch) for r in members}
        if len(views) != 1:
            self.violation("leader", f"live members disagree on leader/epoch: {sorted(views, key=repr)}")
            return False
        return True
