#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Gossip garbage collection of the delivery queue."""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional

from .core import NONE_APPLIED, DeliveryQueue
from .models import DeliverySlot, MessageKind, ReplicaId

if TYPE_CHECKING:
    from .replica import Replica

logger = logging.getLogger(__name__)


@dataclass
class GossipState:
    """Last reported lambda_c per member, and the current common watermark."""

    acks: dict[ReplicaId, int] = field(default_factory=dict)
    gossip_period_ms: float = 5000.0
    cle: Optional[int] = None


def trailing_empty_cutoff(queue: DeliveryQueue, cle: int) -> int:
    """Steps the watermark back over trailing Empty slots when it sits on the last slot."""
    if queue.last_lambda != cle:
        return cle

    while True:
        slot = queue.slot_at(cle)
        if slot is None or not slot.event.is_empty:
            return cle
        cle -= 1


def common_watermark(acks: dict[ReplicaId, int], members: Iterable[ReplicaId]) -> Optional[int]:
    """Minimum reported lambda_c, or None while some member has not reported."""
    values = []
    for member in members:
        if member not in acks:
            return None
        values.append(acks[member])
    return min(values) if values else None


class GarbageCollector:
    """Learns lambda_cle from gossip and prunes the delivery queue up to it."""

    def __init__(self, host: "Replica", period_ms: float, enabled: bool = True):
        self.host = host
        self.enabled = enabled
        self.state = GossipState(gossip_period_ms=period_ms)

    def start(self) -> None:
        if self.enabled:
            self.host.later(self.state.gossip_period_ms, self.gossip_tick)

    def gossip_tick(self) -> None:
        """Broadcasts this replica's lambda_c to the group and re-arms the timer."""
        if self.host.is_member:
            self.host.multicast(
                MessageKind.GC_LAMBDA,
                sorted(self.host.group.members),
                self.host.queue.applied_upto,
            )
        self.host.later(self.state.gossip_period_ms, self.gossip_tick)

    def on_lambda(self, src: ReplicaId, lam: int) -> Optional[list[DeliverySlot]]:
        """Records a report and prunes once every member of G has reported."""
        group = self.host.group
        if src not in group.members:
            return None

        if lam == NONE_APPLIED or lam <= self.state.acks.get(src, NONE_APPLIED):
            return None

        self.state.acks[src] = lam
        cle = common_watermark(self.state.acks, sorted(group.members))
        if cle is None:
            return None

        queue = self.host.queue
        cle = min(cle, queue.applied_upto)
        cle = trailing_empty_cutoff(queue, cle)
        self.state.cle = cle
        if cle < 0 or (queue.pruned_upto is not None and cle <= queue.pruned_upto):
            return None

        self.host.observer.on_prune(self.host, cle)
        removed = queue.prune_upto(cle)
        if removed:
            logger.debug(
                f"r{self.host.replica_id} pruned lambda {removed[0].lam}..{removed[-1].lam}"
            )
            self.host.forget_decisions_before(removed[-1].cycle)
        return removed

    def reset_members(self, members: Iterable[ReplicaId]) -> None:
        """Drops reports of replicas no longer in G; new members must report first."""
        keep = set(members)
        self.state.acks = {r: v for r, v in self.state.acks.items() if r in keep}
