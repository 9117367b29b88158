#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Small builders shared by the unit tests."""

from vnetsim.core import DeliveryQueue
from vnetsim.delivery import SenderRecord
from vnetsim.membership import InitPackage, SyncPackage
from vnetsim.models import EMPTY, Event, Payload, SenderId


def sid(name: str, joined: float = 0.0) -> SenderId:
    return SenderId(name.encode(), joined)


def make_record(name: str, first_cycle: int = 0, max_seq: int = -1) -> SenderRecord:
    return SenderRecord(
        id=sid(name), t_start=1000.0 + first_cycle * 200.0, first_cycle=first_cycle, max_seq_delivered=max_seq
    )


def op(name: str, seq: int, data: bytes = b"x") -> Event:
    return Event(sid(name), seq, Payload.operation(data))


def empty(name: str, seq: int) -> Event:
    return Event(sid(name), seq, EMPTY)


def filled_queue(length: int, empty_tail: int = 0) -> DeliveryQueue:
    """Queue with one slot per cycle, every slot applied; the last `empty_tail` slots are Empty."""
    queue = DeliveryQueue()
    for cycle in range(length):
        event = empty("a", cycle) if cycle >= length - empty_tail else op("a", cycle)
        queue.insert(cycle, cycle, event)
    if length:
        queue.mark_applied(length - 1)
    return queue


def package(replica: int, queue: DeliveryQueue, epoch: int = 0, cid: int = 0, decided=None) -> SyncPackage:
    init = InitPackage(
        t0=1000.0,
        senders=(make_record("a"),),
        cycle=queue.last_cycle + 1 if queue.last_cycle is not None else 0,
        applied=queue.applied_upto,
        state=bytes(32),
        ages=((replica, 0),),
        recipients=(sid("a"),),
    )
    return SyncPackage(
        replica=replica,
        queue=queue,
        decided=decided or {},
        config=(cid, frozenset({0, 1, 2})),
        epoch=epoch,
        init=init,
    )
