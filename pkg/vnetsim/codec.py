#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Canonical binary serialization for events, delivery slots and queues.

Layout (all integers little-endian):

    sender   := u16 len(base_id) | base_id | f64 join_timestamp
    event    := sender | u64 seq | u8 kind | u32 len(data) | data
    slot     := i64 cycle | u32 gamma | u64 lambda | event
    queue    := i64 applied_upto | i64 pruned_upto (-1 when none) | u64 next_lambda
                | u32 count | slot*
    decision := i64 cycle | u32 count | event*

Operation payloads produced by clients embed neighbor changes ahead of the application bytes:

    operation := u8 count | (u8 kind | sender | u32 group)* | application bytes
"""

import logging
import struct
from typing import Iterable, Sequence

from .models import ControlKind, ControlOp, DeliverySlot, Event, Payload, PayloadKind, SenderId

logger = logging.getLogger(__name__)

_KIND_CODES = {PayloadKind.OPERATION: 0, PayloadKind.EMPTY: 1, PayloadKind.BOTTOM: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}
_CONTROL_CODES = {ControlKind.ADD_NEIGHBOR: 1, ControlKind.RM_NEIGHBOR: 2}
_CODE_CONTROLS = {v: k for k, v in _CONTROL_CODES.items()}


def encode_sender(sender: SenderId) -> bytes:
    return struct.pack("<H", len(sender.base_id)) + sender.base_id + struct.pack(
        "<d", sender.join_timestamp
    )


def decode_sender(buf: bytes, offset: int = 0) -> tuple[SenderId, int]:
    (size,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    base_id = bytes(buf[offset : offset + size])
    offset += size
    (joined,) = struct.unpack_from("<d", buf, offset)
    return SenderId(base_id, joined), offset + 8


def encode_event(event: Event) -> bytes:
    """Serializes an event. Bottom placeholders never leave a replica and are refused."""
    if event.is_bottom:
        raise ValueError("bottom placeholders are local markers and cannot be encoded")

    data = event.payload.data
    return (
        encode_sender(event.sender)
        + struct.pack("<QBI", event.seq, _KIND_CODES[event.payload.kind], len(data))
        + data
    )


def decode_event(buf: bytes, offset: int = 0) -> tuple[Event, int]:
    sender, offset = decode_sender(buf, offset)
    seq, kind, size = struct.unpack_from("<QBI", buf, offset)
    offset += struct.calcsize("<QBI")
    data = bytes(buf[offset : offset + size])
    return Event(sender, seq, Payload(_CODE_KINDS[kind], data)), offset + size


def encode_slot(slot: DeliverySlot) -> bytes:
    return struct.pack("<qIQ", slot.cycle, slot.gamma, slot.lam) + encode_event(slot.event)


def decode_slot(buf: bytes, offset: int = 0) -> tuple[DeliverySlot, int]:
    cycle, gamma, lam = struct.unpack_from("<qIQ", buf, offset)
    event, offset = decode_event(buf, offset + struct.calcsize("<qIQ"))
    return DeliverySlot(cycle, gamma, event, lam), offset


def encode_slots(
    slots: Iterable[DeliverySlot], applied_upto: int, pruned_upto: int | None, next_lambda: int
) -> bytes:
    body = [encode_slot(slot) for slot in slots]
    header = struct.pack(
        "<qqQI",
        applied_upto,
        -1 if pruned_upto is None else pruned_upto,
        next_lambda,
        len(body),
    )
    return header + b"".join(body)


def decode_slots(buf: bytes) -> tuple[list[DeliverySlot], int, int | None, int]:
    """Returns (slots, applied_upto, pruned_upto, next_lambda)."""
    applied, pruned, next_lambda, count = struct.unpack_from("<qqQI", buf, 0)
    offset = struct.calcsize("<qqQI")
    slots = []
    for _ in range(count):
        slot, offset = decode_slot(buf, offset)
        slots.append(slot)
    return slots, applied, (None if pruned < 0 else pruned), next_lambda


def encode_decision(cycle: int, events: Sequence[Event]) -> bytes:
    ordered = sorted(events, key=lambda e: e.key)
    return struct.pack("<qI", cycle, len(ordered)) + b"".join(encode_event(e) for e in ordered)


def encode_operation(app: bytes, controls: Sequence[ControlOp] = ()) -> bytes:
    """Builds the operation bytes a client sends, embedding neighbor changes."""
    parts = [struct.pack("<B", len(controls))]
    for control in controls:
        parts.append(struct.pack("<B", _CONTROL_CODES[control.kind]))
        parts.append(encode_sender(control.client))
        parts.append(struct.pack("<I", control.group))
    parts.append(app)
    return b"".join(parts)


def decode_operation(data: bytes) -> tuple[bytes, list[ControlOp]]:
    """Splits operation bytes into application bytes and embedded neighbor changes.

    Bytes that were not produced by `encode_operation` are treated as a plain
    application operation without controls.
    """
    if not data:
        return b"", []

    try:
        (count,) = struct.unpack_from("<B", data, 0)
        offset = 1
        controls = []
        for _ in range(count):
            (code,) = struct.unpack_from("<B", data, offset)
            client, offset = decode_sender(data, offset + 1)
            (group,) = struct.unpack_from("<I", data, offset)
            offset += 4
            controls.append(ControlOp(_CODE_CONTROLS[code], client, group))
    except (struct.error, KeyError):
        logger.debug("Operation bytes carry no control header, treating as opaque")
        return data, []

    return data[offset:], controls
