#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Model definitions module."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Hashable, Literal


class SimulationError(Exception):
    """Exception raised when a simulated run cannot continue."""


class ProtocolViolation(SimulationError):
    """Exception raised when a replica observes a broken safety property."""


class GroupFailedError(SimulationError):
    """Exception raised when no initialized replica of the group survives."""


class EmptyCandidateSetError(SimulationError):
    """Exception raised when a leader has to be selected from an empty candidate set."""


class InactiveSenderError(ValueError):
    """Exception raised when a cycle precedes the first cycle of a sender."""


class EmptyNodeSetError(ValueError):
    """Exception raised when a master node is resolved against an empty node set."""


class ScenarioError(ValueError):
    """Exception raised when a scenario or experiment plan is inconsistent."""


ReplicaId = int
Address = Hashable
Approach = Literal["fast", "primary_backup", "reliable_primary_backup", "consensus_total_order"]


class PayloadKind(str, Enum):
    """Enum for the three kinds of event payload."""

    OPERATION = "operation"
    EMPTY = "empty"
    BOTTOM = "bottom"


class Strategy(str, Enum):
    """Enum for replication strategies a run can use."""

    FAST = "fast"
    PRIMARY_BACKUP = "primary_backup"
    RELIABLE_PRIMARY_BACKUP = "reliable_primary_backup"
    CONSENSUS = "consensus_total_order"


class LateEventMode(str, Enum):
    """Enum for the handling of late and out-of-order events."""

    DYNAMIC = "dynamic"
    SIMPLE_DISCARD = "simple_discard"


class DeliveryOutcome(str, Enum):
    """Enum for the result of a cycle delivery attempt."""

    DELIVERED = "Delivered"
    AWAITING = "AwaitingConsensus"
    NOT_READY = "NotReady"


class ControlKind(str, Enum):
    """Enum for neighbor control operations carried inside events."""

    ADD_NEIGHBOR = "ADD_NEIGHBOR"
    RM_NEIGHBOR = "RM_NEIGHBOR"


class ComponentKind(str, Enum):
    """Enum for content component kinds."""

    ANIMATION = "animation"
    SOUND = "sound"
    TEXTURE = "texture"
    SCRIPT = "script"
    OTHER = "other"


class MessageKind(str, Enum):
    """Enum for every message type crossing the simulated network."""

    EVENT = "EVENT"
    QUERY = "QUERY"
    QUERY_REPLY = "QUERY_REPLY"
    CONSENSUS_QUERY = "CONSENSUS_QUERY"
    QUERY_RESULT = "QUERY_RESULT"
    DECISION = "DECISION"
    GC_LAMBDA = "GC_LAMBDA"
    HEARTBEAT = "HEARTBEAT"
    MEMBER_STATE = "MEMBER_STATE"
    LE_QUERY = "LE_QUERY"
    LE_STATE = "LE_STATE"
    LOAD_LEADER = "LOAD_LEADER"
    NACK = "NACK"
    ACK = "ACK"
    GR_QUERY = "GR_QUERY"
    GE_STATE = "GE_STATE"
    LOAD_CONFIG = "LOAD_CONFIG"
    GROUP_CONFIG = "GROUP_CONFIG"
    HANDSHAKE = "HANDSHAKE"
    UPDATE = "UPDATE"
    PB_FORWARD = "PB_FORWARD"
    PB_ACK = "PB_ACK"


@dataclass(frozen=True, order=True)
class SenderId:
    """Identifier of an event sender, ordered by base id then join timestamp."""

    base_id: bytes
    join_timestamp: float = 0.0

    def __str__(self) -> str:
        """Short human readable form, used in logs."""
        return f"{self.base_id.decode(errors='replace')}@{self.join_timestamp:g}"


@dataclass(frozen=True)
class Payload:
    """Event payload: an opaque operation, a consensus filler or a local placeholder."""

    kind: PayloadKind
    data: bytes = b""

    @classmethod
    def operation(cls, data: bytes = b"") -> "Payload":
        """Returns an operation payload wrapping `data`."""
        return cls(PayloadKind.OPERATION, data)


EMPTY = Payload(PayloadKind.EMPTY)
BOTTOM = Payload(PayloadKind.BOTTOM)


@dataclass(frozen=True)
class Event:
    """The unit of replication: one sender's contribution to one cycle."""

    sender: SenderId
    seq: int
    payload: Payload

    def __post_init__(self):
        if self.seq < 0:
            raise ValueError(f"sequence numbers are non-negative, got {self.seq}")

    @property
    def key(self) -> tuple[SenderId, int]:
        """(sender, seq) identity of the event."""
        return (self.sender, self.seq)

    @property
    def is_bottom(self) -> bool:
        return self.payload.kind == PayloadKind.BOTTOM

    @property
    def is_empty(self) -> bool:
        return self.payload.kind == PayloadKind.EMPTY

    @property
    def is_operation(self) -> bool:
        return self.payload.kind == PayloadKind.OPERATION


@dataclass(frozen=True)
class DeliverySlot:
    """An entry of the delivery queue."""

    cycle: int
    gamma: int
    event: Event
    lam: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.cycle, self.gamma)


@dataclass(frozen=True)
class ControlOp:
    """Neighbor change carried inside an operation payload."""

    kind: ControlKind
    client: SenderId
    group: int = 0


@dataclass(frozen=True)
class Message:
    """Envelope for everything sent through the transport."""

    kind: MessageKind
    src: Address
    dst: Address
    body: Any = None
    epoch: int = 0
    cid: int = 0
    msg_id: int = field(default=0, compare=False)
