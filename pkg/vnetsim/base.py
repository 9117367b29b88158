#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Base interfaces for simulated actors and replication strategies."""

import logging
from abc import ABC, abstractmethod
from typing import Any, Callable, Iterable, Optional

from .config import SimScenario
from .core import CycleClock
from .models import Address, Message, MessageKind, ReplicaId, Strategy
from .simnet import COLLECT, TIMER, Simulator, Transport

logger = logging.getLogger(__name__)

RENDEZVOUS: Address = "rendezvous"


class BaseActor(ABC):
    """Basic interface for anything that sends and receives simulated messages."""

    role: str

    def __init__(self, address: Address, sim: Simulator, transport: Transport):
        for field in ("role",):
            if not getattr(self, field, None):
                raise AttributeError(
                    f"{field} not defined on BaseActor interface, did you forget to set the {field} class variable?"
                )

        self.address = address
        self.sim = sim
        self.transport = transport
        self.alive = True
        transport.register(self)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.address})"

    @property
    def now(self) -> float:
        return self.sim.now

    def at(self, instant: float, callback: Callable[..., Any], *args: Any, priority: int = TIMER):
        """Schedules `callback` on this actor; it is skipped if the actor has crashed by then."""

        def _guarded(*inner: Any) -> None:
            if self.alive:
                callback(*inner)

        self.sim.schedule(instant, _guarded, *args, priority=priority)

    def later(self, delay: float, callback: Callable[..., Any], *args: Any, priority: int = TIMER):
        self.at(self.sim.now + delay, callback, *args, priority=priority)

    def send(self, kind: MessageKind, dst: Address, body: Any = None, **kw) -> None:
        self.transport.send(Message(kind=kind, src=self.address, dst=dst, body=body, **kw))

    def multicast(self, kind: MessageKind, dsts: Iterable[Address], body: Any = None, **kw):
        self.transport.multicast(kind, self.address, dsts, body, **kw)

    def crash(self) -> None:
        """Stops the actor; pending timers and in-flight messages to it are discarded."""
        if self.alive:
            logger.info(f"{self!r} crashed at {self.now:.0f} ms")
        self.alive = False

    @abstractmethod
    def start(self) -> None:
        """Arms the actor's initial timers."""
        ...

    @abstractmethod
    def receive(self, msg: Message) -> None:
        """Handles one incoming message."""
        ...


class BaseReplica(BaseActor):
    """Basic interface shared by every replication strategy's replica."""

    role = "replica"
    strategy: Strategy

    def __init__(
        self,
        replica_id: ReplicaId,
        sim: Simulator,
        transport: Transport,
        scenario: SimScenario,
        clock: CycleClock,
    ):
        super().__init__(replica_id, sim, transport)

        for field in ("strategy",):
            if not getattr(self, field, None):
                raise AttributeError(
                    f"{field} not defined on BaseReplica interface, did you forget to set the {field} class variable?"
                )

        self.replica_id = replica_id
        self.scenario = scenario
        self.clock = clock
        self.collected_upto = max(clock.cycle_at(sim.now), 0) - 1
        self.created_at = sim.now

    def start(self) -> None:
        self.heartbeat()
        deadline = self.clock.deadline(self.collected_upto + 1)
        self.at(deadline, self._collect_timer, priority=COLLECT)

    def heartbeat(self) -> None:
        """Liveness beacon to the Rendezvous, once per cycle."""
        self.send(MessageKind.HEARTBEAT, RENDEZVOUS, self.replica_id)
        self.later(self.clock.cycle_length_ms, self.heartbeat)

    def _collect_timer(self) -> None:
        cycle = self.collected_upto + 1
        self.collected_upto = cycle
        self.on_cycle_timeout(cycle)
        self.at(self.clock.deadline(cycle + 1), self._collect_timer, priority=COLLECT)

    @property
    def initialized(self) -> bool:
        return True

    @property
    def holds_state(self) -> bool:
        """True when this replica can keep the group state alive."""
        return self.initialized

    @property
    def queue_length(self) -> Optional[int]:
        """Current delivery queue length, None when the replica keeps no queue."""
        return None

    @abstractmethod
    def on_cycle_timeout(self, cycle: int) -> None:
        """Called when the collection of `cycle` closes."""
        ...

    @abstractmethod
    def on_member_state(self, live: frozenset[ReplicaId], created: frozenset[ReplicaId]) -> None:
        """Called with the live set R announced by the Rendezvous."""
        ...
