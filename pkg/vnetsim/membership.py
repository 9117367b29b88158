#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Failure detection, leader election and group reconfiguration."""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Optional

from .base import BaseActor
from .config import SimScenario
from .core import CycleClock, DeliveryQueue
from .delivery import SenderRecord
from .helpers import DEFAULT_HASH, HashProvider
from .codec import encode_decision
from .consensus import conflicting
from .models import (
    EmptyCandidateSetError,
    Event,
    Message,
    MessageKind,
    ProtocolViolation,
    ReplicaId,
    SenderId,
    SimulationError,
)
from .simnet import Simulator, Transport

if TYPE_CHECKING:
    from .replica import Replica

logger = logging.getLogger(__name__)

ELECTION = "election"
RECONFIG = "reconfig"


@dataclass
class GroupState:
    """A replica's view of its group and of the protocol flags."""

    members: frozenset[ReplicaId]
    live: frozenset[ReplicaId]
    leader: Optional[ReplicaId] = None
    candidate: Optional[ReplicaId] = None
    reconfig_target: Optional[frozenset[ReplicaId]] = None
    epoch: int = 0
    cid: int = 0
    ages: dict[ReplicaId, int] = field(default_factory=dict)
    le_flag: bool = False
    gr_flag: bool = False
    new_replica: bool = False
    min_size: int = 5
    spare_count: int = 0

    @property
    def live_members(self) -> frozenset[ReplicaId]:
        """G intersected with R."""
        return self.members & self.live

    @property
    def busy(self) -> bool:
        """True while an election or a reconfiguration holds back consensus."""
        return self.le_flag or self.gr_flag


@dataclass(frozen=True)
class InitPackage:
    """Everything a fresh replica needs to continue from a given delivery point."""

    t0: float
    senders: tuple[SenderRecord, ...]
    cycle: int
    applied: int
    state: bytes
    ages: tuple[tuple[ReplicaId, int], ...]
    recipients: tuple[SenderId, ...]


@dataclass
class SyncPackage:
    """State reported during an election or reconfiguration."""

    replica: ReplicaId
    queue: DeliveryQueue
    decided: dict[int, tuple[Event, ...]]
    config: tuple[int, frozenset[ReplicaId]]
    epoch: int
    init: Optional[InitPackage] = None

    @property
    def initialized(self) -> bool:
        return self.init is not None

    def digest(self, hasher: HashProvider = DEFAULT_HASH) -> bytes:
        parts = [self.queue.encode()]
        for cycle in sorted(self.decided):
            parts.append(encode_decision(cycle, self.decided[cycle]))
        parts.append(repr((self.config[0], sorted(self.config[1]), self.epoch)).encode())
        return hasher.digest_many(parts)


def select_leader(ages: Mapping[ReplicaId, int], candidates: Iterable[ReplicaId]) -> ReplicaId:
    """The youngest candidate, ties broken by the smallest id."""
    pool = sorted(candidates)
    if not pool:
        raise EmptyCandidateSetError("no live member is left to lead the group")
    return min(pool, key=lambda r: (ages.get(r, 0), r))


def longest(packages: Iterable[SyncPackage]) -> SyncPackage:
    """The package with the longest Q_d; every other queue must be a prefix of it."""
    pool = [p for p in packages if p.initialized]
    if not pool:
        raise SimulationError("no initialized state to merge")

    best = max(
        pool, key=lambda p: (p.queue.next_lambda, p.init.cycle, -p.replica)  # type: ignore[union-attr]
    )
    for package in pool:
        if not package.queue.is_prefix_compatible(best.queue):
            raise ProtocolViolation(
                f"Q_d of r{package.replica} is not a prefix of the Q_d of r{best.replica}"
            )
    return best


def merge_decided(packages: Iterable[SyncPackage]) -> dict[int, tuple[Event, ...]]:
    """Union of the decided sets, per cycle."""
    merged: dict[int, tuple[Event, ...]] = {}
    for package in packages:
        for cycle, events in package.decided.items():
            existing = merged.setdefault(cycle, events)
            if conflicting(existing, events):
                raise ProtocolViolation(f"conflicting decisions for cycle {cycle}")
    return merged


def latest_config(packages: Iterable[SyncPackage]) -> tuple[int, frozenset[ReplicaId]]:
    return max((p.config for p in packages), key=lambda config: config[0])


def latest_epoch(packages: Iterable[SyncPackage]) -> int:
    return max(p.epoch for p in packages)


def merge_states(packages: Iterable[SyncPackage]) -> SyncPackage:
    """Longest Q_d, union of decisions, latest configuration and latest epoch."""
    packages = list(packages)
    source = longest(packages)
    return SyncPackage(
        replica=source.replica,
        queue=source.queue,
        decided=merge_decided(packages),
        config=latest_config(packages),
        epoch=latest_epoch(packages),
        init=source.init,
    )


class Rendezvous(BaseActor):
    """Reliable super-peer: heartbeat failure detection and group size repair."""

    role = "rendezvous"

    def __init__(
        self,
        address,
        sim: Simulator,
        transport: Transport,
        scenario: SimScenario,
        clock: CycleClock,
        initial: Iterable[ReplicaId],
        spawn: Callable[[], ReplicaId],
        on_change: Optional[Callable[[frozenset[ReplicaId]], None]] = None,
    ):
        super().__init__(address, sim, transport)
        self.scenario = scenario
        self.clock = clock
        self.spawn = spawn
        self.on_change = on_change
        self.live: frozenset[ReplicaId] = frozenset(initial)
        self.last_seen: dict[ReplicaId, float] = {r: sim.now for r in self.live}
        self.failures_detected = 0
        self.created = 0

    @property
    def threshold_ms(self) -> float:
        return self.scenario.heartbeat_miss_limit * self.clock.cycle_length_ms + 1.0

    def start(self) -> None:
        self.later(self.clock.cycle_length_ms, self._tick)

    def receive(self, msg: Message) -> None:
        if msg.kind == MessageKind.HEARTBEAT and msg.body in self.live:
            self.last_seen[msg.body] = self.now

    def _tick(self) -> None:
        self.rendezvous_tick()
        self.later(self.clock.cycle_length_ms, self._tick)

    def rendezvous_tick(self) -> Optional[tuple[frozenset[ReplicaId], frozenset[ReplicaId]]]:
        """Drops silent replicas, repairs the group and announces any change."""
        failed = frozenset(
            r for r in self.live if self.now - self.last_seen.get(r, self.now) > self.threshold_ms
        )
        live = self.live - failed
        for replica in sorted(failed):
            logger.info(f"Rendezvous: r{replica} missed its heartbeat, treated as failed")
            self.last_seen.pop(replica, None)
        self.failures_detected += len(failed)

        created: set[ReplicaId] = set()
        if len(live) < self.scenario.group_size:
            missing = self.scenario.group_size + self.scenario.spare_count - len(live)
            for _ in range(missing):
                replica = self.spawn()
                created.add(replica)
                self.last_seen[replica] = self.now
            self.created += len(created)
            logger.info(f"Rendezvous: created {sorted(created)} to restore the group size")

        self.live = live | created
        if not failed and not created:
            return None

        if self.on_change is not None:
            self.on_change(self.live)

        payload = (self.live, frozenset(created))
        self.multicast(MessageKind.MEMBER_STATE, sorted(self.live), payload)
        return self.live, frozenset(created)


@dataclass
class _Round:
    started_at: float
    states: dict[ReplicaId, SyncPackage] = field(default_factory=dict)
    acks: set[ReplicaId] = field(default_factory=set)
    phase: str = "collect"
    retry_pending: bool = False
    cid: int = 0
    target: frozenset[ReplicaId] = frozenset()


class MembershipManager:
    """Election and reconfiguration handlers of one replica."""

    def __init__(self, host: "Replica"):
        self.host = host
        self.election: Optional[_Round] = None
        self.reconfig: Optional[_Round] = None

    @property
    def group(self) -> GroupState:
        return self.host.group

    @property
    def me(self) -> ReplicaId:
        return self.host.replica_id

    def _winner(self) -> Optional[ReplicaId]:
        try:
            return select_leader(self.group.ages, self.group.live_members)
        except EmptyCandidateSetError:
            return None

    def on_member_state(self, live: frozenset[ReplicaId], created: frozenset[ReplicaId]) -> None:
        group = self.group
        group.live = live
        self.host.consensus.on_membership_change()

        if not self.host.is_member:
            return

        leader_lost = group.leader is None or group.leader not in live
        candidate_lost = group.le_flag and (group.candidate is None or group.candidate not in live)
        if leader_lost or candidate_lost:
            self.run_leader_election()
        else:
            self._check_election()

        self._check_reconfig()
        self.maybe_reconfigure()

    # Leader election

    def run_leader_election(self) -> None:
        """Raises LE and starts collecting states if this replica is the winner."""
        group = self.group
        winner = self._winner()
        if winner is None:
            return

        group.le_flag = True
        group.candidate = winner
        if self.reconfig is not None:
            logger.info(f"r{self.me}: reconfiguration cid {self.reconfig.cid} interrupted by election")
            self.reconfig = None

        if winner != self.me:
            self.election = None
            return

        if self.election is None:
            self._start_collect()
        else:
            self._check_election()

    def _start_collect(self) -> None:
        self.election = _Round(started_at=self.host.now)
        logger.info(f"r{self.me} runs for leader at epoch {self.group.epoch}")
        self.host.multicast_reliable(MessageKind.LE_QUERY, sorted(self.group.live_members), None)

    def _retry_collect(self) -> None:
        if self.election is None or self.election.phase != "collect":
            return
        self.election.retry_pending = False
        if self._winner() != self.me:
            self._abdicate()
            return
        self.election.states.clear()
        self.host.multicast_reliable(MessageKind.LE_QUERY, sorted(self.group.live_members), None)

    def _abdicate(self) -> None:
        logger.info(f"r{self.me} abdicates its candidacy")
        self.election = None
        self.group.candidate = self._winner()

    def on_le_query(self, src: ReplicaId) -> None:
        if not self.host.is_member:
            return

        if src != self._winner():
            self.host.send_reliable(MessageKind.NACK, src, ELECTION)
            return

        self.group.le_flag = True
        self.group.candidate = src
        self.host.send_reliable(MessageKind.LE_STATE, src, self.host.sync_package())

    def on_le_state(self, src: ReplicaId, package: SyncPackage) -> None:
        if self.election is None or self.election.phase != "collect":
            return
        self.election.states[src] = package
        self._check_election()

    def on_nack(self, src: ReplicaId, tag: str) -> None:
        """Retries after a cycle while still the winner, otherwise abdicates."""
        logger.warning(f"r{self.me} received NACK from r{src} during {tag}")
        if tag != ELECTION or self.election is None:
            return

        if self._winner() != self.me:
            self._abdicate()
            return

        if not self.election.retry_pending:
            self.election.retry_pending = True
            self.host.later(self.host.clock.cycle_length_ms, self._retry_collect)

    def _check_election(self) -> None:
        election = self.election
        if election is None:
            return

        targets = self.group.live_members
        if election.phase == "collect" and targets.issubset(election.states):
            self._finish_election()
        elif election.phase == "ack" and targets.issubset(election.acks):
            self._complete_election()

    def _finish_election(self) -> None:
        election = self.election
        assert election is not None
        group = self.group
        packages = [election.states[r] for r in sorted(group.live_members)]
        merged = merge_states(packages)
        epoch = merged.epoch + 1
        cid, members = merged.config

        self.host.load_state(
            merged, leader=self.me, epoch=epoch, cid=cid, members=members, ages=group.ages
        )
        group.le_flag = True
        group.gr_flag = False

        election.phase = "ack"
        election.acks = {self.me}
        package = self.host.sync_package()
        self.host.observer.on_state_loaded(self.host, (ELECTION, epoch, cid))
        self.host.multicast_reliable(
            MessageKind.LOAD_LEADER, sorted(group.live - {self.me}), (package, self.me)
        )
        self._check_election()

    def on_load_leader(self, src: ReplicaId, package: SyncPackage, leader: ReplicaId) -> None:
        group = self.group
        same_epoch = package.epoch == group.epoch
        if package.epoch < group.epoch or (same_epoch and group.leader == leader):
            logger.debug(f"r{self.me} ignores stale LOAD_LEADER for epoch {package.epoch}")
            return

        ages = dict(package.init.ages) if package.init else group.ages
        cid, members = package.config
        self.host.load_state(
            package, leader=leader, epoch=package.epoch, cid=cid, members=members, ages=ages
        )
        group.le_flag = False
        group.gr_flag = False
        group.candidate = None
        self.election = None
        self.reconfig = None
        self.host.observer.on_state_loaded(self.host, (ELECTION, package.epoch, cid))
        self.host.send_reliable(MessageKind.ACK, src, (ELECTION, package.epoch))
        self.host.consensus.release_held()
        self.host.drive_delivery()

    def _complete_election(self) -> None:
        election = self.election
        assert election is not None
        group = self.group
        group.le_flag = False
        group.candidate = None
        self.election = None

        self.host.metrics.elections += 1
        self.host.metrics.election_durations_ms.append(self.host.now - election.started_at)
        logger.info(f"r{self.me} leads the group at epoch {group.epoch}")

        self.host.notify_senders()
        self.host.consensus.leader_start_instance()
        self.host.consensus.release_held()
        self.host.drive_delivery()
        self.maybe_reconfigure()

    def on_ack(self, src: ReplicaId, tag: tuple[str, int]) -> None:
        kind, number = tag
        if kind == ELECTION and self.election and self.election.phase == "ack":
            if number == self.group.epoch:
                self.election.acks.add(src)
                self._check_election()
        elif kind == RECONFIG and self.reconfig and self.reconfig.phase == "ack":
            if number == self.reconfig.cid:
                self.reconfig.acks.add(src)
                self._check_reconfig()

    # Group reconfiguration

    def maybe_reconfigure(self) -> None:
        """Leader side trigger: new live replicas outside G and R differs from G_T."""
        group = self.group
        if not self.host.is_leader or group.busy or self.election or self.reconfig:
            return

        newcomers = group.live - group.members
        if not newcomers or group.live == group.reconfig_target:
            return

        self.run_group_reconfiguration()

    def run_group_reconfiguration(self) -> None:
        group = self.group
        target = frozenset(group.live)
        group.gr_flag = True
        group.reconfig_target = target
        self.reconfig = _Round(started_at=self.host.now, cid=group.cid + 1, target=target)
        logger.info(f"Leader r{self.me} reconfigures to {sorted(target)} (cid {group.cid + 1})")
        self.host.multicast_reliable(MessageKind.GR_QUERY, sorted(target), target)

    def on_gr_query(self, src: ReplicaId, target: frozenset[ReplicaId], epoch: int, cid: int):
        group = self.group
        if self.host.initialized and (
            group.le_flag or epoch != group.epoch or cid != group.cid or src != group.leader
        ):
            logger.debug(f"r{self.me} drops stale GR_QUERY from r{src}")
            return

        group.gr_flag = True
        group.reconfig_target = target
        self.host.send_reliable(MessageKind.GE_STATE, src, self.host.sync_package())

    def on_ge_state(self, src: ReplicaId, package: SyncPackage) -> None:
        if self.reconfig is None or self.reconfig.phase != "collect":
            return
        self.reconfig.states[src] = package
        self._check_reconfig()

    def _check_reconfig(self) -> None:
        reconfig = self.reconfig
        if reconfig is None:
            return

        targets = reconfig.target & self.group.live
        if reconfig.phase == "collect" and targets.issubset(reconfig.states):
            self._finish_reconfig(targets)
        elif reconfig.phase == "ack" and targets.issubset(reconfig.acks):
            self._complete_reconfig()

    def _finish_reconfig(self, targets: frozenset[ReplicaId]) -> None:
        reconfig = self.reconfig
        assert reconfig is not None
        group = self.group
        merged = merge_states(reconfig.states[r] for r in sorted(targets))
        ages = {r: group.ages.get(r, 0) + 1 for r in targets}

        self.host.load_state(
            merged, leader=self.me, epoch=group.epoch, cid=reconfig.cid, members=targets, ages=ages
        )
        group.gr_flag = True

        reconfig.phase = "ack"
        reconfig.acks = {self.me}
        package = self.host.sync_package()
        self.host.observer.on_state_loaded(self.host, (RECONFIG, group.epoch, reconfig.cid))
        self.host.multicast_reliable(
            MessageKind.LOAD_CONFIG, sorted(targets - {self.me}), package
        )
        self._check_reconfig()

    def on_load_config(self, src: ReplicaId, package: SyncPackage, epoch: int) -> None:
        group = self.group
        cid, members = package.config
        stale = self.host.initialized and (group.le_flag or epoch != group.epoch)
        if stale or cid <= group.cid:
            logger.debug(f"r{self.me} drops stale LOAD_CONFIG cid {cid}")
            return

        ages = dict(package.init.ages) if package.init else {}
        self.host.load_state(package, leader=src, epoch=epoch, cid=cid, members=members, ages=ages)
        group.gr_flag = False
        self.host.observer.on_state_loaded(self.host, (RECONFIG, epoch, cid))
        self.host.send_reliable(MessageKind.ACK, src, (RECONFIG, cid))
        self.host.consensus.release_held()
        self.host.drive_delivery()

    def _complete_reconfig(self) -> None:
        reconfig = self.reconfig
        assert reconfig is not None
        group = self.group
        group.gr_flag = False
        self.reconfig = None

        self.host.metrics.reconfigurations += 1
        self.host.metrics.reconfig_durations_ms.append(self.host.now - reconfig.started_at)
        logger.info(f"Leader r{self.me} completed reconfiguration cid {group.cid}")

        self.host.notify_senders()
        self.host.consensus.leader_start_instance()
        self.host.consensus.release_held()
        self.host.drive_delivery()
        self.maybe_reconfigure()
