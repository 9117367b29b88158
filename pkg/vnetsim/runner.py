#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Assembly and execution of one simulated run."""

import logging
from typing import Optional

from .base import RENDEZVOUS, BaseReplica
from .baselines import PrimaryBackupReplica, ReliablePrimaryBackupReplica
from .config import ScriptAction, ScriptEntry, SimScenario
from .core import CycleClock
from .delivery import SenderRecord, SenderTable
from .helpers import RandomStreams
from .interaction import ClientActor, InteractionState
from .membership import GroupState, Rendezvous
from .metrics import Metrics
from .models import (
    ControlKind,
    GroupFailedError,
    ProtocolViolation,
    ReplicaId,
    SenderId,
    Strategy,
)
from .observer import GlobalObserver
from .replica import ConsensusReplica, Replica
from .simnet import RetransmitPolicy, Simulator, Transport, sample_session_ms

logger = logging.getLogger(__name__)

REPLICA_TYPES: dict[Strategy, type[BaseReplica]] = {
    Strategy.FAST: Replica,
    Strategy.CONSENSUS: ConsensusReplica,
    Strategy.PRIMARY_BACKUP: PrimaryBackupReplica,
    Strategy.RELIABLE_PRIMARY_BACKUP: ReliablePrimaryBackupReplica,
}


def client_name(index: int) -> str:
    return f"c{index:03d}"


class Simulation:
    """Clients, replicas and the Rendezvous of one run, wired to one transport."""

    def __init__(self, scenario: SimScenario):
        self.scenario = scenario
        self.sim = Simulator(start=0.0)
        self.streams = RandomStreams(scenario.seed)
        self.transport = Transport(
            self.sim,
            scenario.net,
            self.streams,
            RetransmitPolicy(scenario.rto_base_ms, scenario.rto_max_ms, scenario.rto_attempts),
            fixed=(RENDEZVOUS,),
        )
        self.metrics = Metrics(strategy=scenario.strategy.value)
        self.observer = GlobalObserver()
        self.replicas: dict[ReplicaId, BaseReplica] = {}
        self.clients: dict[str, ClientActor] = {}
        self._next_id = 0
        self._done = False

        self.pb = scenario.strategy in (
            Strategy.PRIMARY_BACKUP,
            Strategy.RELIABLE_PRIMARY_BACKUP,
        )
        self.t0 = scenario.start_ms
        self.delta_t = scenario.cycle_ms

        senders = [
            SenderRecord(id=self._sender_id(client_name(i)), t_start=self.t0, first_cycle=0)
            for i in range(scenario.client_count)
        ]
        self.initial = InteractionState(
            SenderTable(senders), {r.id: 0 for r in senders}
        )

        ids = [self._allocate() for _ in range(scenario.group_size)]
        for rid in ids:
            self._add_replica(rid, frozenset(ids), initialized=True)

        self.rendezvous = Rendezvous(
            RENDEZVOUS,
            self.sim,
            self.transport,
            scenario,
            self._clock(),
            ids,
            spawn=self._spawn,
            on_change=self._on_live_change,
        )

        targets = (min(ids),) if self.pb else tuple(ids)
        for record in senders:
            client = self._add_client(record.id)
            client.subscribe(0, targets, t_start=self.t0)

    @staticmethod
    def _sender_id(name: str, joined: float = 0.0) -> SenderId:
        return SenderId(name.encode(), joined)

    def _clock(self) -> CycleClock:
        return CycleClock(self.delta_t, self.t0)

    def _allocate(self) -> ReplicaId:
        rid = self._next_id
        self._next_id += 1
        return rid

    def _add_client(self, sender: SenderId) -> ClientActor:
        client = ClientActor(
            sender, self.sim, self.transport, self.scenario, self.streams, self.observer
        )
        self.clients[sender.base_id.decode()] = client
        return client

    def _add_replica(
        self, rid: ReplicaId, live: frozenset[ReplicaId], initialized: bool
    ) -> BaseReplica:
        factory = REPLICA_TYPES[self.scenario.strategy]
        if self.pb:
            primary = self.primary
            source = self.replicas.get(primary) if primary is not None else None
            initial = source.interaction if source else self.initial  # type: ignore[attr-defined]
            interaction = initial.copy()
            replica = factory(  # type: ignore[call-arg]
                rid,
                self.sim,
                self.transport,
                self.scenario,
                self._clock(),
                self.metrics,
                live=live,
                primary=primary if primary is not None else min(live),
                interaction=interaction,
            )
        else:
            members = live if initialized else frozenset()
            group = GroupState(
                members=members,
                live=live,
                leader=min(members) if members else None,
                ages={r: 0 for r in members},
                min_size=self.scenario.group_size,
                spare_count=self.scenario.spare_count,
                new_replica=not initialized,
            )
            replica = factory(  # type: ignore[call-arg]
                rid,
                self.sim,
                self.transport,
                self.scenario,
                self._clock(),
                group=group,
                observer=self.observer,
                metrics=self.metrics,
                interaction=self.initial.copy() if initialized else None,
                initialized=initialized,
            )
            self.observer.register(replica)  # type: ignore[arg-type]

        self.replicas[rid] = replica
        if self.scenario.churn.enabled:
            session = sample_session_ms(self.scenario.churn, self.streams.stream(rid, "churn"))
            self.sim.schedule(self.sim.now + session, replica.crash)
        return replica

    @property
    def primary(self) -> Optional[ReplicaId]:
        """Current primary as seen by the live primary-backup replicas."""
        views = sorted(
            r.primary  # type: ignore[attr-defined]
            for r in self.replicas.values()
            if r.alive and getattr(r, "primary", None) is not None
        )
        return views[0] if views else None

    @property
    def leader(self) -> Optional[ReplicaId]:
        """Leader agreed by the live members, None if there is none."""
        views = sorted(
            r.group.leader  # type: ignore[attr-defined]
            for r in self.replicas.values()
            if r.alive and r.holds_state and getattr(r, "group", None) is not None
            and r.group.leader is not None  # type: ignore[attr-defined]
        )
        return views[0] if views else None

    def _spawn(self) -> ReplicaId:
        rid = self._allocate()
        replica = self._add_replica(rid, self.rendezvous.live, initialized=self.pb)
        replica.start()
        self.metrics.replicas_created += 1
        logger.info(f"Replica r{rid} created at {self.sim.now:.0f} ms")
        return rid

    def _on_live_change(self, live: frozenset[ReplicaId]) -> None:
        holders = [
            rid
            for rid in sorted(live)
            if self.replicas[rid].alive and self.replicas[rid].holds_state
        ]
        if not holders:
            raise GroupFailedError(f"no live replica holds the group state at {self.sim.now:.0f} ms")

    # Scripted actions

    def _schedule_script(self, entry: ScriptEntry) -> None:
        self.sim.schedule(entry.at_ms, self._run_script, entry)

    def _run_script(self, entry: ScriptEntry) -> None:
        if entry.action == ScriptAction.JOIN:
            notifier = self.clients.get(entry.notifier or "")
            if notifier is None or entry.client in self.clients:
                logger.warning(f"Cannot run {entry.action.value} for {entry.client}")
                return
            newcomer = self._add_client(self._sender_id(entry.client or "", entry.at_ms))
            newcomer.start()
            notifier.announce(ControlKind.ADD_NEIGHBOR, newcomer.id)
        elif entry.action == ScriptAction.LEAVE:
            notifier = self.clients.get(entry.notifier or "")
            leaving = self.clients.get(entry.client or "")
            if notifier is None or leaving is None:
                logger.warning(f"Cannot run {entry.action.value} for {entry.client}")
                return
            notifier.announce(ControlKind.RM_NEIGHBOR, leaving.id)
            lead = (self.scenario.join_lead + 2) * self.delta_t
            self.sim.schedule(self.sim.now + lead, leaving.leave)
        elif entry.action == ScriptAction.CRASH_LEADER:
            target = self.primary if self.pb else self.leader
            if target is not None:
                self.replicas[target].crash()
        elif entry.action == ScriptAction.CRASH_REPLICA:
            replica = self.replicas.get(entry.replica)  # type: ignore[arg-type]
            if replica is not None:
                replica.crash()

    # Run control

    @property
    def horizon(self) -> float:
        if self.scenario.max_sim_ms is not None:
            return self.scenario.max_sim_ms
        script_end = max((e.at_ms for e in self.scenario.script), default=0.0)
        cycles = self.scenario.events_per_client + self.scenario.join_lead + 10
        return max(self.t0, script_end) + cycles * self.delta_t + self.scenario.update_timeout_ms

    def _sample(self) -> None:
        for rid in sorted(self.replicas):
            replica = self.replicas[rid]
            size = replica.queue_length
            if replica.alive and size is not None:
                self.metrics.qd_samples.append((self.sim.now, rid, size))

        clients = [self.clients[name] for name in sorted(self.clients)]
        if all(c.finished or c.stopped for c in clients) and all(
            c.resolved_by(self.sim.now) for c in clients
        ):
            self._done = True
            self.sim.stop()
            return

        self.sim.call_later(self.scenario.sample_interval_ms, self._sample)

    def start(self) -> None:
        for rid in sorted(self.replicas):
            self.replicas[rid].start()
        self.rendezvous.start()
        for name in sorted(self.clients):
            self.clients[name].start()
        for entry in self.scenario.script:
            self._schedule_script(entry)
        self.sim.schedule(self.t0, self._sample)

    def execute(self) -> Metrics:
        """Runs until every client is resolved, the horizon passes or the group fails."""
        self.start()
        try:
            self.sim.run(until=self.horizon)
        except GroupFailedError as e:
            logger.error(f"Group failed: {e}")
            self.metrics.group_failed = True
        except ProtocolViolation as e:
            self.observer.violation("protocol", str(e))

        return self.collect()

    def collect(self) -> Metrics:
        metrics = self.metrics
        for name in sorted(self.clients):
            client = self.clients[name]
            metrics.events_sent += client.sent
            metrics.updates_delivered += len(client.resolved)
            metrics.latencies_ms.extend(client.resolved[seq] for seq in sorted(client.resolved))

        for rid in sorted(self.replicas):
            engine = getattr(self.replicas[rid], "engine", None)
            if engine is not None:
                metrics.unknown_discards += engine.unknown_discards
                metrics.late_discards += engine.late_discards

        if not self.pb:
            metrics.leader_agreement = self.observer.finalize(
                self.replicas[rid] for rid in sorted(self.replicas)  # type: ignore[misc]
            )
        metrics.replica_failures = self.rendezvous.failures_detected
        metrics.joins = len(self.observer.joins)
        metrics.violations = dict(sorted(self.observer.violations.items()))
        metrics.messages = dict(sorted(self.transport.counters.items()))
        metrics.end_ms = self.sim.now

        logger.info(
            f"Run seed {self.scenario.seed} ({self.scenario.strategy.value}) finished at {self.sim.now:.0f} ms: "
            f"delivery {metrics.delivery_rate:.3f}, latency {metrics.latency_mean_ms:.1f} ms"
        )
        return metrics


def run(scenario: SimScenario, seed: Optional[int] = None) -> Metrics:
    """Executes `scenario`; identical inputs give identical metrics."""
    if seed is not None:
        scenario = scenario.copy(update={"seed": seed})
    return Simulation(scenario).execute()
