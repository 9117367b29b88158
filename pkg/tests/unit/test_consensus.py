#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import itertools
import logging

import pytest

from factories import empty, op, sid
from vnetsim.consensus import ConsensusCoordinator, Proposal, build_proposal, conflicting, decide
from vnetsim.models import BOTTOM, Event, MessageKind, ProtocolViolation

logger = logging.getLogger(__name__)

WINDOWS = ((sid("s"), 3, 3),)


def bottom(name: str, seq: int) -> Event:
    return Event(sid(name), seq, BOTTOM)


def test_build_proposal_marks_missing_events() -> None:
    # Given
    windows = ((sid("a"), 0, 1), (sid("b"), 0, 0))
    held = {op("a", 1).key: op("a", 1)}

    # When
    proposal = build_proposal(1, 4, windows, held)

    # Then
    assert proposal.entries == (bottom("a", 0), op("a", 1), bottom("b", 0))
    assert not proposal.delivered
    assert proposal.within(windows)
    assert not Proposal(1, 4, (op("a", 2),)).within(windows)


def test_build_proposal_of_delivered_cycle() -> None:
    # When
    proposal = build_proposal(2, 4, WINDOWS, {}, delivered=(op("b", 0), op("a", 0)))

    # Then
    assert proposal.delivered
    assert proposal.entries == (op("a", 0), op("b", 0))


def test_one_holder_is_enough() -> None:
    # Given
    proposals = [
        Proposal(0, 7, (bottom("s", 3),)),
        Proposal(1, 7, (op("s", 3),)),
        Proposal(2, 7, (bottom("s", 3),)),
    ]

    # Then
    assert decide(7, WINDOWS, proposals) == (op("s", 3),)


def test_nobody_holds_the_event() -> None:
    # Given
    proposals = [Proposal(r, 7, (bottom("s", 3),)) for r in range(3)]

    # Then
    assert decide(7, WINDOWS, proposals) == (empty("s", 3),)


def test_every_knowledge_pattern_decides_independently_per_seq() -> None:
    # Given
    windows = ((sid("s"), 3, 5),)
    seqs = range(3, 6)

    for pattern in itertools.product([False, True], repeat=9):
        knows = {(r, seq): pattern[r * 3 + seq - 3] for r in range(3) for seq in seqs}
        proposals = [
            Proposal(r, 0, tuple(op("s", seq) if knows[(r, seq)] else bottom("s", seq) for seq in seqs))
            for r in range(3)
        ]

        # When
        decided = {e.seq: e for e in decide(0, windows, proposals)}

        # Then
        for seq in seqs:
            someone = any(knows[(r, seq)] for r in range(3))
            assert decided[seq].is_operation == someone
            assert decided[seq].is_empty != someone


def test_delivered_proposal_wins_verbatim() -> None:
    # Given
    delivered = (op("s", 3),)
    proposals = [Proposal(0, 7, (bottom("s", 3),)), Proposal(1, 7, delivered, delivered=True)]

    # Then
    assert decide(7, WINDOWS, proposals) == delivered


def test_conflicting_deliveries_are_a_violation() -> None:
    # Given
    proposals = [
        Proposal(0, 7, (op("s", 3, b"x"),), delivered=True),
        Proposal(1, 7, (op("s", 3, b"y"),), delivered=True),
    ]

    # When / Then
    with pytest.raises(ProtocolViolation):
        decide(7, WINDOWS, proposals)


def test_leader_replies_with_held_events(host) -> None:
    # Given
    host.engine.cycle = 7
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.engine.windows.return_value = WINDOWS
    host.engine.holds_all.return_value = (op("s", 3),)
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.leader_handle_query(1, 7, WINDOWS)

    # Then
    host.send_reliable.assert_called_once_with(MessageKind.QUERY_REPLY, 1, (7, (op("s", 3),)))
    host.engine.holds_all.assert_called_once_with(7, WINDOWS)
    host.multicast_reliable.assert_not_called()


def test_reply_from_held_events_fixes_the_cycle(host) -> None:
    # Given
    host.engine.cycle = 7
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.engine.holds_all.return_value = (op("s", 3),)
    coordinator = ConsensusCoordinator(host)
    coordinator.leader_handle_query(1, 7, WINDOWS)

    # When
    host.engine.holds_all.return_value = None
    coordinator.leader_handle_query(2, 7, WINDOWS)

    # Then
    assert host.engine.decided == {7: (op("s", 3),)}
    assert host.send_reliable.call_args.args == (MessageKind.QUERY_REPLY, 2, (7, (op("s", 3),)))
    host.multicast_reliable.assert_not_called()
    assert coordinator.ledger.in_flight == {}


def test_leader_behind_the_queried_cycle_runs_an_instance(host) -> None:
    # Given
    host.engine.cycle = 5
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.engine.holds_all.return_value = (op("s", 3),)
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.leader_handle_query(1, 7, WINDOWS)

    # Then
    host.engine.holds_all.assert_not_called()
    host.send_reliable.assert_not_called()
    assert set(coordinator.ledger.in_flight) == {7}


def test_leader_starts_one_instance_per_cycle(host) -> None:
    # Given
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.engine.holds_all.return_value = None
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.leader_handle_query(1, 7, WINDOWS)
    coordinator.leader_handle_query(2, 7, WINDOWS)
    coordinator.leader_handle_query(2, 8, WINDOWS)

    # Then
    assert host.multicast_reliable.call_count == 2
    kind, dsts, body = host.multicast_reliable.call_args_list[0].args
    assert kind == MessageKind.CONSENSUS_QUERY
    assert dsts == [0, 1, 2]
    assert body == (7, WINDOWS)
    assert set(coordinator.ledger.in_flight) == {7, 8}
    assert host.metrics.instances == 2


def test_leader_decides_after_every_live_member_proposed(host) -> None:
    # Given
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.engine.holds_all.return_value = None
    coordinator = ConsensusCoordinator(host)
    coordinator.leader_handle_query(1, 7, WINDOWS)
    host.multicast_reliable.reset_mock()

    # When
    coordinator.leader_on_result(Proposal(0, 7, (bottom("s", 3),)))
    coordinator.leader_on_result(Proposal(1, 7, (op("s", 3),)))
    assert host.multicast_reliable.call_count == 0
    coordinator.leader_on_result(Proposal(2, 7, (bottom("s", 3),)))

    # Then
    kind, dsts, body = host.multicast_reliable.call_args.args
    assert kind == MessageKind.DECISION
    assert dsts == [0, 1, 2]
    assert body == (7, (op("s", 3),))
    assert coordinator.ledger.in_flight == {}
    assert host.engine.decided == {7: (op("s", 3),)}


def test_crashed_member_is_not_waited_for(host) -> None:
    # Given
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.engine.holds_all.return_value = None
    coordinator = ConsensusCoordinator(host)
    coordinator.leader_handle_query(1, 7, WINDOWS)
    coordinator.leader_on_result(Proposal(0, 7, (bottom("s", 3),)))
    coordinator.leader_on_result(Proposal(1, 7, (bottom("s", 3),)))
    host.multicast_reliable.reset_mock()

    # When
    host.group.live = frozenset({0, 1})
    coordinator.on_membership_change()

    # Then
    assert host.multicast_reliable.call_args.args[2] == (7, (empty("s", 3),))


def test_busy_leader_only_records_the_query(host) -> None:
    # Given
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    host.group.le_flag = True
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.leader_handle_query(1, 7, WINDOWS)

    # Then
    assert coordinator.ledger.pending == {7: WINDOWS}
    host.multicast_reliable.assert_not_called()


def test_query_for_uncollected_cycle_is_deferred(host) -> None:
    # Given
    host.engine.collected_upto = 6
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.replica_propose(0, 7, WINDOWS, 0, 0)

    # Then
    assert coordinator.deferred == {7: WINDOWS}
    host.send_reliable.assert_not_called()


def test_stale_query_is_dropped(host) -> None:
    # Given
    host.engine.collected_upto = 9
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.replica_propose(0, 7, WINDOWS, epoch=3, cid=0)

    # Then
    host.send_reliable.assert_not_called()


def test_member_proposes_and_blocks_its_fast_path(host) -> None:
    # Given
    host.engine.collected_upto = 9
    host.engine.delivered_events.return_value = None
    host.engine.buffers.received = {}
    host.engine.proposed = set()
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.replica_propose(0, 7, WINDOWS, 0, 0)

    # Then
    kind, dst, proposal = host.send_reliable.call_args.args
    assert kind == MessageKind.QUERY_RESULT
    assert dst == 0
    assert proposal.entries == (bottom("s", 3),)
    assert host.engine.proposed == {7}


def test_decision_is_stored_for_delivery(host) -> None:
    # Given
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.apply_decision(7, (op("s", 3),), 0, 0)
    coordinator.apply_decision(7, (op("s", 3),), 0, 0)

    # Then
    assert host.engine.decided == {7: (op("s", 3),)}
    host.observer.violation.assert_not_called()
    assert host.drive_delivery.call_count == 2


def test_decision_during_election_is_held_back(host) -> None:
    # Given
    host.engine.decided = {}
    host.group.gr_flag = True
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.apply_decision(7, (op("s", 3),), 0, 0)

    # Then
    assert host.engine.decided == {}
    assert coordinator.held == {7: ((op("s", 3),), 0, 0)}
    host.drive_delivery.assert_not_called()


def test_held_decision_is_applied_once_the_flags_clear(host) -> None:
    # Given
    host.engine.decided = {}
    host.group.gr_flag = True
    coordinator = ConsensusCoordinator(host)
    coordinator.apply_decision(7, (op("s", 3),), 0, 0)

    # When
    coordinator.release_held()
    assert host.engine.decided == {}
    host.group.gr_flag = False
    coordinator.release_held()

    # Then
    assert host.engine.decided == {7: (op("s", 3),)}
    assert coordinator.held == {}
    host.drive_delivery.assert_called_once()


def test_held_decision_of_a_replaced_epoch_is_dropped(host) -> None:
    # Given
    host.engine.decided = {}
    host.group.le_flag = True
    coordinator = ConsensusCoordinator(host)
    coordinator.apply_decision(7, (op("s", 3),), 0, 0)

    # When
    host.group.epoch = 1
    host.group.le_flag = False
    coordinator.release_held()

    # Then
    assert host.engine.decided == {}
    assert coordinator.held == {}
    host.observer.on_decision_applied.assert_not_called()


def test_busy_leader_does_not_decide(host) -> None:
    # Given
    host.engine.decided = {}
    host.engine.delivered_events.return_value = None
    coordinator = ConsensusCoordinator(host)
    coordinator.leader_handle_query(1, 8, WINDOWS)
    host.group.gr_flag = True
    host.multicast_reliable.reset_mock()

    # When
    for replica in (0, 1, 2):
        coordinator.leader_on_result(Proposal(replica, 8, (bottom("s", 3),)))

    # Then
    host.multicast_reliable.assert_not_called()
    assert 8 in coordinator.ledger.in_flight


def test_decision_for_a_delivered_cycle_is_only_checked(host) -> None:
    # Given
    host.engine.cycle = 10
    host.engine.decided = {}
    host.engine.delivered_windows = {7: ((sid("s"), 3, 3),)}
    host.engine.delivered_events.return_value = (op("s", 3),)
    coordinator = ConsensusCoordinator(host)

    # When
    coordinator.apply_decision(7, (op("s", 2), op("s", 3)), 0, 0)

    # Then
    host.observer.violation.assert_not_called()
    assert host.engine.decided == {}
    host.drive_delivery.assert_not_called()

    # When
    coordinator.apply_decision(7, (empty("s", 3),), 0, 0)

    # Then
    host.observer.violation.assert_called_once()
    assert host.observer.violation.call_args.args[0] == "total_order"
    assert host.engine.decided == {}


def test_decisions_over_different_ranges_agree_on_their_overlap() -> None:
    # Then
    assert not conflicting((op("s", 2), op("s", 3)), (op("s", 3), empty("s", 4)))
    assert conflicting((op("s", 3),), (empty("s", 3),))
    assert conflicting((op("s", 3, b"x"),), (op("s", 3, b"y"),))


def test_repeated_decision_keeps_the_first_one(host) -> None:
    # Given
    host.engine.decided = {}
    coordinator = ConsensusCoordinator(host)
    coordinator.apply_decision(3, (op("s", 3),), 0, 0)

    # When
    coordinator.apply_decision(3, (op("s", 2), op("s", 3)), 0, 0)

    # Then
    host.observer.violation.assert_not_called()
    assert host.engine.decided == {3: (op("s", 3),)}
    assert host.drive_delivery.call_count == 2
