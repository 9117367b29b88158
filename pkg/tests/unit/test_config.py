#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import logging

import pytest
from pydantic import ValidationError

from factories import op, sid
from vnetsim.codec import (
    decode_event,
    decode_operation,
    decode_slots,
    encode_event,
    encode_operation,
)
from vnetsim.config import (
    ConfigOption,
    ScenarioFormatter,
    ScriptAction,
    ScriptEntry,
    SimScenario,
    TimingParams,
)
from vnetsim.core import DeliveryQueue
from vnetsim.helpers import RandomStreams, derive_seed
from vnetsim.models import BOTTOM, ControlKind, ControlOp, Event, ScenarioError, Strategy

logger = logging.getLogger(__name__)


def test_flat_overrides_reach_nested_fields() -> None:
    # When
    scenario = ScenarioFormatter.apply(
        SimScenario(), {"p_loss": 0.3, "jitter_std_ms": 150.0, "strategy": "primary_backup"}
    )

    # Then
    assert scenario.net.p_loss == 0.3
    assert scenario.net.jitter_std_ms == 150.0
    assert scenario.net.d_min_ms == 50.0
    assert scenario.strategy == Strategy.PRIMARY_BACKUP


def test_unknown_option_is_rejected() -> None:
    with pytest.raises(ScenarioError):
        ScenarioFormatter.apply(SimScenario(), {"no_such_option": 1})


def test_non_configurable_option_is_ignored(caplog) -> None:
    # When
    scenario = ScenarioFormatter.apply(SimScenario(), {"start_ms": 5.0})

    # Then
    assert scenario.start_ms == 1000.0
    assert "not configurable" in caplog.text


def test_options_document_their_paths() -> None:
    # When
    options = ScenarioFormatter.describe()["options"]

    # Then
    assert options["p_loss"]["path"] == "net.p_loss"
    assert options["p_loss"]["type"] == "float"
    assert "start_ms" not in options


def test_options_are_discovered_through_subclasses() -> None:
    # Given
    class Narrow(ScenarioFormatter):
        p_loss = ConfigOption(json_key="net.p_loss", default=0.1, configurable=False)

    # When
    options = Narrow.options()

    # Then
    assert options["p_loss"].default == 0.1
    assert options["seed"].json_key == "seed"
    assert "apply" not in options
    assert "p_loss" not in Narrow.describe()["options"]
    with pytest.raises(ScenarioError):
        Narrow.option("nothing")


def test_invalid_values_fail_validation() -> None:
    with pytest.raises(ValidationError):
        ScenarioFormatter.apply(SimScenario(), {"p_loss": 1.0})
    with pytest.raises(ValidationError):
        SimScenario(group_size=0)
    with pytest.raises(ValidationError):
        ScriptEntry(action=ScriptAction.JOIN, at_ms=0.0, client="c010")


def test_cycle_length_must_match_the_delay_bounds() -> None:
    # Then
    assert SimScenario().timing == TimingParams(delta_t=200.0, net_low=50.0, net_high=250.0)
    with pytest.raises(ValidationError):
        TimingParams(delta_t=100.0, net_low=50.0, net_high=250.0)


def test_join_lead_defaults_to_the_group_size() -> None:
    assert SimScenario(group_size=4).join_lead == 4
    assert SimScenario(group_size=4, join_lead_cycles=7).join_lead == 7


def test_scenario_yaml_keeps_every_field() -> None:
    # Given
    scenario = SimScenario(
        seed=9,
        script=[ScriptEntry(action=ScriptAction.CRASH_LEADER, at_ms=5000.0)],
    )

    # When
    loaded = SimScenario.from_yaml_text(scenario.to_yaml())

    # Then
    assert loaded == scenario


def test_scenario_yaml_must_be_a_mapping() -> None:
    with pytest.raises(ScenarioError):
        SimScenario.from_yaml_text("- 1\n- 2\n")


def test_derived_seeds_are_stable_and_distinct() -> None:
    # Then
    assert derive_seed(0, (("p_loss", 0.3),), 1) == derive_seed(0, (("p_loss", 0.3),), 1)
    assert derive_seed(0, (("p_loss", 0.3),), 1) != derive_seed(0, (("p_loss", 0.3),), 2)


def test_random_streams_are_independent_per_purpose() -> None:
    # Given
    first, second = RandomStreams(3), RandomStreams(3)

    # When
    second.stream("r1", "clock").random(100)

    # Then
    assert first.stream("r1", "drop").random() == second.stream("r1", "drop").random()
    with pytest.raises(ValueError):
        first.stream("r1", "weather")


def test_event_encoding_is_canonical() -> None:
    # Given
    event = op("a", 12, b"payload")

    # When
    data = encode_event(event)

    # Then
    assert decode_event(data) == (event, len(data))
    assert encode_event(op("a", 12, b"payload")) == data
    with pytest.raises(ValueError):
        encode_event(Event(sid("a"), 0, BOTTOM))


def test_queue_encoding_keeps_watermarks() -> None:
    # Given
    queue = DeliveryQueue()
    for seq in range(3):
        queue.insert(seq, 0, op("a", seq))
    queue.mark_applied(2)
    queue.prune_upto(0)

    # When
    slots, applied, pruned, next_lambda = decode_slots(queue.encode())

    # Then
    assert slots == list(queue.slots)
    assert (applied, pruned, next_lambda) == (2, 0, 3)


def test_operations_carry_neighbor_changes() -> None:
    # Given
    controls = [ControlOp(ControlKind.ADD_NEIGHBOR, sid("k", 5000.0), 0)]

    # When
    app, decoded = decode_operation(encode_operation(b"move", controls))

    # Then
    assert app == b"move"
    assert decoded == controls
    assert decode_operation(b"") == (b"", [])
