#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

import logging

import pandas as pd
import pytest
from pydantic import ValidationError

from vnetsim.experiments import (
    BUILTIN_PLANS,
    ExperimentPlan,
    MerkleParams,
    closed_form_grid_ok,
    compare_with_closed_form,
    emit_summary,
    load_plan,
    load_results,
    render_summary,
    run_merkle,
    write_results,
)
from vnetsim.models import ScenarioError, Strategy

logger = logging.getLogger(__name__)


def test_points_cover_the_cartesian_product() -> None:
    # Given
    plan = ExperimentPlan(id="E-x", sweep={"strategy": ["fast", "primary_backup"], "p_loss": [0.1, 0.2]})

    # When
    points = plan.points()

    # Then
    assert len(points) == 4
    assert points[0] == {"strategy": "fast", "p_loss": 0.1}
    assert points[-1] == {"strategy": "primary_backup", "p_loss": 0.2}


def test_sweeps_only_accept_known_options() -> None:
    with pytest.raises(ValidationError):
        ExperimentPlan(id="E-x", sweep={"no_such_option": [1]})


def test_scenario_seeds_depend_on_point_and_repetition() -> None:
    # Given
    plan = ExperimentPlan(id="E-x", sweep={"p_loss": [0.1, 0.2]}, base={"events_per_client": 30})

    # When
    first = plan.scenario({"p_loss": 0.1}, 0)
    again = plan.scenario({"p_loss": 0.1}, 0)
    other = plan.scenario({"p_loss": 0.1}, 1)

    # Then
    assert first == again
    assert first.seed != other.seed
    assert first.net.p_loss == 0.1
    assert first.events_per_client == 30


def test_full_overrides_only_apply_on_request() -> None:
    # Given
    plan = ExperimentPlan(id="E-x", sweep={"p_loss": [0.1]})

    # Then
    assert plan.scenario({"p_loss": 0.1}, 0).events_per_client == 1000
    assert plan.scenario({"p_loss": 0.1}, 0, full=True).events_per_client == 9000


def test_builtin_plans_are_valid() -> None:
    # Then
    for plan_id, plan in BUILTIN_PLANS.items():
        assert plan.id == plan_id
        if plan.kind == "simulation":
            assert plan.points()
            plan.scenario(plan.points()[0], 0)


def test_unknown_plan() -> None:
    with pytest.raises(ScenarioError):
        load_plan("E-nothing")


def test_plan_file_is_loaded(tmp_path) -> None:
    # Given
    path = tmp_path / "plan.yaml"
    path.write_text("id: E-file\nsweep:\n  p_loss: [0.1, 0.3]\nrepetitions: 2\n")

    # When
    plan = load_plan(str(path))

    # Then
    assert plan.id == "E-file"
    assert plan.repetitions == 2
    assert len(plan.points()) == 2


def test_small_merkle_run() -> None:
    # Given
    plan = ExperimentPlan(
        id="E-merkle",
        kind="merkle",
        merkle=MerkleParams(
            objects=4, components_per_object=2, files_per_component=2, changes=[1, 2, 40], corpora=5
        ),
    )

    # When
    frame = run_merkle(plan, base_seed=3)

    # Then
    sweep = frame[frame["check"] == "sweep"]
    assert list(sweep["changed_files"]) == [1, 2]
    assert sweep.iloc[0]["merkle_comparisons"] == sweep.iloc[0]["expected_comparisons"] == 9
    assert (sweep["flat_comparisons"] == 16).all()
    assert len(frame[frame["check"] == "equivalence"]) == 5
    assert frame["sets_equal"].all()


def test_closed_form_grid_holds() -> None:
    assert closed_form_grid_ok() == (True, 0)


def test_summary_without_results_fails() -> None:
    # When
    criteria, code = emit_summary({})

    # Then
    assert code == 1
    assert [c.number for c in criteria] == list(range(1, 14))
    assert [c.verdict for c in criteria if c.number == 12] == ["pass"]
    assert all(c.verdict == "not run" for c in criteria if c.number != 12)
    assert "NOT RUN" in render_summary(criteria)


def test_summary_reads_violation_columns() -> None:
    # Given
    props = pd.DataFrame(
        [{"v_total_order": 0, "v_gc": 0, "v_omega": 0}, {"v_total_order": 0, "v_gc": 2, "v_omega": 0}]
    )
    floor = pd.DataFrame([{"consensus_triggers": 0}, {"consensus_triggers": 0}])

    # When
    criteria, _ = emit_summary({"E-properties": props, "E-fast-floor": floor})
    verdicts = {c.number: c.verdict for c in criteria}

    # Then
    assert verdicts[1] == "pass"
    assert verdicts[2] == "fail"
    assert verdicts[4] == "pass"
    assert verdicts[10] == "pass"


def test_comparison_uses_measured_inputs() -> None:
    # Given
    results = pd.DataFrame(
        [
            {
                "strategy": Strategy.FAST.value,
                "group_size": 5,
                "p_loss": 0.5,
                "d_c_ms": 40.0,
                "d_m_ms": 30.0,
                "p_sync": 0.5,
                "sync_delay_ms": 50.0,
                "delivery_rate": 0.94,
            }
        ]
    )

    # When
    report = compare_with_closed_form(results)

    # Then
    row = report.iloc[0]
    assert row["predicted_sync_delay_ms"] == pytest.approx(50.0)
    assert row["sync_delay_abs_error"] == pytest.approx(0.0)
    assert row["predicted_loss"] == pytest.approx(0.06152, abs=1e-5)
    assert row["loss_abs_error"] == pytest.approx(0.00152, abs=1e-4)


def test_comparison_needs_its_columns() -> None:
    with pytest.raises(ScenarioError):
        compare_with_closed_form(pd.DataFrame([{"strategy": "fast"}]))


def test_results_are_written_per_plan(tmp_path) -> None:
    # Given
    frame = pd.DataFrame([{"consensus_triggers": 0}])

    # When
    write_results(frame, tmp_path, "E-fast-floor")
    write_results(frame, tmp_path, "E-gc-onoff")

    # Then
    assert sorted(load_results(tmp_path)) == ["E-fast-floor", "E-gc-onoff"]
