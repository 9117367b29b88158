#!/usr/bin/env python3
# Copyright 2025 Canonical Ltd.
# See LICENSE file for licensing details.

"""Experiment plans, batch execution and the acceptance summary."""

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Mapping

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, Field, validator
from scipy import stats

from .config import ScenarioFormatter, ScriptAction, ScriptEntry, SimScenario
from .content import (
    build_tree,
    flat_verify,
    generate_corpus,
    mutate_corpus,
    single_change_cost,
    verify,
)
from .helpers import derive_seed
from .metrics import closed_form, replicated_loss, single_path_loss
from .models import ScenarioError, Strategy
from .runner import run

logger = logging.getLogger(__name__)

VIOLATION_KINDS = (
    "total_order",
    "state",
    "event_lambda",
    "omega",
    "gc",
    "state_sync",
    "priority",
    "phantom",
    "integrity",
    "join",
    "leader",
    "protocol",
)

POINT_COLUMNS = ["strategy", "group_size", "p_loss"]
COMPARED = ["fast", "primary_backup", "consensus_total_order"]
CLOCK_SIGMAS = [0.0, 100.0, 200.0, 300.0, 400.0]


class MerkleParams(BaseModel):
    """Corpus shape and change counts of the content integrity experiment."""

    objects: int = 200
    components_per_object: int = 5
    files_per_component: int = 5
    changes: list[int] = Field(default_factory=lambda: [1, 2, 5, 10, 20, 30, 40, 50])
    corpora: int = 100


class ExperimentPlan(BaseModel):
    """A sweep over flat scenario options, repeated with derived seeds."""

    id: str
    description: str = ""
    kind: Literal["simulation", "merkle"] = "simulation"
    sweep: dict[str, list[Any]] = Field(default_factory=dict)
    repetitions: int = 1
    base: dict[str, Any] = Field(default_factory=dict)
    script: list[ScriptEntry] = Field(default_factory=list)
    full: dict[str, Any] = Field(default_factory=lambda: {"events_per_client": 9000})
    merkle: MerkleParams = Field(default_factory=MerkleParams)

    @validator("repetitions")
    def _check_repetitions(cls, value: int) -> int:
        if value < 1:
            raise ValueError("a plan runs every point at least once")
        return value

    @validator("sweep")
    def _check_sweep(cls, value: dict[str, list[Any]]) -> dict[str, list[Any]]:
        for name in value:
            ScenarioFormatter.option(name)
        return value

    def points(self) -> list[dict[str, Any]]:
        """Cartesian product of the swept values, in declaration order."""
        names = list(self.sweep)
        return [dict(zip(names, values)) for values in itertools.product(*self.sweep.values())]

    def scenario(
        self, point: Mapping[str, Any], repetition: int, base_seed: int = 0, full: bool = False
    ) -> SimScenario:
        seed = derive_seed(base_seed, tuple(sorted(point.items())), repetition)
        overrides = {**self.base, **(self.full if full else {}), **point, "seed": seed}
        return ScenarioFormatter.apply(SimScenario(script=self.script), overrides)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentPlan":
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ScenarioError(f"plan {path} must hold a mapping at top level")
        return cls.parse_obj(data)


def _at(cycles: int) -> float:
    return SimScenario().start_ms + cycles * SimScenario().cycle_ms


BUILTIN_PLANS: dict[str, ExperimentPlan] = {
    plan.id: plan
    for plan in [
        ExperimentPlan(
            id="E-latency-jitter",
            description="Interaction latency as jitter deviation grows",
            sweep={"strategy": COMPARED, "jitter_std_ms": [50.0, 100.0, 150.0, 200.0, 250.0]},
            repetitions=5,
        ),
        ExperimentPlan(
            id="E-delivery-drop",
            description="Update delivery rate under message drops",
            sweep={"strategy": COMPARED, "p_loss": [0.3, 0.4, 0.5, 0.6, 0.7]},
        ),
        ExperimentPlan(
            id="E-latency-drop",
            description="Interaction latency under message drops",
            sweep={"strategy": COMPARED, "p_loss": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]},
        ),
        ExperimentPlan(
            id="E-late-events",
            description="Dynamic late-event handling against simple discard",
            sweep={
                "late_events": ["dynamic", "simple_discard"],
                "clock_offset_std_ms": CLOCK_SIGMAS,
            },
            base={"jitter_std_ms": 50.0},
        ),
        ExperimentPlan(
            id="E-gc-onoff",
            description="Delivery queue length with and without gossip GC",
            sweep={"gc_enabled": [True, False]},
        ),
        ExperimentPlan(
            id="E-gc-cycle",
            description="Delivery queue length against the gossip period",
            sweep={"gc_cycle_ms": [float(s * 1000) for s in range(1, 11)]},
        ),
        ExperimentPlan(
            id="E-gc-burst",
            description="Gossip period under shortened replica sessions",
            sweep={"gc_cycle_ms": [1000.0, 5000.0, 10000.0]},
            base={"churn": True, "session_mean_s": 300.0, "spare_count": 1},
            repetitions=3,
        ),
        ExperimentPlan(
            id="E-timesync",
            description="Interaction latency against sender clock error",
            sweep={"time_sync": [False, True], "clock_offset_std_ms": CLOCK_SIGMAS},
        ),
        ExperimentPlan(
            id="E-merkle",
            description="Hierarchical against flat integrity checks",
            kind="merkle",
        ),
        ExperimentPlan(
            id="E-properties",
            description="Safety properties under jitter, drops and churn",
            sweep={"jitter_std_ms": [50.0, 150.0, 250.0], "p_loss": [0.0, 0.3, 0.5]},
            repetitions=12,
            base={"events_per_client": 200, "churn": True, "session_mean_s": 20.0},
            full={},
        ),
        ExperimentPlan(
            id="E-leader-crash",
            description="Leader crash in the middle of consensus instances",
            sweep={"p_loss": [0.1]},
            repetitions=50,
            base={"events_per_client": 150},
            script=[ScriptEntry(action=ScriptAction.CRASH_LEADER, at_ms=_at(50))],
            full={},
        ),
        ExperimentPlan(
            id="E-fast-floor",
            description="No consensus when every event arrives in its cycle",
            sweep={"jitter_max_ms": [200.0]},
            repetitions=3,
            base={"events_per_client": 300, "p_loss": 0.0},
            full={},
        ),
        ExperimentPlan(
            id="E-neighbor",
            description="Scripted join and leave under drops",
            sweep={"p_loss": [0.2]},
            repetitions=50,
            base={"events_per_client": 150},
            script=[
                ScriptEntry(
                    action=ScriptAction.JOIN, at_ms=_at(20), client="c010", notifier="c001"
                ),
                ScriptEntry(
                    action=ScriptAction.LEAVE, at_ms=_at(60), client="c002", notifier="c003"
                ),
            ],
            full={},
        ),
    ]
}


def load_plan(name: str) -> ExperimentPlan:
    """A built-in plan by id, or a plan file."""
    if name in BUILTIN_PLANS:
        return BUILTIN_PLANS[name]
    if Path(name).exists():
        return ExperimentPlan.from_yaml(name)
    raise ScenarioError(f"unknown plan {name!r}; built-in plans are {sorted(BUILTIN_PLANS)}")


def _run_cell(cell: tuple[str, int, int, dict[str, Any], dict[str, Any]]) -> dict[str, Any]:
    plan_id, index, repetition, point, scenario_data = cell
    scenario = SimScenario.parse_obj(scenario_data)
    metrics = run(scenario)

    row: dict[str, Any] = {"experiment": plan_id, "point": index, "repetition": repetition}
    row.update(point)
    row.update(
        {
            "seed": scenario.seed,
            "group_size": scenario.group_size,
            "p_loss": scenario.net.p_loss,
        }
    )
    row.update(metrics.summary())
    row["leader_agreement"] = metrics.leader_agreement
    row["joins"] = metrics.joins
    for kind in VIOLATION_KINDS:
        row[f"v_{kind}"] = metrics.violations.get(kind, 0)
    return row


def run_merkle(plan: ExperimentPlan, base_seed: int = 0) -> pd.DataFrame:
    """Comparison counts for growing change counts, then verifier equivalence checks."""
    params = plan.merkle
    content = generate_corpus(
        params.objects, params.components_per_object, params.files_per_component, seed=base_seed
    )
    tree = build_tree("inventory", content)
    files = dict(tree.files())

    rows = []
    for changes in params.changes:
        if changes > tree.file_count:
            logger.warning(f"Skipping {changes} changes, the corpus holds {tree.file_count} files")
            continue
        mutated, picked = mutate_corpus(content, changes, seed=derive_seed(base_seed, changes, 0))
        other = build_tree("inventory", mutated)
        merkle = verify(tree, other)
        flat = flat_verify(files, dict(other.files()))
        rows.append(
            {
                "experiment": plan.id,
                "check": "sweep",
                "changed_files": changes,
                "merkle_comparisons": merkle.comparisons,
                "flat_comparisons": flat.comparisons,
                "expected_comparisons": (
                    single_change_cost(tree, next(iter(picked))) if changes == 1 else None
                ),
                "sets_equal": merkle.changed == flat.changed == picked,
            }
        )

    rng = np.random.default_rng(base_seed)
    for corpus in range(params.corpora):
        small = generate_corpus(
            int(rng.integers(1, 20)), int(rng.integers(1, 5)), int(rng.integers(1, 5)), seed=corpus
        )
        total = sum(len(f) for comps in small.values() for _, f in comps.values())
        changes = int(rng.integers(0, total + 1))
        mutated, picked = mutate_corpus(small, changes, seed=corpus)
        a, b = build_tree("inventory", small), build_tree("inventory", mutated)
        merkle, flat = verify(a, b), flat_verify(dict(a.files()), dict(b.files()))
        rows.append(
            {
                "experiment": plan.id,
                "check": "equivalence",
                "changed_files": changes,
                "merkle_comparisons": merkle.comparisons,
                "flat_comparisons": flat.comparisons,
                "expected_comparisons": None,
                "sets_equal": merkle.changed == flat.changed == picked,
            }
        )

    return pd.DataFrame(rows)


def run_plan(
    plan: ExperimentPlan, base_seed: int = 0, workers: int = 1, full: bool = False
) -> pd.DataFrame:
    """One row per (sweep point, repetition), sorted by point then repetition."""
    if plan.kind == "merkle":
        return run_merkle(plan, base_seed)

    cells = []
    for index, point in enumerate(plan.points()):
        for repetition in range(plan.repetitions):
            scenario = plan.scenario(point, repetition, base_seed, full)
            cells.append((plan.id, index, repetition, point, scenario.to_plain()))

    logger.info(f"Running {plan.id}: {len(cells)} simulations on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(cell) for cell in cells]

    return pd.DataFrame(rows).sort_values(["point", "repetition"], kind="stable").reset_index(
        drop=True
    )


def compare_with_closed_form(results: pd.DataFrame) -> pd.DataFrame:
    """Predicted against simulated sync delay and loss rate, per strategy and point."""
    inputs = ["d_c_ms", "d_m_ms", "p_sync", "sync_delay_ms", "delivery_rate"]
    missing = [c for c in POINT_COLUMNS + inputs if c not in results.columns]
    if missing:
        raise ScenarioError(f"results lack the columns {missing}")

    grouped = results.groupby(POINT_COLUMNS, sort=True)[inputs].mean()

    rows = []
    for (strategy, n, p_loss), measured in grouped.iterrows():
        predicted = closed_form(
            strategy, int(n), float(p_loss), measured.d_c_ms, measured.d_m_ms, measured.p_sync
        )
        simulated_loss = 1.0 - measured.delivery_rate
        rows.append(
            {
                "strategy": strategy,
                "group_size": int(n),
                "p_loss": float(p_loss),
                "predicted_sync_delay_ms": predicted.sync_delay_ms,
                "simulated_sync_delay_ms": measured.sync_delay_ms,
                "sync_delay_abs_error": abs(predicted.sync_delay_ms - measured.sync_delay_ms),
                "predicted_loss": predicted.loss_rate,
                "simulated_loss": simulated_loss,
                "loss_abs_error": abs(predicted.loss_rate - simulated_loss),
            }
        )
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class CriterionResult:
    number: int
    name: str
    measured: str
    threshold: str
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def _not_run(number: int, name: str, threshold: str, plans: Iterable[str]) -> CriterionResult:
    return CriterionResult(number, name, f"missing {', '.join(plans)}", threshold, "not run")


def _violations(frame: pd.DataFrame, kinds: Iterable[str]) -> int:
    return int(sum(frame[f"v_{k}"].sum() for k in kinds if f"v_{k}" in frame.columns))


def _means(frame: pd.DataFrame, by: list[str], column: str) -> pd.Series:
    return frame.groupby(by, sort=True)[column].mean()


def closed_form_grid_ok() -> tuple[bool, int]:
    """Replicated loss stays below single-path loss on the whole grid."""
    exceptions = 0
    for step in range(1, 100):
        p = step / 100
        for n in range(2, 11):
            if not replicated_loss(p, n) < single_path_loss(p):
                exceptions += 1
    return exceptions == 0, exceptions


Results = Mapping[str, pd.DataFrame]


def _total_order(results: Results) -> tuple[str, bool]:
    kinds = ["total_order", "state", "event_lambda", "integrity", "protocol"]
    broken = _violations(results["E-properties"], kinds)
    return f"{broken} violations", broken == 0


def _gc_safety(results: Results) -> tuple[str, bool]:
    broken = _violations(results["E-properties"], ["gc"])
    return f"{broken} violations", broken == 0


def _consensus_agreement(results: Results) -> tuple[str, bool]:
    crash = results["E-leader-crash"]
    broken = _violations(crash, ["state_sync", "integrity", "leader", "total_order", "state"])
    disagree = int((crash["leader_agreement"] == False).sum())  # noqa: E712
    return (
        f"{broken} violations, {disagree} runs without one leader",
        broken == 0 and disagree == 0,
    )


def _omega_agreement(results: Results) -> tuple[str, bool]:
    broken = _violations(results["E-properties"], ["omega"])
    return f"{broken} violations", broken == 0


def _delivery_under_drops(results: Results) -> tuple[str, bool]:
    drop = results["E-delivery-drop"]
    rates = _means(drop, ["strategy", "p_loss", "group_size"], "delivery_rate")
    worst, ordered = 0.0, True
    for (strategy, p_loss, n), rate in rates.items():
        if round(p_loss, 2) not in (0.3, 0.5, 0.7):
            continue
        expected = closed_form(strategy, int(n), p_loss).delivery_rate
        worst = max(worst, abs(rate - expected))
        pb = rates.get(("primary_backup", p_loss, n))
        if strategy == "fast" and pb is not None and not rate > pb:
            ordered = False
    return f"max deviation {worst:.3f}, fast above PB: {ordered}", worst <= 0.05 and ordered


def _latency_ordering(results: Results) -> tuple[str, bool]:
    lat = _means(results["E-latency-jitter"], ["strategy", "jitter_std_ms"], "latency_mean_ms")
    fast = lat.get(("fast", 50.0))
    pb = lat.get(("primary_backup", 50.0))
    cons = lat.get(("consensus_total_order", 50.0))

    monotone = False
    if "fast" in lat.index.get_level_values(0):
        curve = lat.xs("fast", level="strategy")
        monotone = len(curve) > 1 and bool(curve.is_monotonic_increasing)

    ok = None not in (fast, pb, cons) and fast <= 1.15 * pb and fast <= 0.8 * cons and monotone
    return f"fast {fast}, PB {pb}, consensus {cons}, increasing {monotone}", bool(ok)


def _late_events(results: Results) -> tuple[str, bool]:
    late = results["E-late-events"]
    rates = _means(late, ["late_events", "clock_offset_std_ms"], "delivery_rate")
    discard, dynamic = rates.get(("simple_discard", 400.0)), rates.get(("dynamic", 400.0))
    ok = discard is not None and dynamic is not None and discard <= 0.15 and dynamic >= 0.90
    return f"discard {discard}, dynamic {dynamic}", bool(ok)


def _gc_effectiveness(results: Results) -> tuple[str, bool]:
    onoff = results["E-gc-onoff"]
    with_gc = onoff[onoff["gc_enabled"] == True]["qd_max"].max()  # noqa: E712
    without = onoff[onoff["gc_enabled"] == False]["qd_final"].max()  # noqa: E712

    periods = _means(results["E-gc-cycle"], ["gc_cycle_ms"], "qd_max")
    ratio = math.nan
    if len(periods) > 1 and periods.iloc[0]:
        ratio = periods.iloc[-1] / periods.iloc[0]

    ok = without >= 10 * with_gc and with_gc <= 400 and 5.0 <= ratio <= 15.0
    return f"without {without}, with {with_gc}, ratio {ratio:.2f}", bool(ok)


def _time_sync(results: Results) -> tuple[str, bool]:
    lat = _means(results["E-timesync"], ["time_sync", "clock_offset_std_ms"], "latency_mean_ms")
    unsynced = lat.xs(False, level="time_sync")
    synced = lat.xs(True, level="time_sync")
    rho = float(stats.spearmanr(unsynced.index, unsynced.values).correlation)
    ok = rho > 0.9 and bool((synced < 1000.0).all())
    return f"rho {rho:.3f}, synced max {synced.max():.1f} ms", ok


def _consensus_floor(results: Results) -> tuple[str, bool]:
    triggers = int(results["E-fast-floor"]["consensus_triggers"].sum())
    return f"{triggers} triggers", triggers == 0


def _merkle_integrity(results: Results) -> tuple[str, bool]:
    merkle = results["E-merkle"]
    sweep = merkle[merkle["check"] == "sweep"]
    fewer = bool((sweep["merkle_comparisons"] < sweep["flat_comparisons"]).all())
    single = sweep[sweep["changed_files"] == 1]
    exact = len(single) > 0 and bool(
        (single["merkle_comparisons"] == single["expected_comparisons"]).all()
    )
    equal = bool(merkle["sets_equal"].all())
    return f"fewer {fewer}, exact {exact}, equal sets {equal}", fewer and exact and equal


def _closed_form_inequality(_: Results) -> tuple[str, bool]:
    ok, exceptions = closed_form_grid_ok()
    return f"{exceptions} exceptions", ok


def _neighbor_change(results: Results) -> tuple[str, bool]:
    neighbor = results["E-neighbor"]
    broken = _violations(neighbor, ["event_lambda", "join", "total_order"])
    joined = int((neighbor["joins"] >= 1).sum())
    return (
        f"{broken} violations, {joined}/{len(neighbor)} joins",
        broken == 0 and joined == len(neighbor),
    )


# (number, name, threshold, required plans, evaluation)
CRITERIA: list[tuple[int, str, str, tuple[str, ...], Callable[[Results], tuple[str, bool]]]] = [
    (1, "total order", "0 violations", ("E-properties",), _total_order),
    (2, "GC safety", "0 violations", ("E-properties",), _gc_safety),
    (
        3,
        "consensus agreement",
        "0 violations, one leader",
        ("E-leader-crash",),
        _consensus_agreement,
    ),
    (4, "omega agreement", "0 violations", ("E-properties",), _omega_agreement),
    (
        5,
        "delivery under drops",
        "deviation <= 0.05, fast above PB",
        ("E-delivery-drop",),
        _delivery_under_drops,
    ),
    (
        6,
        "latency ordering",
        "fast <= 1.15 PB, <= 0.8 consensus, increasing",
        ("E-latency-jitter",),
        _latency_ordering,
    ),
    (7, "late events", "discard <= 0.15, dynamic >= 0.90", ("E-late-events",), _late_events),
    (
        8,
        "GC effectiveness",
        "growth >= 10x, max <= 400, ratio 10x +-50%",
        ("E-gc-onoff", "E-gc-cycle"),
        _gc_effectiveness,
    ),
    (9, "time synchronization", "rho > 0.9, synced < 1000 ms", ("E-timesync",), _time_sync),
    (10, "consensus floor", "0 triggers", ("E-fast-floor",), _consensus_floor),
    (
        11,
        "merkle integrity",
        "fewer comparisons, exact path cost, equal sets",
        ("E-merkle",),
        _merkle_integrity,
    ),
    (12, "closed-form inequality", "0 exceptions", (), _closed_form_inequality),
    (
        13,
        "neighbor change",
        "identical lambdas in every run",
        ("E-neighbor",),
        _neighbor_change,
    ),
]


def emit_summary(results: Results) -> tuple[list[CriterionResult], int]:
    """Evaluates every acceptance criterion on the available results.

    Criteria whose experiments are missing are reported as "not run" and count as failures.
    """
    out: list[CriterionResult] = []
    for number, name, threshold, plans, evaluate in CRITERIA:
        missing = [plan for plan in plans if plan not in results]
        if missing:
            out.append(_not_run(number, name, threshold, missing))
            continue

        measured, ok = evaluate(results)
        out.append(CriterionResult(number, name, measured, threshold, _verdict(ok)))

    code = 0 if all(c.passed for c in out) else 1
    return out, code


def render_summary(criteria: list[CriterionResult]) -> str:
    lines = []
    for c in criteria:
        lines.append(
            f"{c.number:>2} {c.verdict.upper():<8} {c.name}: {c.measured} (threshold: {c.threshold})"
        )
    return "\n".join(lines)


def load_results(directory: str | Path) -> dict[str, pd.DataFrame]:
    """Result tables written by `run`, keyed by plan id."""
    return {path.stem: pd.read_csv(path) for path in sorted(Path(directory).glob("E-*.csv"))}


def write_results(frame: pd.DataFrame, directory: str | Path, plan_id: str) -> Path:
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    target = path / f"{plan_id}.csv"
    frame.to_csv(target, index=False)
    return target


def builtin_plan_ids() -> list[str]:
    return sorted(BUILTIN_PLANS)
