"""Deletion campaigns: rank groups, remove the extremes, retrain, repeat.

A campaign trains a model on the full grid, scores band or time-step
groups with an attribution estimator, physically deletes the k most (or
least) important groups from every split, rebuilds the model for the
smaller input, and retrains from scratch. The loop runs until one group
survives. The recorded curve answers two questions: which small set of
groups is sufficient to keep the baseline metric, and which groups are
necessary to stay above a chosen floor.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attribution import (
    ESTIMATOR_TAGS,
    ExplainBudget,
    GroupingAxis,
    ImportanceRanking,
    aggregate_rank,
    feature_groups,
    mean_baseline,
    run_estimator,
)
from .data import SplitTriple, delete_bands, delete_timesteps
from .errors import ConfigError, CurveError, EstimatorError, RoarAborted, TrainingDiverged
from .models import ModelSpec, resize_for_input
from .training import MetricValue, TrainConfig, TrainReport, evaluate, train


class DeletionOrder(str, Enum):
    MOST_FIRST = "most_first"
    LEAST_FIRST = "least_first"


_DELETE = {
    GroupingAxis.BY_BAND: delete_bands,
    GroupingAxis.BY_TIMESTEP: delete_timesteps,
}


@dataclass(frozen=True)
class DeletionPlan:
    """What to delete, in which direction, and how to score it.

    ``k`` of None resolves per run: one group per cycle, or ceil(T/20)
    when deleting time steps of a series longer than 30. ``tolerance``
    is the absolute validation-metric slack used by sufficiency queries.
    """

    axis: GroupingAxis
    order: DeletionOrder
    estimator_tag: str = "svs"
    budget: ExplainBudget = field(default_factory=ExplainBudget)
    k: Optional[int] = None
    tolerance: float = 0.02

    def __post_init__(self):
        if self.axis not in _DELETE:
            raise ConfigError("deletion works on band or time-step groups")
        if self.estimator_tag not in ESTIMATOR_TAGS:
            raise ConfigError(f"unknown estimator tag {self.estimator_tag!r}")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.tolerance < 0:
            raise ConfigError("tolerance cannot be negative")

    def step_size(self, n_groups: int) -> int:
        """Groups removed per cycle, given the starting group count."""
        if self.k is not None:
            return self.k
        if self.axis is GroupingAxis.BY_TIMESTEP and n_groups > 30:
            return math.ceil(n_groups / 20)
        return 1

    def to_dict(self) -> dict:
        return {
            "axis": self.axis.value,
            "order": self.order.value,
            "estimator_tag": self.estimator_tag,
            "budget": self.budget.to_dict(),
            "k": self.k,
            "tolerance": self.tolerance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeletionPlan":
        return cls(
            axis=GroupingAxis(d["axis"]),
            order=DeletionOrder(d["order"]),
            estimator_tag=d.get("estimator_tag", "svs"),
            budget=ExplainBudget.from_dict(d["budget"]) if d.get("budget") else ExplainBudget(),
            k=d.get("k"),
            tolerance=float(d.get("tolerance", 0.02)),
        )


@dataclass(frozen=True)
class CycleRecord:
    """One retrain-and-explain step. Cycle 0 is the untouched baseline.

    ``removed_ids`` are the stable ids deleted going INTO this cycle;
    ``ranking`` is computed on the retrained model and decides the next
    removal.
    """

    cycle: int
    removed_ids: tuple[int, ...]
    remaining: int
    report: TrainReport
    val_metric: MetricValue
    test_metric: MetricValue
    ranking: ImportanceRanking

    def __post_init__(self):
        if self.cycle < 0 or self.remaining < 1:
            raise CurveError("cycle must be >= 0 with at least one group left")
        if len(set(self.removed_ids)) != len(self.removed_ids):
            raise CurveError("removed ids must be unique")
        if len(self.ranking.group_ids) != self.remaining:
            raise CurveError("ranking must cover exactly the remaining groups")

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "removed_ids": list(self.removed_ids),
            "remaining": self.remaining,
            "report": self.report.to_dict(),
            "val_metric": self.val_metric.to_dict(),
            "test_metric": self.test_metric.to_dict(),
            "ranking": self.ranking.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CycleRecord":
        return cls(
            cycle=int(d["cycle"]),
            removed_ids=tuple(int(g) for g in d["removed_ids"]),
            remaining=int(d["remaining"]),
            report=TrainReport.from_dict(d["report"]),
            val_metric=MetricValue.from_dict(d["val_metric"]),
            test_metric=MetricValue.from_dict(d["test_metric"]),
            ranking=ImportanceRanking.from_dict(d["ranking"]),
        )


@dataclass(frozen=True)
class DeletionCurve:
    """A campaign's full trace: baseline plus one record per deletion."""

    plan: DeletionPlan
    baseline: CycleRecord
    records: tuple[CycleRecord, ...]

    def __post_init__(self):
        if self.baseline.cycle != 0 or self.baseline.removed_ids:
            raise CurveError("baseline must be cycle 0 with nothing removed")
        if self.baseline.ranking.axis is not self.plan.axis:
            raise CurveError("ranking axis must match the plan")
        survivors = set(self.baseline.ranking.group_ids)
        remaining = self.baseline.remaining
        for i, rec in enumerate(self.records, start=1):
            if rec.cycle != i:
                raise CurveError("cycle indices must be consecutive")
            removed = set(rec.removed_ids)
            if not removed or not removed <= survivors:
                raise CurveError("each cycle must remove surviving groups")
            survivors -= removed
            if rec.remaining != remaining - len(removed):
                raise CurveError("remaining count must drop by the removal size")
            remaining = rec.remaining
            if set(rec.ranking.group_ids) != survivors:
                raise CurveError("cycle ranking must cover exactly the survivors")

    @property
    def n_groups(self) -> int:
        return self.baseline.remaining

    @property
    def complete(self) -> bool:
        """True when the campaign ran down to a single surviving group."""
        last = self.records[-1] if self.records else self.baseline
        return last.remaining == 1

    def all_records(self) -> tuple[CycleRecord, ...]:
        return (self.baseline, *self.records)

    def survivors_after(self, cycle: int) -> frozenset[int]:
        """Stable ids still present once the given cycle has run."""
        alive = set(self.baseline.ranking.group_ids)
        for rec in self.records[:cycle]:
            alive -= set(rec.removed_ids)
        return frozenset(alive)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "baseline": self.baseline.to_dict(),
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeletionCurve":
        return cls(
            plan=DeletionPlan.from_dict(d["plan"]),
            baseline=CycleRecord.from_dict(d["baseline"]),
            records=tuple(CycleRecord.from_dict(r) for r in d["records"]),
        )


# ---------------------------------------------------------------------------
# the campaign loop


def _lane_seed(seed: int, cycle: int, lane: int) -> int:
    """Per-cycle derived seed; lane 0 builds and trains, lane 1 explains."""
    return int(np.random.SeedSequence([int(seed), int(cycle), lane]).generate_state(1)[0])


def _run_cycle(
    cur: SplitTriple,
    spec: ModelSpec,
    cfg: TrainConfig,
    plan: DeletionPlan,
    budget: ExplainBudget,
    seed: int,
    cycle: int,
    removed_ids: tuple[int, ...],
) -> tuple[CycleRecord, ExplainBudget]:
    _, t, b = cur.train.shape
    fit_seed = _lane_seed(seed, cycle, 0)
    model = resize_for_input(spec, t, b, fit_seed)
    model, report = train(model, cur.train, cur.validation, replace(cfg, seed=fit_seed))
    val = evaluate(model, cur.validation)
    test = evaluate(model, cur.test)

    groups = feature_groups(cur.train.schema, plan.axis)
    budget = budget.freeze(cur.train, seed)
    samples = cur.train.values[np.asarray(budget.sample_ids, dtype=np.int64)]
    matrix = run_estimator(
        plan.estimator_tag,
        model,
        samples,
        groups,
        budget,
        _lane_seed(seed, cycle, 1),
        baseline=mean_baseline(cur.train),
        sample_ids=budget.sample_ids,
    )
    record = CycleRecord(
        cycle=cycle,
        removed_ids=removed_ids,
        remaining=groups.n_groups,
        report=report,
        val_metric=val,
        test_metric=test,
        ranking=aggregate_rank(matrix),
    )
    return record, budget


def run_roar(
    splits: SplitTriple,
    spec: ModelSpec,
    cfg: TrainConfig,
    plan: DeletionPlan,
    seed: int,
    on_cycle: Optional[Callable[[CycleRecord], None]] = None,
) -> DeletionCurve:
    """Run a deletion campaign until a single group survives.

    Each cycle retrains from fresh weights on the shrunken splits, then
    re-explains the retrained model; the new ranking alone decides the
    next removal. Deterministic for a given seed. Training divergence or
    an estimator failure aborts the run, carrying the partial curve on
    the raised error.
    """
    step = plan.step_size(feature_groups(splits.train.schema, plan.axis).n_groups)
    budget = plan.budget
    baseline: Optional[CycleRecord] = None
    records: list[CycleRecord] = []
    cur = splits
    cycle = 0
    removed: tuple[int, ...] = ()
    while True:
        try:
            record, budget = _run_cycle(cur, spec, cfg, plan, budget, seed, cycle, removed)
        except (TrainingDiverged, EstimatorError) as exc:
            partial = None
            if baseline is not None:
                partial = DeletionCurve(plan, baseline, tuple(records))
            raise RoarAborted(f"cycle {cycle} failed: {exc}", partial) from exc
        if cycle == 0:
            baseline = record
        else:
            records.append(record)
        if on_cycle is not None:
            on_cycle(record)
        if record.remaining <= 1:
            break
        n_del = min(step, record.remaining - 1)
        if plan.order is DeletionOrder.MOST_FIRST:
            removed = record.ranking.top(n_del)
        else:
            removed = record.ranking.bottom(n_del)
        cur = cur.map(lambda d, ids=removed: _DELETE[plan.axis](d, ids))
        cycle += 1
    return DeletionCurve(plan=plan, baseline=baseline, records=tuple(records))


# ---------------------------------------------------------------------------
# curve queries


def sufficient_set(curve: DeletionCurve) -> tuple[frozenset[int], MetricValue]:
    """Smallest surviving set that keeps the validation metric within
    the plan tolerance of the baseline, and that cycle's metric."""
    if curve.plan.order is not DeletionOrder.LEAST_FIRST:
        raise CurveError("sufficient set needs a least_first curve")
    floor = curve.baseline.val_metric.value - curve.plan.tolerance
    best = frozenset(curve.baseline.ranking.group_ids)
    metric = curve.baseline.val_metric
    survivors = set(best)
    for rec in curve.records:
        survivors -= set(rec.removed_ids)
        # survivor count strictly decreases, so a later qualifying cycle
        # always wins the "smallest" comparison
        if rec.val_metric.value >= floor:
            best = frozenset(survivors)
            metric = rec.val_metric
    return best, metric


def necessary_set(curve: DeletionCurve, floor: float) -> frozenset[int]:
    """Groups removed up to the first cycle whose validation metric
    falls below ``floor``; empty if the curve never crosses it."""
    if curve.plan.order is not DeletionOrder.MOST_FIRST:
        raise CurveError("necessary set needs a most_first curve")
    removed: set[int] = set()
    for rec in curve.records:
        removed |= set(rec.removed_ids)
        if rec.val_metric.value < floor:
            return frozenset(removed)
    return frozenset()


# ---------------------------------------------------------------------------
# persistence


CURVE_CSV_COLUMNS = ("cycle", "fraction_removed", "val_metric", "test_metric")


def curve_csv_text(curve: DeletionCurve) -> str:
    """Flat per-cycle series; floats keep full shortest-repr precision."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_CSV_COLUMNS)
    total = curve.n_groups
    for rec in curve.all_records():
        fraction = (total - rec.remaining) / total
        writer.writerow([rec.cycle, fraction, rec.val_metric.value, rec.test_metric.value])
    return buf.getvalue()


def save_curve_csv(curve: DeletionCurve, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(curve_csv_text(curve))
    os.replace(tmp, path)


def save_curve(curve: DeletionCurve, path: str | Path) -> None:
    """Full structured trace as JSON, written atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(curve.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_curve(path: str | Path) -> DeletionCurve:
    return DeletionCurve.from_dict(json.loads(Path(path).read_text()))
