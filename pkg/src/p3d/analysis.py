"""Cross-task aggregation of evaluation results.

A MetricReport is a flat, uniquely-keyed table of metric rows produced by the
evaluation commands.  This module turns reports into Pearson correlation
matrices between tasks, rank-based normalized ratings per model (1 = best,
0 = worst, averaged over tasks), and per-model best-block selections.

Conventions fixed here:

* A task's per-model score is the unweighted mean of the report rows its
  TaskSpec selects; models missing any selected task are excluded and named.
* Ranks use average ties; the per-task rating is (n - rank) / (n - 1).
* best_block maximizes the unweighted mean over the block's bins, breaking
  ties toward the lowest block id (minimizes instead when the metric's
  higher_is_better flag is False).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError, DegenerateInputError, ShapeError

__all__ = [
    "ANY",
    "MetricRow",
    "MetricReport",
    "TaskSpec",
    "TaskValue",
    "CorrelationResult",
    "RatingResult",
    "BestBlock",
    "pearson",
    "task_value",
    "task_correlation_matrix",
    "rank_rating",
    "best_block",
]


class _AnyType:
    """Sentinel distinguishing "no filter" from filtering for None."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return "ANY"


ANY = _AnyType()


@dataclass(frozen=True)
class MetricRow:
    """One scored metric value.

    ``block_id`` and ``bin_id`` are None for metrics without that axis
    (e.g. probe metrics have no viewpoint bin).
    """

    model_id: str
    task_id: str
    domain_id: str
    metric: str
    value: float
    higher_is_better: bool
    block_id: int | None = None
    bin_id: str | None = None

    def key(self) -> tuple:
        return (
            self.model_id,
            self.task_id,
            self.domain_id,
            self.block_id,
            self.bin_id,
            self.metric,
        )


class MetricReport:
    """An immutable, uniquely-keyed collection of MetricRows."""

    def __init__(self, rows: Iterable[MetricRow]):
        rows = tuple(rows)
        seen: set[tuple] = set()
        for row in rows:
            if not isinstance(row, MetricRow):
                raise ConfigError(f"expected MetricRow, got {type(row).__name__}")
            if not np.isfinite(row.value):
                raise DataError(f"non-finite metric value in row {row.key()}")
            k = row.key()
            if k in seen:
                raise DataError(f"duplicate metric row key {k}")
            seen.add(k)
        self._rows = rows

    @property
    def rows(self) -> tuple[MetricRow, ...]:
        return self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def models(self) -> list[str]:
        return sorted({r.model_id for r in self._rows})

    def select(
        self,
        model_id=ANY,
        task_id=ANY,
        domain_id=ANY,
        metric=ANY,
        block_id=ANY,
        bin_id=ANY,
    ) -> list[MetricRow]:
        """Rows matching every given filter; ANY leaves a field unfiltered
        (None for block/bin matches only rows without that axis)."""
        out = []
        for r in self._rows:
            if model_id is not ANY and r.model_id != model_id:
                continue
            if task_id is not ANY and r.task_id != task_id:
                continue
            if domain_id is not ANY and r.domain_id != domain_id:
                continue
            if metric is not ANY and r.metric != metric:
                continue
            if block_id is not ANY and r.block_id != block_id:
                continue
            if bin_id is not ANY and r.bin_id != bin_id:
                continue
            out.append(r)
        return out

    def merged_with(self, other: "MetricReport") -> "MetricReport":
        return MetricReport(self._rows + other.rows)


@dataclass(frozen=True)
class TaskSpec:
    """Selector defining how one task's per-model score is read off a report.

    The score is the unweighted mean of all selected rows (e.g. over bins or
    blocks when those fields are left as ANY).
    """

    name: str
    task_id: str
    metric: str
    domain_id: object = ANY
    block_id: object = ANY
    bin_id: object = ANY


@dataclass(frozen=True)
class TaskValue:
    value: float
    higher_is_better: bool
    n_rows: int


def task_value(report: MetricReport, spec: TaskSpec, model_id: str) -> TaskValue | None:
    """The model's score on one task, or None when no rows match."""
    rows = report.select(
        model_id=model_id,
        task_id=spec.task_id,
        domain_id=spec.domain_id,
        metric=spec.metric,
        block_id=spec.block_id,
        bin_id=spec.bin_id,
    )
    if not rows:
        return None
    flags = {r.higher_is_better for r in rows}
    if len(flags) != 1:
        raise DataError(
            f"task {spec.name!r}: selected rows disagree on higher_is_better for "
            f"model {model_id!r}"
        )
    return TaskValue(
        value=float(np.mean([r.value for r in rows])),
        higher_is_better=flags.pop(),
        n_rows=len(rows),
    )


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation coefficient of two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ShapeError(f"expected 1-D vectors, got shapes {x.shape} and {y.shape}")
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DataError(f"need at least 2 points, got {x.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DataError("correlation inputs contain non-finite values")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt(np.sum(xc * xc)))
    sy = float(np.sqrt(np.sum(yc * yc)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateInputError(
            "correlation undefined: input has zero variance"
        )
    r = float(np.dot(xc, yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def _common_models(
    report: MetricReport, tasks: Sequence[TaskSpec]
) -> tuple[list[str], dict[str, dict[str, TaskValue]], list[tuple[str, str]]]:
    """Models holding a value for every task, their scores, and the
    (model, missing-task) exclusions."""
    if not tasks:
        raise ConfigError("need at least one task")
    names = [t.name for t in tasks]
    if len(set(names)) != len(names):
        raise ConfigError(f"task names must be unique, got {names}")
    scores: dict[str, dict[str, TaskValue]] = {}
    excluded: list[tuple[str, str]] = []
    for model in report.models():
        values: dict[str, TaskValue] = {}
        missing = None
        for spec in tasks:
            tv = task_value(report, spec, model)
            if tv is None:
                missing = spec.name
                break
            values[spec.name] = tv
        if missing is not None:
            excluded.append((model, missing))
        else:
            scores[model] = values
    return sorted(scores), scores, excluded


@dataclass(frozen=True)
class CorrelationResult:
    task_names: tuple[str, ...]
    matrix: np.ndarray = field(repr=False)
    models: tuple[str, ...]
    excluded: tuple[tuple[str, str], ...]


def task_correlation_matrix(
    report: MetricReport, tasks: Sequence[TaskSpec]
) -> CorrelationResult:
    """Pearson correlation between every pair of tasks, over the models that
    have scores for all of them.  Symmetric with an exactly-unit diagonal."""
    models, scores, excluded = _common_models(report, tasks)
    if len(models) < 2:
        raise DataError(
            f"need at least 2 models with all tasks, got {len(models)} "
            f"(excluded: {excluded})"
        )
    columns = {
        spec.name: np.array([scores[m][spec.name].value for m in models])
        for spec in tasks
    }
    k = len(tasks)
    matrix = np.eye(k, dtype=np.float64)
    for i in range(k):
        for j in range(i + 1, k):
            r = pearson(columns[tasks[i].name], columns[tasks[j].name])
            matrix[i, j] = r
            matrix[j, i] = r
    return CorrelationResult(
        task_names=tuple(t.name for t in tasks),
        matrix=matrix,
        models=tuple(models),
        excluded=tuple(excluded),
    )


@dataclass(frozen=True)
class RatingResult:
    models: tuple[str, ...]
    ratings: dict[str, float]
    per_task: dict[str, dict[str, float]]
    excluded: tuple[tuple[str, str], ...]


def rank_rating(report: MetricReport, tasks: Sequence[TaskSpec]) -> RatingResult:
    """Normalized rank rating per model: rank models on each task (respecting
    the metric's direction; ties share the average rank), map rank to
    (n - rank)/(n - 1), and average over tasks."""
    models, scores, excluded = _common_models(report, tasks)
    n = len(models)
    if n < 2:
        raise DataError(
            f"need at least 2 models with all tasks to rank, got {n} "
            f"(excluded: {excluded})"
        )
    per_task: dict[str, dict[str, float]] = {}
    for spec in tasks:
        values = np.array([scores[m][spec.name].value for m in models])
        higher = scores[models[0]][spec.name].higher_is_better
        # rank 1 = best
        ranks = rankdata(-values if higher else values, method="average")
        per_task[spec.name] = {
            m: float((n - rank) / (n - 1)) for m, rank in zip(models, ranks)
        }
    ratings = {
        m: float(np.mean([per_task[spec.name][m] for spec in tasks])) for m in models
    }
    return RatingResult(
        models=tuple(models),
        ratings=ratings,
        per_task=per_task,
        excluded=tuple(excluded),
    )


@dataclass(frozen=True)
class BestBlock:
    block_id: int
    mean_value: float
    rows: tuple[MetricRow, ...]


def best_block(report: MetricReport, model_id: str, task_id: str,
               metric: object = ANY) -> BestBlock:
    """The block whose bin values have the best unweighted mean for one
    model and task; ties go to the lowest block id."""
    rows = [
        r
        for r in report.select(model_id=model_id, task_id=task_id, metric=metric)
        if r.block_id is not None
    ]
    if not rows:
        raise DataError(
            f"no per-block rows for model {model_id!r}, task {task_id!r}"
        )
    flags = {r.higher_is_better for r in rows}
    if len(flags) != 1:
        raise DataError(
            f"per-block rows disagree on higher_is_better for model {model_id!r}, "
            f"task {task_id!r}"
        )
    higher = flags.pop()
    by_block: dict[int, list[MetricRow]] = {}
    for r in rows:
        by_block.setdefault(r.block_id, []).append(r)
    means = {
        b: float(np.mean([r.value for r in rs])) for b, rs in sorted(by_block.items())
    }
    if higher:
        best_id = min(means, key=lambda b: (-means[b], b))
    else:
        best_id = min(means, key=lambda b: (means[b], b))
    return BestBlock(
        block_id=best_id,
        mean_value=means[best_id],
        rows=tuple(by_block[best_id]),
    )
