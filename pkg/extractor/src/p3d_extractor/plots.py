"""Render evaluation CSVs to figures.

The plotter is purely presentational: it parses a CSV, draws a figure, and
returns the parsed values untouched so callers can verify that nothing was
recomputed.  The input kind is detected from the header row:

* ``model_id,block_id,bin_id,recall,n_pairs,n_excluded`` -- recall curves,
  one line per (model, block) over the angle bins.
* ``model_id,task_id,domain_id,block_id,bin_id,metric,value,...`` -- one
  curve figure per (task, metric) using the binned rows.
* ``task,<task names...>`` -- a symmetric correlation heatmap.
* ``name,<keypoint names...>`` -- a confusion-count heatmap, row-normalized
  for display while the raw counts pass through unchanged.
* ``model_id,rating`` -- a bar chart of model ratings.

Figures are written atomically; the input files are never modified.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg", force=True)

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .errors import ConfigError, PlotError  # noqa: E402
from .formats import atomic_write_bytes  # noqa: E402

RECALL_COLUMNS = ("model_id", "block_id", "bin_id", "recall", "n_pairs",
                  "n_excluded")
REPORT_COLUMNS = ("model_id", "task_id", "domain_id", "block_id", "bin_id",
                  "metric", "value", "higher_is_better")

_FIGURE_DPI = 130


@dataclass(frozen=True)
class PlotRecord:
    """One rendered figure plus the exact values that were drawn."""

    source: Path
    figure: Path
    kind: str
    labels: tuple[str, ...]
    series: tuple[tuple[str, np.ndarray], ...]


def plot_report(csv_paths: Sequence[Path | str],
                out_dir: Path | str) -> list[PlotRecord]:
    """Render every CSV in ``csv_paths`` into ``out_dir``.

    Returns one :class:`PlotRecord` per figure, in input order.  Raises
    :class:`PlotError` for unreadable or malformed CSVs and
    :class:`ConfigError` when two inputs would produce the same figure file.
    """
    if not csv_paths:
        raise ConfigError("no CSV files to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records: list[PlotRecord] = []
    claimed: dict[str, Path] = {}
    for raw in csv_paths:
        path = Path(raw)
        header, data = _read_table(path)
        for record in _render(path, header, data, out_dir, claimed):
            records.append(record)
    return records


# --------------------------------------------------------------------------
# table reading


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise PlotError(f"cannot read {path.name}: {exc}") from exc
    if not rows:
        raise PlotError(f"{path.name}: empty file")
    header, data = rows[0], rows[1:]
    if not data:
        raise PlotError(f"{path.name}: no data rows")
    for row_num, row in enumerate(data, start=2):
        if len(row) != len(header):
            raise PlotError(
                f"{path.name}: row {row_num} has {len(row)} cells, "
                f"expected {len(header)}")
    return header, data


def _require_columns(header: Sequence[str], required: Iterable[str],
                     name: str) -> dict[str, int]:
    index = {column: k for k, column in enumerate(header)}
    for column in required:
        if column not in index:
            raise PlotError(f"{name}: missing column {column!r}")
    return index


def _parse_float(text: str, column: str, row_num: int, name: str,
                 empty_is_gap: bool = False) -> float:
    text = text.strip()
    if text == "" and empty_is_gap:
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise PlotError(
            f"{name}: column {column!r} has non-numeric value {text!r} "
            f"in row {row_num}") from None


def _sanitize(token: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9._-]+", "-", token).strip("-")
    return cleaned or "x"


# --------------------------------------------------------------------------
# dispatch


def _render(path: Path, header: list[str], data: list[list[str]],
            out_dir: Path, claimed: dict[str, Path]) -> list[PlotRecord]:
    if header and header[0] == "task":
        return [_render_matrix(path, header, data, out_dir, claimed,
                               kind="correlation_heatmap")]
    if header and header[0] == "name":
        return [_render_matrix(path, header, data, out_dir, claimed,
                               kind="confusion_heatmap")]
    if header == ["model_id", "rating"]:
        return [_render_ratings(path, data, out_dir, claimed)]
    if header and header[0] == "model_id" and "metric" in header:
        return _render_report(path, header, data, out_dir, claimed)
    if header and header[0] == "model_id":
        return [_render_recall(path, header, data, out_dir, claimed)]
    first = header[0] if header else ""
    raise PlotError(f"{path.name}: unrecognized CSV header starting with "
                    f"{first!r}")


# --------------------------------------------------------------------------
# figure writing


def _claim(filename: str, source: Path, out_dir: Path,
           claimed: dict[str, Path]) -> Path:
    if filename in claimed:
        raise ConfigError(
            f"figure {filename!r} would be written by both "
            f"{claimed[filename]} and {source}; rename one of the inputs")
    claimed[filename] = source
    return out_dir / filename


def _save_figure(fig, target: Path) -> None:
    buffer = io.BytesIO()
    try:
        fig.savefig(buffer, format="png", dpi=_FIGURE_DPI,
                    bbox_inches="tight")
    finally:
        plt.close(fig)
    atomic_write_bytes(target, buffer.getvalue())


def _draw_curves(title: str, labels: Sequence[str],
                 series: Sequence[tuple[str, np.ndarray]],
                 ylabel: str, target: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    x = np.arange(len(labels))
    for label, values in series:
        ax.plot(x, values, marker="o", linewidth=1.5, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    _save_figure(fig, target)


def _draw_heatmap(title: str, labels: Sequence[str], shown: np.ndarray,
                  target: Path, vmin: float | None, vmax: float | None,
                  cmap: str) -> None:
    side = max(3.2, 0.5 * len(labels) + 1.8)
    fig, ax = plt.subplots(figsize=(side + 1.0, side))
    image = ax.imshow(shown, vmin=vmin, vmax=vmax, cmap=cmap)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels)
    ax.set_title(title)
    fig.colorbar(image, ax=ax, fraction=0.046)
    _save_figure(fig, target)


# --------------------------------------------------------------------------
# per-kind renderers


def _render_recall(path: Path, header: list[str], data: list[list[str]],
                   out_dir: Path, claimed: dict[str, Path]) -> PlotRecord:
    name = path.name
    cols = _require_columns(header, RECALL_COLUMNS, name)

    bins: list[str] = []
    lines: dict[str, dict[str, float]] = {}
    for row_num, row in enumerate(data, start=2):
        bin_id = row[cols["bin_id"]]
        if bin_id not in bins:
            bins.append(bin_id)
        label = (f"{row[cols['model_id']]} / "
                 f"block {row[cols['block_id']]}")
        value = _parse_float(row[cols["recall"]], "recall", row_num, name,
                             empty_is_gap=True)
        lines.setdefault(label, {})[bin_id] = value

    series = tuple(
        (label, np.asarray([points.get(b, math.nan) for b in bins]))
        for label, points in lines.items())
    target = _claim(f"{path.stem}_curves.png", path, out_dir, claimed)
    _draw_curves(path.stem, bins, series, "recall", target)
    return PlotRecord(source=path, figure=target, kind="recall_curves",
                      labels=tuple(bins), series=series)


def _render_report(path: Path, header: list[str], data: list[list[str]],
                   out_dir: Path,
                   claimed: dict[str, Path]) -> list[PlotRecord]:
    name = path.name
    cols = _require_columns(header, REPORT_COLUMNS, name)

    groups: dict[tuple[str, str], dict] = {}
    for row_num, row in enumerate(data, start=2):
        bin_id = row[cols["bin_id"]].strip()
        if bin_id == "":
            continue  # scalar rows carry no curve to draw
        key = (row[cols["task_id"]], row[cols["metric"]])
        group = groups.setdefault(key, {"bins": [], "lines": {}})
        if bin_id not in group["bins"]:
            group["bins"].append(bin_id)
        parts = [row[cols["model_id"]]]
        if row[cols["domain_id"]].strip():
            parts.append(row[cols["domain_id"]])
        if row[cols["block_id"]].strip():
            parts.append(f"block {row[cols['block_id']]}")
        label = " / ".join(parts)
        value = _parse_float(row[cols["value"]], "value", row_num, name)
        group["lines"].setdefault(label, {})[bin_id] = value

    if not groups:
        raise PlotError(f"{name}: no binned rows to plot (every bin_id "
                        "is empty)")

    records = []
    for (task, metric), group in groups.items():
        bins = group["bins"]
        series = tuple(
            (label, np.asarray([points.get(b, math.nan) for b in bins]))
            for label, points in group["lines"].items())
        filename = (f"{path.stem}_{_sanitize(task)}_{_sanitize(metric)}"
                    "_curves.png")
        target = _claim(filename, path, out_dir, claimed)
        _draw_curves(f"{task}: {metric}", bins, series, metric, target)
        records.append(PlotRecord(source=path, figure=target,
                                  kind="metric_curves", labels=tuple(bins),
                                  series=series))
    return records


def _render_matrix(path: Path, header: list[str], data: list[list[str]],
                   out_dir: Path, claimed: dict[str, Path],
                   kind: str) -> PlotRecord:
    name = path.name
    labels = tuple(header[1:])
    if not labels:
        raise PlotError(f"{name}: matrix CSV has no value columns")
    if len(data) != len(labels):
        raise PlotError(
            f"{name}: {len(data)} rows do not match {len(labels)} columns")

    rows: list[tuple[str, np.ndarray]] = []
    for k, (row_num, row) in enumerate(
            zip(range(2, len(data) + 2), data)):
        row_label = row[0]
        if row_label != labels[k]:
            raise PlotError(
                f"{name}: row label {row_label!r} does not match column "
                f"{k + 1} {labels[k]!r}")
        values = np.asarray([
            _parse_float(cell, labels[j], row_num, name)
            for j, cell in enumerate(row[1:])
        ])
        rows.append((row_label, values))

    matrix = np.asarray([values for _, values in rows])
    if kind == "correlation_heatmap":
        shown, vmin, vmax, cmap = matrix, -1.0, 1.0, "RdBu_r"
        title = path.stem
    else:
        totals = matrix.sum(axis=1, keepdims=True)
        safe = np.where(totals == 0, 1.0, totals)
        shown, vmin, vmax, cmap = matrix / safe, 0.0, 1.0, "viridis"
        title = f"{path.stem} (row-normalized)"

    target = _claim(f"{path.stem}_heatmap.png", path, out_dir, claimed)
    _draw_heatmap(title, labels, shown, target, vmin, vmax, cmap)
    return PlotRecord(source=path, figure=target, kind=kind, labels=labels,
                      series=tuple(rows))


def _render_ratings(path: Path, data: list[list[str]], out_dir: Path,
                    claimed: dict[str, Path]) -> PlotRecord:
    name = path.name
    models: list[str] = []
    values: list[float] = []
    for row_num, row in enumerate(data, start=2):
        models.append(row[0])
        values.append(_parse_float(row[1], "rating", row_num, name))

    ratings = np.asarray(values)
    target = _claim(f"{path.stem}_ratings.png", path, out_dir, claimed)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(models) + 1.5), 4.0))
    ax.bar(range(len(models)), ratings, color="#4878cf")
    ax.set_xticks(range(len(models)))
    ax.set_xticklabels(models, rotation=30, ha="right")
    ax.set_ylabel("rating")
    ax.set_title(path.stem)
    ax.grid(True, axis="y", alpha=0.3)
    _save_figure(fig, target)
    return PlotRecord(source=path, figure=target, kind="rating_bars",
                      labels=tuple(models),
                      series=(("rating", ratings),))
