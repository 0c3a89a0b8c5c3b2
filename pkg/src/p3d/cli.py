"""Command-line entry point: training, evaluation, analysis, self-tests.

Subcommands
-----------

``probe-train``
    Fit a dense probe (depth or normals) on a manifest dataset; writes a
    checkpoint, a JSON-lines training log, and a metric report CSV.
``probe-eval``
    Evaluate an existing checkpoint on a manifest; writes a metric CSV.
``corr-eval``
    Zero-shot correspondence recall per feature block per viewpoint bin;
    writes ``recall.csv`` plus a metric report for downstream analysis.
``semantic-eval``
    Keypoint transfer accuracy per class per viewpoint-variation level,
    with per-(class, level) confusion matrices.
``analyze``
    Cross-task Pearson correlation matrix and rank-based model ratings
    from one or more metric report CSVs.
``selftest``
    Fast self-contained numerical checks (gradients against finite
    differences, matcher against a brute-force oracle, closed-form
    metric values); exits nonzero naming the first failing check.

Conventions shared by all commands: configuration can come from a JSON
file (``--config``) with flag overrides winning; all randomness flows from
``--seed`` (default 0); outputs land under ``--out`` with fixed filenames;
reruns with identical configuration produce byte-identical outputs.  Exit
codes: 0 success, 1 self-test failure, 2 configuration error, 3 data
error, 4 numerical failure.  ``P3D_JOBS`` sets the default worker count
for pair-level parallelism.
"""

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import matching as mt
from . import metrics as met
from . import objectives as obj
from . import synthetic as syn
from . import tensorcore as tc
from .analysis import MetricReport, MetricRow, TaskSpec, pearson, rank_rating, task_correlation_matrix
from .datastore import (
    Manifest,
    checkpoint_probe,
    load_manifest,
    read_checkpoint_config,
    read_dense_map,
    read_feature_file,
    read_report_csv,
    restore_probe,
    write_correlation_csv,
    write_rating_csv,
    write_report_csv,
)
from .errors import ConfigError, DataError, NumericError, P3DError
from .geometry import CameraFrame, Pose, project, relative_angle, unproject
from .matching import FeatureGrid
from .objectives import LossConfig, OptimState, TASK_DEPTH, TASK_NORMALS
from .probes import ProbeConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CHECKPOINT_FILENAME = "checkpoint.p3dc"
TRAIN_LOG_FILENAME = "training_log.jsonl"
METRICS_FILENAME = "metrics.csv"
RECALL_FILENAME = "recall.csv"
REPORT_FILENAME = "report.csv"
PCK_FILENAME = "pck.csv"
CORRELATION_FILENAME = "correlation.csv"
RATINGS_FILENAME = "ratings.csv"

#: Fraction of training spent in linear warmup (1.5 of the default 10 epochs).
WARMUP_FRACTION = 0.15


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Resolved settings of one command invocation."""

    command: str
    manifest: Path | None = None
    features_dir: Path | None = None
    out: Path | None = None
    seed: int = 0
    jobs: int = 1
    # probe training / evaluation
    task: str = TASK_DEPTH
    stages: tuple[int, int, int] = (0, 1, 2)
    hidden_width: int = 128
    epochs: int = 10
    base_lr: float = 1e-3
    depth_min: float = 0.0
    depth_max: float = 10.0
    silog_lambda: float = 0.5
    grad_weight: float = 0.5
    grad_scales: int = 4
    checkpoint: Path | None = None
    # correspondence evaluation
    edges: tuple[float, ...] = mt.DEFAULT_SCENE_EDGES
    mode: str = "proj2d"
    threshold: float | None = None
    top_k: int = mt.DEFAULT_TOP_K
    blocks: tuple[int, ...] = (0, 1, 2, 3)
    # semantic evaluation
    alpha: float = mt.DEFAULT_PCK_ALPHA
    block: int = 0
    # analysis
    reports: tuple[Path, ...] = ()
    tasks: tuple[TaskSpec, ...] = ()
    # shared labeling
    model_id: str | None = None
    domain: str = "default"
    # selftest
    inject_bug: str | None = None


def _parse_int_tuple(value, flag: str) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    try:
        return tuple(int(v) for v in str(value).split(","))
    except ValueError:
        raise ConfigError(f"{flag} must be a comma-separated list of integers, got {value!r}")


def _parse_float_tuple(value, flag: str) -> tuple[float, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    try:
        return tuple(float(v) for v in str(value).split(","))
    except ValueError:
        raise ConfigError(f"{flag} must be a comma-separated list of numbers, got {value!r}")


def _parse_task_spec(value) -> TaskSpec:
    """Accepts ``NAME=TASK_ID/METRIC`` strings or config-file mappings."""
    if isinstance(value, dict):
        try:
            spec = {"name": value["name"], "task_id": value["task_id"],
                    "metric": value["metric"]}
        except KeyError as e:
            raise ConfigError(f"task entry missing field {e}")
        for key in ("domain_id", "block_id", "bin_id"):
            if key in value:
                spec[key] = value[key]
        return TaskSpec(**spec)
    text = str(value)
    if "=" not in text or "/" not in text.split("=", 1)[1]:
        raise ConfigError(
            f"task must look like NAME=TASK_ID/METRIC, got {text!r}")
    name, rest = text.split("=", 1)
    task_id, metric = rest.split("/", 1)
    if not (name and task_id and metric):
        raise ConfigError(f"task must look like NAME=TASK_ID/METRIC, got {text!r}")
    return TaskSpec(name=name, task_id=task_id, metric=metric)


def _load_config_file(path: Path) -> dict:
    try:
        text = Path(path).read_text("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _default_jobs() -> int:
    raw = os.environ.get("P3D_JOBS", "1")
    try:
        jobs = int(raw)
    except ValueError:
        raise ConfigError(f"P3D_JOBS must be an integer, got {raw!r}")
    return jobs


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the optional config file, and explicit flags.

    Flags win over the config file, which wins over built-in defaults.
    """
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_load_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("config", "func", "command"):
            continue
        if value is not None:
            merged[key] = value

    cfg = RunConfig(command=args.command)
    for key, value in merged.items():
        if not hasattr(cfg, key):
            raise ConfigError(f"unknown configuration key {key!r}")
        setattr(cfg, key, value)

    # normalize strings and containers coming from either source
    for path_key in ("manifest", "features_dir", "out", "checkpoint"):
        value = getattr(cfg, path_key)
        if value is not None:
            setattr(cfg, path_key, Path(value))
    cfg.stages = _parse_int_tuple(cfg.stages, "--stages")
    cfg.blocks = _parse_int_tuple(cfg.blocks, "--blocks")
    cfg.edges = _parse_float_tuple(cfg.edges, "--edges")
    cfg.reports = tuple(Path(p) for p in cfg.reports)
    cfg.tasks = tuple(_parse_task_spec(t) for t in cfg.tasks)
    cfg.seed = int(cfg.seed)
    if "jobs" not in merged:
        cfg.jobs = _default_jobs()
    cfg.jobs = int(cfg.jobs)
    if cfg.jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {cfg.jobs}")
    if cfg.mode not in ("proj2d", "metric3d"):
        raise ConfigError(f"--mode must be proj2d or metric3d, got {cfg.mode!r}")
    if cfg.task not in (TASK_DEPTH, TASK_NORMALS):
        raise ConfigError(f"--task must be {TASK_DEPTH} or {TASK_NORMALS}, got {cfg.task!r}")
    if len(cfg.stages) != 3:
        raise ConfigError(f"--stages must name exactly 3 feature blocks, got {cfg.stages}")
    if cfg.epochs < 1:
        raise ConfigError(f"--epochs must be positive, got {cfg.epochs}")
    if not cfg.depth_min < cfg.depth_max:
        raise ConfigError(
            f"depth range must satisfy min < max, got ({cfg.depth_min}, {cfg.depth_max})")
    return cfg


def _require_out(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("--out is required")
    cfg.out.mkdir(parents=True, exist_ok=True)
    return cfg.out


def _resolve_manifest(cfg: RunConfig) -> Manifest:
    """Load the manifest, resolving feature/map paths against
    ``--features-dir`` when given (default: the manifest's directory)."""
    if cfg.manifest is None:
        raise ConfigError("--manifest is required")
    if not cfg.manifest.exists():
        raise DataError(f"manifest not found: {cfg.manifest}")
    if cfg.features_dir is not None and not cfg.features_dir.is_dir():
        raise DataError(f"feature directory not found: {cfg.features_dir}")
    return load_manifest(cfg.manifest, root=cfg.features_dir)


def _parallel_map(fn, items, jobs: int) -> list:
    """Apply ``fn`` over ``items`` preserving order; threads when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Shared manifest -> arrays plumbing
# ---------------------------------------------------------------------------


class _FeatureCache:
    """Reads feature files at most once per item and tracks the model id."""

    def __init__(self):
        self._files: dict[str, object] = {}
        self.model_id: str | None = None

    def file_for(self, item) -> object:
        if item.features is None:
            raise DataError(f"manifest item '{item.item_id}' has no feature file")
        if item.item_id not in self._files:
            data = read_feature_file(item.features)
            if self.model_id is None:
                self.model_id = data.model_id
            elif data.model_id != self.model_id:
                raise DataError(
                    f"feature files disagree on the model id: "
                    f"{self.model_id!r} vs {data.model_id!r} ({item.item_id})")
            self._files[item.item_id] = data
        return self._files[item.item_id]

    def grid(self, item, block_id: int) -> FeatureGrid:
        data = self.file_for(item)
        block = data.block(block_id)
        return FeatureGrid(block.values, model_id=data.model_id, block_id=block_id,
                           image_size=(item.width, item.height))


def _probe_stages(cache: _FeatureCache, item, stages: tuple[int, ...]) -> list[np.ndarray]:
    data = cache.file_for(item)
    arrays = []
    for block_id in stages:
        values = data.block(block_id).values  # (H, W, C) float32
        arrays.append(np.ascontiguousarray(np.moveaxis(values, 2, 0)))
    return arrays


def _load_mask(item) -> np.ndarray:
    if item.valid_mask is None:
        return np.ones((item.height, item.width), dtype=bool)
    return read_dense_map(item.valid_mask).values.astype(bool)


def _depth_sample(cache: _FeatureCache, item,
                  stages: tuple[int, ...]) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    if item.depth_map is None:
        raise DataError(f"manifest item '{item.item_id}' has no depth map")
    depth = read_dense_map(item.depth_map).values.astype(np.float64)
    mask = _load_mask(item) & (depth > 0)
    return _probe_stages(cache, item, stages), depth, mask


def _normal_sample(cache: _FeatureCache, item,
                   stages: tuple[int, ...]) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    if item.normal_map is None:
        raise DataError(f"manifest item '{item.item_id}' has no normal map")
    normal = read_dense_map(item.normal_map).values.astype(np.float64)
    return _probe_stages(cache, item, stages), normal, _load_mask(item)


class _ListDataset:
    def __init__(self, samples):
        self.samples = samples

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]


def _metric_rows_for_probe(cfg: RunConfig, model_id: str, task: str,
                           per_item: list[dict]) -> list[MetricRow]:
    """Average per-item metric dicts into one MetricRow per metric name."""
    if not per_item:
        raise DataError("no items to evaluate")
    names = sorted(per_item[0])
    rows = []
    for name in names:
        value = float(np.mean([m[name] for m in per_item]))
        higher = not name.startswith("rmse")
        rows.append(MetricRow(model_id=model_id, task_id=task, domain_id=cfg.domain,
                              metric=name, value=value, higher_is_better=higher))
    return rows


def _evaluate_probe(cfg: RunConfig, probe, task: str, manifest: Manifest,
                    cache: _FeatureCache) -> list[dict]:
    depth_range = (cfg.depth_min, cfg.depth_max)

    def one(item) -> dict:
        image_hw = (item.height, item.width)
        if task == TASK_DEPTH:
            feats, gt, mask = _depth_sample(cache, item, cfg.stages)
            pred = obj.predict_depth(probe, feats, image_hw, depth_range)
            return met.depth_metrics(pred, gt, mask).as_dict()
        feats, gt, mask = _normal_sample(cache, item, cfg.stages)
        normal, _ = obj.predict_normals(probe, feats, image_hw)
        return met.normal_metrics(normal, gt, mask).as_dict()

    items = manifest.ordered_items()
    if not items:
        raise DataError("manifest lists no items")
    return _parallel_map(one, items, cfg.jobs)


def _probe_config_for(cfg: RunConfig, cache: _FeatureCache, item, task: str) -> ProbeConfig:
    data = cache.file_for(item)
    channels = tuple(data.block(b).values.shape[2] for b in cfg.stages)
    out_channels = 256 if task == TASK_DEPTH else 4
    return ProbeConfig(stage_channels=channels, out_channels=out_channels,
                       hidden_width=cfg.hidden_width, used_stages=cfg.stages)


# ---------------------------------------------------------------------------
# probe-train / probe-eval
# ---------------------------------------------------------------------------


def cmd_probe_train(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    manifest = _resolve_manifest(cfg)
    cache = _FeatureCache()
    items = manifest.ordered_items()
    train_items = [i for i in items if i.split in (None, "train")]
    if not train_items:
        raise DataError("manifest has no training items (split 'train' or untagged)")

    loader = _depth_sample if cfg.task == TASK_DEPTH else _normal_sample
    samples = [loader(cache, item, cfg.stages) for item in train_items]
    dataset = _ListDataset(samples)
    probe_config = _probe_config_for(cfg, cache, train_items[0], cfg.task)
    optim = OptimState(base_lr=cfg.base_lr, total_epochs=cfg.epochs,
                       warmup_epochs=WARMUP_FRACTION * cfg.epochs)
    loss_config = LossConfig(silog_lambda=cfg.silog_lambda,
                             grad_weight=cfg.grad_weight, grad_scales=cfg.grad_scales)
    probe, log = obj.train_probe(cfg.task, dataset, probe_config,
                                 loss_config=loss_config,
                                 depth_range=(cfg.depth_min, cfg.depth_max),
                                 seed=cfg.seed, optim=optim)

    checkpoint_probe(out / CHECKPOINT_FILENAME, probe)
    with open(out / TRAIN_LOG_FILENAME, "w", encoding="utf-8", newline="\n") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    per_item = _evaluate_probe(cfg, probe, cfg.task, manifest, cache)
    model_id = cfg.model_id or cache.model_id or "unknown"
    rows = _metric_rows_for_probe(cfg, model_id, cfg.task, per_item)
    write_report_csv(out / METRICS_FILENAME, MetricReport(tuple(rows)))
    return EXIT_OK


def cmd_probe_eval(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    if cfg.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    if not cfg.checkpoint.exists():
        raise DataError(f"checkpoint not found: {cfg.checkpoint}")
    manifest = _resolve_manifest(cfg)
    cache = _FeatureCache()
    probe_config = read_checkpoint_config(cfg.checkpoint)
    probe = restore_probe(cfg.checkpoint, probe_config)
    task = TASK_DEPTH if probe_config.out_channels == 256 else TASK_NORMALS
    cfg.stages = probe_config.used_stages
    per_item = _evaluate_probe(cfg, probe, task, manifest, cache)
    model_id = cfg.model_id or cache.model_id or "unknown"
    rows = _metric_rows_for_probe(cfg, model_id, task, per_item)
    write_report_csv(out / METRICS_FILENAME, MetricReport(tuple(rows)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# corr-eval
# ---------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _format_value(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def cmd_corr_eval(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    manifest = _resolve_manifest(cfg)
    if not manifest.pairs:
        raise DataError("manifest lists no evaluation pairs")
    cache = _FeatureCache()
    binning = mt.bin_pairs([p.angle_deg for p in manifest.pairs], edges=cfg.edges)
    if binning.n_excluded:
        print(f"note: {binning.n_excluded} pair(s) fall outside the bins "
              f"{cfg.edges} and are ignored", file=sys.stderr)

    frames: dict[str, CameraFrame] = {}

    def frame_for(item) -> CameraFrame:
        if item.item_id not in frames:
            if item.depth_map is None:
                raise DataError(f"manifest item '{item.item_id}' has no depth map")
            depth = read_dense_map(item.depth_map).values.astype(np.float64)
            mask = None
            if item.valid_mask is not None:
                mask = read_dense_map(item.valid_mask).values.astype(bool)
            frames[item.item_id] = CameraFrame(item.intrinsics, item.pose, depth, mask)
        return frames[item.item_id]

    # preload shared per-item state sequentially so worker threads only read
    for pair in manifest.pairs:
        for item_id in (pair.a, pair.b):
            item = manifest.item(item_id)
            cache.file_for(item)
            frame_for(item)

    def eval_pair(pair) -> dict[int, float | None]:
        item_a = manifest.item(pair.a)
        item_b = manifest.item(pair.b)
        frame_a, frame_b = frame_for(item_a), frame_for(item_b)
        results: dict[int, float | None] = {}
        for block_id in cfg.blocks:
            grid_a = cache.grid(item_a, block_id)
            grid_b = cache.grid(item_b, block_id)
            matches = mt.top_k(mt.dense_nn_matches(grid_a, grid_b), k=cfg.top_k)
            if cfg.mode == "proj2d":
                threshold = (cfg.threshold if cfg.threshold is not None
                             else mt.scale_threshold_px(mt.DEFAULT_PROJ2D_BASE_PX,
                                                        (item_a.width, item_a.height)))
            else:
                if cfg.threshold is None:
                    raise ConfigError("--threshold is required for metric3d mode")
                threshold = cfg.threshold
            res = mt.geometric_recall(matches, grid_a, grid_b, frame_a, frame_b,
                                      mode=cfg.mode, threshold=threshold)
            results[block_id] = res.recall
        return results

    per_pair = _parallel_map(eval_pair, list(manifest.pairs), cfg.jobs)

    model_id = cfg.model_id or cache.model_id or "unknown"
    labels = binning.labels()
    csv_rows, report_rows = [], []
    for block_id in cfg.blocks:
        for bin_index, label in enumerate(labels):
            indices = binning.indices_in(bin_index)
            values = [per_pair[i][block_id] for i in indices]
            defined = [v for v in values if v is not None]
            recall = float(np.mean(defined)) if defined else None
            csv_rows.append([model_id, block_id, label, _format_value(recall),
                             len(defined), len(values) - len(defined)])
            if recall is not None:
                report_rows.append(MetricRow(
                    model_id=model_id, task_id="correspondence", domain_id=cfg.domain,
                    metric="recall", value=recall, higher_is_better=True,
                    block_id=block_id, bin_id=label))
    _write_csv(out / RECALL_FILENAME,
               ["model_id", "block_id", "bin_id", "recall", "n_pairs", "n_excluded"],
               csv_rows)
    write_report_csv(out / REPORT_FILENAME, MetricReport(tuple(report_rows)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# semantic-eval
# ---------------------------------------------------------------------------


def cmd_semantic_eval(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    manifest = _resolve_manifest(cfg)
    if not manifest.keypoint_pairs:
        raise DataError("manifest lists no keypoint pairs")
    cache = _FeatureCache()
    for pair in manifest.keypoint_pairs:
        cache.file_for(manifest.item(pair.a))
        cache.file_for(manifest.item(pair.b))

    def eval_pair(pair):
        item_a = manifest.item(pair.a)
        item_b = manifest.item(pair.b)
        grid_a = cache.grid(item_a, cfg.block)
        grid_b = cache.grid(item_b, cfg.block)
        result = mt.transfer_keypoints(grid_a, grid_b, item_a.keypoints)
        score = mt.pck(result.predictions, item_b.keypoints, alpha=cfg.alpha)
        return pair.class_label, pair.variation, score, (result.predictions,
                                                         item_b.keypoints)

    evaluated = _parallel_map(eval_pair, list(manifest.keypoint_pairs), cfg.jobs)

    counts: dict[tuple[str, int], list[int]] = {}
    instances: dict[tuple[str, int], list] = {}
    for class_label, variation, score, instance in evaluated:
        key = (class_label, variation)
        tally = counts.setdefault(key, [0, 0])
        tally[0] += score.n_correct
        tally[1] += score.n_scored
        instances.setdefault(key, []).append(instance)

    classes = sorted({c for c, _ in counts})
    variations = sorted({v for _, v in counts})

    def pooled(pairs_correct_scored: list[list[int]]):
        correct = sum(c for c, _ in pairs_correct_scored)
        scored = sum(s for _, s in pairs_correct_scored)
        return (100.0 * correct / scored if scored else None), correct, scored

    pck_rows, report_rows = [], []
    model_id = cfg.model_id or cache.model_id or "unknown"

    def add_row(class_label: str, level: str, stats):
        value, correct, scored = stats
        pck_rows.append([class_label, level, _format_value(value), correct, scored])
        if value is not None:
            report_rows.append(MetricRow(
                model_id=model_id, task_id="semantic", domain_id=cfg.domain,
                metric=f"pck@{cfg.alpha:g}", value=value, higher_is_better=True,
                block_id=cfg.block, bin_id=f"{class_label}/d={level}"))

    for class_label in classes:
        per_level = []
        for variation in variations:
            tally = counts.get((class_label, variation))
            if tally is None:
                continue
            per_level.append(tally)
            add_row(class_label, str(variation), pooled([tally]))
        add_row(class_label, "all", pooled(per_level))
    add_row("all", "all", pooled(list(counts.values())))
    _write_csv(out / PCK_FILENAME,
               ["class", "variation", "pck", "n_correct", "n_scored"], pck_rows)
    write_report_csv(out / REPORT_FILENAME, MetricReport(tuple(report_rows)))

    for (class_label, variation), pair_instances in sorted(instances.items()):
        names = tuple(k.name for k in pair_instances[0][1].keypoints)
        confusion = mt.keypoint_confusion(pair_instances, names)
        rows = [[name] + [int(c) for c in row]
                for name, row in zip(names, confusion.counts)]
        _write_csv(out / f"confusion_{class_label}_d{variation}.csv",
                   ["name"] + list(names), rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    if not cfg.reports:
        raise ConfigError("--reports is required (one or more metric CSV files)")
    if not cfg.tasks:
        raise ConfigError("--task is required (NAME=TASK_ID/METRIC, repeatable)")
    rows: list[MetricRow] = []
    for path in cfg.reports:
        rows.extend(read_report_csv(path).rows)
    report = MetricReport(tuple(rows))

    rating = rank_rating(report, list(cfg.tasks))
    for model_id, task_name in rating.excluded:
        print(f"note: model '{model_id}' lacks task '{task_name}' and is excluded",
              file=sys.stderr)
    write_rating_csv(out / RATINGS_FILENAME, rating)

    correlation = task_correlation_matrix(report, list(cfg.tasks))
    write_correlation_csv(out / CORRELATION_FILENAME, correlation)
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def _fd_gradient_error(build, corrupt_graph=None, coords: int = 24,
                       eps: float = 1e-5) -> float:
    """Worst relative error between analytic gradients and central finite
    differences.  ``build()`` returns (f, param); ``corrupt_graph`` optionally
    wraps f for the analytic pass only, simulating a buggy backward rule."""
    f, param = build()
    graph_f = corrupt_graph(f) if corrupt_graph else f
    param.zero_grad()
    loss = graph_f(param)
    tc.backward(loss, [param])
    analytic = param.grad.reshape(-1)
    flat = param.values.reshape(-1)
    rng = np.random.default_rng(0)
    picks = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
    worst = 0.0
    for idx in picks:
        keep = flat[idx]
        flat[idx] = keep + eps
        up = f(param).item()
        flat[idx] = keep - eps
        down = f(param).item()
        flat[idx] = keep
        fd = (up - down) / (2.0 * eps)
        worst = max(worst, abs(analytic[idx] - fd) / max(1.0, abs(analytic[idx])))
    return worst


def _selftest_checks(inject: str | None):
    """Yield (name, callable) pairs; each callable raises AssertionError on
    failure."""

    def check_gradient_ops():
        rng = np.random.default_rng(1)
        x = tc.Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
        w = tc.Tensor(0.2 * rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = tc.Tensor(0.1 * rng.normal(size=(4,)), requires_grad=True)
        err = tc.grad_check(
            lambda x, w, b: tc.reduce_sum(tc.relu(tc.conv2d(x, w, b, padding=1))),
            [x, w, b], max_coords_per_param=24)
        assert err < 1e-4, f"conv2d+relu gradient error {err:.3e} >= 1e-4"
        y = tc.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        err = tc.grad_check(
            lambda y: tc.reduce_sum(tc.mul(tc.bilinear_upsample(y, 2),
                                           tc.bilinear_upsample(y, 2))),
            [y], max_coords_per_param=24)
        assert err < 1e-4, f"bilinear_upsample gradient error {err:.3e} >= 1e-4"
        z = tc.Tensor(rng.normal(size=(1, 6, 3, 3)), requires_grad=True)
        err = tc.grad_check(
            lambda z: tc.reduce_sum(tc.mul(tc.softmax_channels(z),
                                           tc.add_scalar(z, 0.5))),
            [z], max_coords_per_param=24)
        assert err < 1e-4, f"softmax gradient error {err:.3e} >= 1e-4"

    def check_gradient_composite():
        rng = np.random.default_rng(2)
        gt = rng.uniform(2.0, 8.0, size=(8, 8))
        mask = np.ones((8, 8), dtype=bool)
        x = tc.Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
        w = tc.Tensor(0.3 * rng.normal(size=(4, 4, 3, 3)), requires_grad=True)
        b = tc.Tensor(np.zeros(4))

        def build():
            def f(p):
                h = tc.relu(tc.conv2d(p, w, b, padding=1))
                up = tc.bilinear_upsample(h, 2)
                depth = tc.add_scalar(tc.scale(tc.softmax_channels(up), 4.0), 2.0)
                one = tc.channel_slice(depth, 0, 1)
                return obj.silog_loss(one, gt, mask)
            return f, x

        corrupt = None
        if inject == "gradient":
            def corrupt(f):
                # analytic pass sees an extra linear term the finite
                # differences of ``f`` do not: a stand-in for a wrong
                # backward rule
                return lambda p: tc.add(f(p), tc.scale(tc.reduce_sum(p), 0.05))
        err = _fd_gradient_error(build, corrupt_graph=corrupt)
        assert err < 1e-3, f"composite gradient error {err:.3e} >= 1e-3"

    def check_matching_oracle():
        rng = np.random.default_rng(3)
        fa = rng.normal(size=(6, 6, 4))
        fb = rng.normal(size=(6, 6, 4))
        grid_a, grid_b = FeatureGrid(fa), FeatureGrid(fb)
        matches = mt.dense_nn_matches(grid_a, grid_b)
        flat_b = fb.reshape(-1, 4)
        unit_b = flat_b / np.linalg.norm(flat_b, axis=1, keepdims=True)
        for m in matches:
            v = fa[m.src]
            sims = unit_b @ (v / np.linalg.norm(v))
            dists = 1.0 - np.clip(sims, -1.0, 1.0)
            order = sorted(range(len(dists)), key=lambda k: (dists[k], k))
            best, second = order[0], order[1]
            assert m.dst_first == divmod(best, 6), \
                f"match at {m.src}: {m.dst_first} vs oracle {divmod(best, 6)}"
            d0, d1 = dists[best], dists[second]
            expected = 0.0 if d1 == 0 else 1.0 - d0 / d1
            assert abs(m.ratio - expected) < 1e-12, \
                f"ratio at {m.src}: {m.ratio} vs oracle {expected}"

    def check_geometry_round_trip():
        from .geometry import Intrinsics
        intr = Intrinsics(fx=100.0, fy=120.0, cx=31.5, cy=23.5, width=64, height=48)
        rng = np.random.default_rng(4)
        for _ in range(100):
            pixel = (rng.uniform(0, 63), rng.uniform(0, 47))
            depth = rng.uniform(0.5, 10.0)
            u, v = project(unproject(pixel, depth, intr), intr)
            err = math.hypot(u - pixel[0], v - pixel[1])
            assert err < 1e-6, f"round trip error {err:.3e} >= 1e-6"
        quarter = math.pi / 2
        rx = np.array([[1, 0, 0],
                       [0, math.cos(quarter), -math.sin(quarter)],
                       [0, math.sin(quarter), math.cos(quarter)]])
        rz = np.array([[math.cos(quarter), -math.sin(quarter), 0],
                       [math.sin(quarter), math.cos(quarter), 0],
                       [0, 0, 1]])
        angle = relative_angle(Pose(rx @ rz, np.zeros(3)), Pose.identity())
        assert abs(angle - 120.0) < 1e-9, f"composed rotation {angle} != 120"

    def check_metric_closed_forms():
        gt = np.linspace(1.0, 5.0, 25).reshape(5, 5)
        mask = np.ones_like(gt, dtype=bool)
        m = met.depth_metrics(1.3 * gt, gt, mask)
        assert m.delta1 == 0.0 and m.delta2 == 100.0, \
            f"1.3x depth gave delta1={m.delta1}, delta2={m.delta2}"
        silog = obj.silog_loss(tc.Tensor((2 * gt).reshape(1, 1, 5, 5)), gt, mask).item()
        expected = 0.5 * math.log(2.0) ** 2
        assert abs(silog - expected) < 1e-9, f"silog {silog} != {expected}"
        r = pearson(np.array([1.0, 2.0, 3.0]), np.array([2.0, 4.0, 7.0]))
        closed = (5.0 / 3.0) / math.sqrt((2.0 / 3.0) * (38.0 / 9.0))
        assert abs(r - closed) < 1e-12, f"pearson {r} != {closed}"

    def check_stereo_recall():
        pair = syn.make_stereo_pair(22.5)
        matches = mt.dense_nn_matches(pair.grid_a, pair.grid_b)
        res = mt.geometric_recall(matches, pair.grid_a, pair.grid_b,
                                  pair.frame_a, pair.frame_b,
                                  mode="proj2d", threshold=1e-9)
        assert res.recall == 1.0, f"stereo fixture recall {res.recall} != 1.0"

    def check_semantic_identity():
        sem = syn.make_semantic_pairs(class_labels=("check",), variations=(0,))[0]
        result = mt.transfer_keypoints(sem.grid_a, sem.grid_b, sem.keypoints_a)
        score = mt.pck(result.predictions, sem.keypoints_b, alpha=1e-6)
        assert score.fraction == 1.0, f"identity transfer PCK {score.percent} != 100"
        names = tuple(k.name for k in sem.keypoints_a.keypoints)
        confusion = mt.keypoint_confusion([(result.predictions, sem.keypoints_b)], names)
        assert np.array_equal(confusion.normalized(), np.eye(len(names))), \
            "identity fixture confusion is not the identity matrix"

    yield "gradient_ops", check_gradient_ops
    yield "gradient_composite", check_gradient_composite
    yield "matching_oracle", check_matching_oracle
    yield "geometry_round_trip", check_geometry_round_trip
    yield "metric_closed_forms", check_metric_closed_forms
    yield "stereo_recall", check_stereo_recall
    yield "semantic_identity", check_semantic_identity


def cmd_selftest(cfg: RunConfig) -> int:
    failures = []
    for name, check in _selftest_checks(cfg.inject_bug):
        try:
            check()
        except Exception as e:  # any breakage is a failed check, not a crash
            failures.append((name, str(e)))
            print(f"FAIL {name}: {e}")
        else:
            print(f"ok {name}")
    if failures:
        names = ", ".join(name for name, _ in failures)
        print(f"selftest failed: {names}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"selftest passed ({sum(1 for _ in _selftest_checks(None))} checks)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON config file; explicit flags override it")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (fixed filenames inside)")
    parser.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker threads for pair-level parallelism "
                             "(default: P3D_JOBS or 1)")


def _add_manifest(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=Path, default=None,
                        help="dataset manifest (JSON)")
    parser.add_argument("--features-dir", dest="features_dir", type=Path, default=None,
                        help="directory feature/map paths resolve against "
                             "(default: the manifest's directory)")
    parser.add_argument("--model-id", dest="model_id", default=None,
                        help="model label for reports (default: from feature files)")
    parser.add_argument("--domain", default=None,
                        help="domain label for report rows (default 'default')")


def _add_probe_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--stages", default=None,
                        help="comma-separated feature block ids used as probe "
                             "stages, coarsest first (default 0,1,2)")
    parser.add_argument("--depth-min", dest="depth_min", type=float, default=None)
    parser.add_argument("--depth-max", dest="depth_max", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p3d",
        description="Dense 3D-awareness evaluation of frozen visual features")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probe-train", help="fit a dense probe on a manifest")
    _add_common(p)
    _add_manifest(p)
    _add_probe_flags(p)
    p.add_argument("--task", choices=(TASK_DEPTH, TASK_NORMALS), default=None)
    p.add_argument("--hidden-width", dest="hidden_width", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p.add_argument("--silog-lambda", dest="silog_lambda", type=float, default=None)
    p.add_argument("--grad-weight", dest="grad_weight", type=float, default=None)
    p.add_argument("--grad-scales", dest="grad_scales", type=int, default=None)
    p.set_defaults(func=cmd_probe_train)

    p = sub.add_parser("probe-eval", help="evaluate a probe checkpoint")
    _add_common(p)
    _add_manifest(p)
    _add_probe_flags(p)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.set_defaults(func=cmd_probe_eval)

    p = sub.add_parser("corr-eval", help="correspondence recall per block per bin")
    _add_common(p)
    _add_manifest(p)
    p.add_argument("--edges", default=None,
                   help="comma-separated viewpoint bin edges in degrees "
                        "(default 0,15,30,60,180)")
    p.add_argument("--mode", choices=("proj2d", "metric3d"), default=None)
    p.add_argument("--threshold", type=float, default=None,
                   help="correctness threshold: pixels for proj2d (default: "
                        "10 px scaled by image diagonal), meters for metric3d")
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--blocks", default=None,
                   help="comma-separated feature block ids (default 0,1,2,3)")
    p.set_defaults(func=cmd_corr_eval)

    p = sub.add_parser("semantic-eval", help="keypoint transfer accuracy")
    _add_common(p)
    _add_manifest(p)
    p.add_argument("--alpha", type=float, default=None,
                   help="PCK threshold as a fraction of max bbox side (default 0.1)")
    p.add_argument("--block", type=int, default=None,
                   help="feature block id to match with (default 0)")
    p.set_defaults(func=cmd_semantic_eval)

    p = sub.add_parser("analyze", help="cross-task correlations and ratings")
    _add_common(p)
    p.add_argument("--reports", type=Path, nargs="+", default=None,
                   help="metric report CSV files")
    p.add_argument("--task", dest="tasks", action="append", default=None,
                   metavar="NAME=TASK_ID/METRIC",
                   help="task selector, repeatable; config files may add "
                        "domain_id/block_id/bin_id filters")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selftest", help="run built-in numerical checks")
    _add_common(p)
    p.add_argument("--inject-bug", dest="inject_bug", choices=("gradient",),
                   default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = build_config(args)
        return args.func(cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except P3DError as e:  # pragma: no cover - defensive catch-all
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
