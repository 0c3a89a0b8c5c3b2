"""Zero-shot correspondence evaluation.

Dense cosine nearest-neighbor matching with ratio-test confidence scores,
top-k selection, geometric recall against calibrated camera pairs,
viewpoint-angle binning, and semantic keypoint transfer scored by PCK and
keypoint confusion matrices.

Conventions fixed here:

* Cosine distance ``D(a, b) = 1 - (a . b) / (|a||b|)``, with the similarity
  clamped to [-1, 1] so distances are never negative.  A zero-norm feature
  vector has distance 1 to everything.
* Matching is one-directional (every source cell queries the destination
  grid); ties are broken by row-major destination order.
* Ratio confidence ``r = 1 - D0/D1`` where D0/D1 are the first and second
  nearest distances; when D1 = 0 (the two best candidates are both perfect)
  the match carries no uniqueness evidence and r = 0.
* Grid cell (i, j) of an ``Hg x Wg`` grid over a ``W x H`` image has its
  center at image pixel ``u = (j + 0.5) * W/Wg - 0.5`` (and likewise for v):
  the same half-pixel-center convention used by bilinear upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, ShapeError

__all__ = [
    "FeatureGrid",
    "Match",
    "RecallResult",
    "ViewpointBinning",
    "Keypoint",
    "KeypointSet",
    "TransferResult",
    "PckResult",
    "ConfusionResult",
    "dense_nn_matches",
    "top_k",
    "geometric_recall",
    "bin_pairs",
    "transfer_keypoints",
    "pck",
    "keypoint_confusion",
    "bilinear_sample",
    "mask_to_grid",
    "scale_threshold_px",
    "points_diagonal",
    "DEFAULT_SCENE_EDGES",
    "DEFAULT_OBJECT_EDGES",
    "DEFAULT_TOP_K",
    "DEFAULT_PROJ2D_BASE_PX",
    "DEFAULT_METRIC3D_FRACTION",
    "DEFAULT_PCK_ALPHA",
]

# Default viewpoint-angle bin edges (degrees).  Scene-scale pair sets use
# wide bins up to a half turn; object-centric sets cap at 120 degrees.
DEFAULT_SCENE_EDGES = (0.0, 15.0, 30.0, 60.0, 180.0)
DEFAULT_OBJECT_EDGES = (0.0, 30.0, 60.0, 90.0, 120.0)

DEFAULT_TOP_K = 1000
# 2D threshold is quoted at 640x480 and rescaled by image diagonal.
DEFAULT_PROJ2D_BASE_PX = 10.0
_REFERENCE_DIAGONAL = math.hypot(640.0, 480.0)
# 3D threshold as a fraction of the object's bounding-box diagonal.
DEFAULT_METRIC3D_FRACTION = 0.05
DEFAULT_PCK_ALPHA = 0.1

_BLOCK_IDS = (0, 1, 2, 3)


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """A dense feature map laid over a source image.

    ``values`` has shape (height, width, channels).  ``image_size`` is the
    source image's (width, height) in pixels; it defaults to the grid size
    (one cell per pixel).
    """

    values: np.ndarray
    model_id: str = ""
    block_id: int = 0
    image_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3:
            raise ShapeError(
                f"feature grid must be (height, width, channels), got {values.shape}"
            )
        if min(values.shape) < 1:
            raise ShapeError(f"feature grid has empty dimension: {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DataError("feature grid contains non-finite values")
        if self.block_id not in _BLOCK_IDS:
            raise ConfigError(f"block_id must be one of {_BLOCK_IDS}, got {self.block_id}")
        object.__setattr__(self, "values", values)
        if self.image_size is None:
            object.__setattr__(self, "image_size", (values.shape[1], values.shape[0]))
        else:
            w, h = self.image_size
            if w < 1 or h < 1:
                raise ConfigError(f"image_size must be positive, got {self.image_size}")
            object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def cell_center(self, i: int, j: int) -> tuple[float, float]:
        """Image-pixel center (u, v) of grid cell (i, j)."""
        h, w = self.grid_shape
        if not (0 <= i < h and 0 <= j < w):
            raise DataError(f"cell ({i}, {j}) outside {h}x{w} grid")
        img_w, img_h = self.image_size
        u = (j + 0.5) * (img_w / w) - 0.5
        v = (i + 0.5) * (img_h / h) - 0.5
        return u, v

    def pixel_to_grid(self, u: float, v: float) -> tuple[float, float]:
        """Continuous grid coordinates (gi, gj) of image pixel (u, v)."""
        h, w = self.grid_shape
        img_w, img_h = self.image_size
        gj = (u + 0.5) * (w / img_w) - 0.5
        gi = (v + 0.5) * (h / img_h) - 0.5
        return gi, gj

    def flat_vectors(self) -> np.ndarray:
        """Row-major (height*width, channels) view of the grid."""
        h, w = self.grid_shape
        return self.values.reshape(h * w, self.channels)


@dataclass(frozen=True)
class Match:
    """One source cell matched to its two nearest destination cells."""

    src: tuple[int, int]
    dst_first: tuple[int, int]
    dst_second: tuple[int, int]
    ratio: float
    d_first: float
    d_second: float


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    """L2-normalize rows; zero-norm rows become zero vectors."""
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return np.where(norms > 0.0, vectors / safe, 0.0)


def _flat_mask(mask: np.ndarray | None, grid_shape: tuple[int, int], name: str) -> np.ndarray:
    if mask is None:
        return np.ones(grid_shape[0] * grid_shape[1], dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != grid_shape:
        raise ShapeError(f"{name} shape {mask.shape} does not match grid {grid_shape}")
    return mask.astype(bool).ravel()


def dense_nn_matches(
    feat_a: FeatureGrid,
    feat_b: FeatureGrid,
    mask_a: np.ndarray | None = None,
    mask_b: np.ndarray | None = None,
) -> list[Match]:
    """Match every unmasked cell of ``feat_a`` to its two nearest unmasked
    cells of ``feat_b`` under cosine distance, with ratio confidence.

    Returns matches in row-major source order.  Raises
    DegenerateInputError when fewer than two destination candidates remain.
    """
    if feat_a.channels != feat_b.channels:
        raise ShapeError(
            f"channel mismatch: source has {feat_a.channels}, destination has {feat_b.channels}"
        )
    src_keep = _flat_mask(mask_a, feat_a.grid_shape, "mask_a")
    dst_keep = _flat_mask(mask_b, feat_b.grid_shape, "mask_b")
    src_idx = np.flatnonzero(src_keep)
    dst_idx = np.flatnonzero(dst_keep)
    if dst_idx.size < 2:
        raise DegenerateInputError(
            f"need at least 2 destination candidates, got {dst_idx.size}"
        )
    if src_idx.size == 0:
        return []

    units_a = _unit_rows(feat_a.flat_vectors()[src_idx])
    units_b = _unit_rows(feat_b.flat_vectors()[dst_idx])
    sims = np.clip(units_a @ units_b.T, -1.0, 1.0)
    dists = 1.0 - sims

    rows = np.arange(src_idx.size)
    first_col = dists.argmin(axis=1)
    d_first = dists[rows, first_col]
    masked = dists.copy()
    masked[rows, first_col] = np.inf
    second_col = masked.argmin(axis=1)
    d_second = dists[rows, second_col]

    wb = feat_b.grid_shape[1]
    wa = feat_a.grid_shape[1]
    matches: list[Match] = []
    for k in range(src_idx.size):
        d0 = float(d_first[k])
        d1 = float(d_second[k])
        ratio = 1.0 - d0 / d1 if d1 > 0.0 else 0.0
        sflat = int(src_idx[k])
        fflat = int(dst_idx[first_col[k]])
        tflat = int(dst_idx[second_col[k]])
        matches.append(
            Match(
                src=(sflat // wa, sflat % wa),
                dst_first=(fflat // wb, fflat % wb),
                dst_second=(tflat // wb, tflat % wb),
                ratio=ratio,
                d_first=d0,
                d_second=d1,
            )
        )
    return matches


def top_k(matches: Sequence[Match], k: int = DEFAULT_TOP_K) -> list[Match]:
    """The ``min(k, len)`` matches with highest ratio confidence, ordered by
    ratio descending with ties in row-major source order."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ordered = sorted(matches, key=lambda m: (-m.ratio, m.src[0], m.src[1]))
    return ordered[:k]


@dataclass(frozen=True)
class RecallResult:
    """Geometric recall over a match set.

    ``errors`` aligns with the input matches; None marks matches dropped for
    invalid depth.  ``recall`` is None when no match was evaluable.
    """

    recall: float | None
    errors: tuple[float | None, ...]
    n_evaluable: int
    n_correct: int
    n_dropped: int


def geometric_recall(
    matches: Sequence[Match],
    grid_a: FeatureGrid,
    grid_b: FeatureGrid,
    frame_a,
    frame_b,
    mode: str = "proj2d",
    threshold: float = DEFAULT_PROJ2D_BASE_PX,
) -> RecallResult:
    """Fraction of matches whose geometric error is strictly below
    ``threshold``.

    ``mode="proj2d"`` measures 2D reprojection error in pixels;
    ``mode="metric3d"`` measures 3D distance between lifted endpoints.
    Matches whose required depth lookups are invalid are dropped from the
    denominator; reprojections landing behind the destination camera count
    as incorrect.
    """
    from . import geometry

    if mode not in ("proj2d", "metric3d"):
        raise ConfigError(f"mode must be 'proj2d' or 'metric3d', got {mode!r}")
    if not threshold > 0.0:
        raise ConfigError(f"threshold must be positive, got {threshold}")
    for grid, frame, name in ((grid_a, frame_a, "A"), (grid_b, frame_b, "B")):
        frame_size = (frame.intrinsics.width, frame.intrinsics.height)
        if grid.image_size != frame_size:
            raise ConfigError(
                f"grid {name} image size {grid.image_size} does not match "
                f"camera frame size {frame_size}"
            )

    errors: list[float | None] = []
    n_correct = 0
    n_evaluable = 0
    for m in matches:
        pix_a = grid_a.cell_center(*m.src)
        pix_b = grid_b.cell_center(*m.dst_first)
        try:
            if mode == "proj2d":
                err = geometry.reprojection_error_2d(pix_a, pix_b, frame_a, frame_b)
            else:
                err = geometry.metric_error_3d(pix_a, pix_b, frame_a, frame_b)
        except DataError:
            errors.append(None)
            continue
        errors.append(err)
        n_evaluable += 1
        if err < threshold:
            n_correct += 1

    n_dropped = len(matches) - n_evaluable
    recall = n_correct / n_evaluable if n_evaluable > 0 else None
    return RecallResult(
        recall=recall,
        errors=tuple(errors),
        n_evaluable=n_evaluable,
        n_correct=n_correct,
        n_dropped=n_dropped,
    )


@dataclass(frozen=True)
class ViewpointBinning:
    """Assignment of image pairs to half-open viewpoint-angle bins."""

    edges: tuple[float, ...]
    assignments: tuple[int | None, ...]
    n_excluded: int

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def labels(self) -> list[str]:
        return [
            f"{_fmt_edge(self.edges[i])}-{_fmt_edge(self.edges[i + 1])}"
            for i in range(self.n_bins)
        ]

    def indices_in(self, bin_index: int) -> list[int]:
        if not (0 <= bin_index < self.n_bins):
            raise ConfigError(f"bin index {bin_index} outside 0..{self.n_bins - 1}")
        return [i for i, b in enumerate(self.assignments) if b == bin_index]

    def counts(self) -> list[int]:
        tally = [0] * self.n_bins
        for b in self.assignments:
            if b is not None:
                tally[b] += 1
        return tally


def _fmt_edge(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


def bin_pairs(
    angles: Sequence[float], edges: Sequence[float] = DEFAULT_SCENE_EDGES
) -> ViewpointBinning:
    """Assign each pair's relative viewpoint angle (degrees) to the half-open
    bin [edges[i], edges[i+1]) containing it; angles outside every bin are
    excluded and tallied."""
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2:
        raise ConfigError(f"need at least 2 bin edges, got {len(edges)}")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError(f"bin edges must be strictly increasing, got {edges}")

    assignments: list[int | None] = []
    excluded = 0
    for angle in angles:
        a = float(angle)
        if not np.isfinite(a):
            raise DataError(f"viewpoint angle must be finite, got {a}")
        idx = int(np.searchsorted(edges, a, side="right")) - 1
        if 0 <= idx < len(edges) - 1:
            assignments.append(idx)
        else:
            assignments.append(None)
            excluded += 1
    return ViewpointBinning(
        edges=edges, assignments=tuple(assignments), n_excluded=excluded
    )


# ---------------------------------------------------------------------------
# Semantic keypoint transfer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Keypoint:
    name: str
    u: float
    v: float
    visible: bool = True


@dataclass(frozen=True)
class KeypointSet:
    """Named keypoints for one image, with its object bounding box
    (x_min, y_min, x_max, y_max in pixels), class label, and the pair's
    viewpoint-variation level d in {0, 1, 2} when annotated."""

    keypoints: tuple[Keypoint, ...]
    bbox: tuple[float, float, float, float]
    class_label: str = ""
    variation: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "keypoints", tuple(self.keypoints))
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ConfigError(f"bounding box must be nonempty, got {self.bbox}")
        if self.variation is not None and self.variation not in (0, 1, 2):
            raise ConfigError(
                f"viewpoint-variation level must be 0, 1, or 2, got {self.variation}"
            )
        names = [k.name for k in self.keypoints]
        if len(set(names)) != len(names):
            raise ConfigError("keypoint names must be unique within a set")

    @property
    def bbox_size(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return x1 - x0, y1 - y0

    def visible_keypoints(self) -> list[Keypoint]:
        return [k for k in self.keypoints if k.visible]

    def get(self, name: str) -> Keypoint | None:
        for k in self.keypoints:
            if k.name == name:
                return k
        return None


def bilinear_sample(values: np.ndarray, gi: float, gj: float) -> np.ndarray:
    """Bilinearly interpolate an (H, W, C) array at continuous grid
    coordinates, clamping to the edge cells outside the center range."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeError(f"expected (H, W, C) values, got shape {values.shape}")
    h, w = values.shape[0], values.shape[1]
    gi = min(max(float(gi), 0.0), float(h - 1))
    gj = min(max(float(gj), 0.0), float(w - 1))
    i0 = int(math.floor(gi))
    j0 = int(math.floor(gj))
    i1 = min(i0 + 1, h - 1)
    j1 = min(j0 + 1, w - 1)
    fi = gi - i0
    fj = gj - j0
    top = (1.0 - fj) * values[i0, j0] + fj * values[i0, j1]
    bottom = (1.0 - fj) * values[i1, j0] + fj * values[i1, j1]
    return (1.0 - fi) * top + fi * bottom


@dataclass(frozen=True)
class TransferResult:
    """Predicted destination pixels per keypoint name, plus the names of
    keypoints skipped for lying outside the source image."""

    predictions: dict[str, tuple[float, float]]
    skipped: tuple[str, ...]


def _inside_image(u: float, v: float, image_size: tuple[int, int]) -> bool:
    w, h = image_size
    return 0.0 <= u <= w - 1 and 0.0 <= v <= h - 1


def transfer_keypoints(
    feat_a: FeatureGrid,
    feat_b: FeatureGrid,
    keypoints_a: KeypointSet,
    mask_b: np.ndarray | None = None,
) -> TransferResult:
    """Transfer each visible source keypoint into image B.

    The keypoint's feature vector is bilinearly sampled from ``feat_a`` at
    its grid position and matched (cosine distance, row-major ties) to the
    nearest cell of ``feat_b``; the prediction is that cell's pixel center.
    Keypoints outside the source image are skipped and reported.
    """
    if feat_a.channels != feat_b.channels:
        raise ShapeError(
            f"channel mismatch: source has {feat_a.channels}, destination has {feat_b.channels}"
        )
    dst_keep = _flat_mask(mask_b, feat_b.grid_shape, "mask_b")
    dst_idx = np.flatnonzero(dst_keep)
    if dst_idx.size < 1:
        raise DegenerateInputError("no destination candidates for keypoint transfer")
    units_b = _unit_rows(feat_b.flat_vectors()[dst_idx])
    wb = feat_b.grid_shape[1]

    predictions: dict[str, tuple[float, float]] = {}
    skipped: list[str] = []
    for kp in keypoints_a.visible_keypoints():
        if not _inside_image(kp.u, kp.v, feat_a.image_size):
            skipped.append(kp.name)
            continue
        gi, gj = feat_a.pixel_to_grid(kp.u, kp.v)
        vec = bilinear_sample(feat_a.values, gi, gj)
        unit = _unit_rows(vec[None, :])[0]
        sims = np.clip(units_b @ unit, -1.0, 1.0)
        best = int(dst_idx[int(np.argmax(sims))])
        predictions[kp.name] = feat_b.cell_center(best // wb, best % wb)
    return TransferResult(predictions=predictions, skipped=tuple(skipped))


@dataclass(frozen=True)
class PckResult:
    """Keypoint-transfer accuracy at a bounding-box-relative threshold.

    ``fraction`` is None when no keypoint was scoreable.
    """

    fraction: float | None
    n_correct: int
    n_scored: int
    threshold_px: float

    @property
    def percent(self) -> float | None:
        return None if self.fraction is None else 100.0 * self.fraction


def pck(
    predictions: Mapping[str, tuple[float, float]],
    gt_keypoints: KeypointSet,
    alpha: float = DEFAULT_PCK_ALPHA,
) -> PckResult:
    """Percentage-of-correct-keypoints: a prediction is correct when its
    distance to the like-named visible ground-truth keypoint is at most
    ``alpha * max(bbox width, bbox height)`` (boundary counts as correct).
    Only keypoints with a visible ground-truth match are scored."""
    if not alpha > 0.0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    bw, bh = gt_keypoints.bbox_size
    threshold = alpha * max(bw, bh)
    n_scored = 0
    n_correct = 0
    for name, (u, v) in predictions.items():
        gt = gt_keypoints.get(name)
        if gt is None or not gt.visible:
            continue
        n_scored += 1
        if math.hypot(u - gt.u, v - gt.v) <= threshold:
            n_correct += 1
    fraction = n_correct / n_scored if n_scored > 0 else None
    return PckResult(
        fraction=fraction,
        n_correct=n_correct,
        n_scored=n_scored,
        threshold_px=threshold,
    )


@dataclass
class ConfusionResult:
    """Row-normalized keypoint confusion: rows are queried keypoints,
    columns are the ground-truth keypoints nearest the predictions."""

    names: tuple[str, ...]
    counts: np.ndarray = field(repr=False)

    def normalized(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        safe = np.where(sums > 0, sums, 1.0)
        return self.counts / safe

    def row_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def _nearest_gt_name(
    point: tuple[float, float], gt_keypoints: KeypointSet, name_order: Sequence[str]
) -> str | None:
    """Name of the visible ground-truth keypoint nearest to ``point``;
    ties break by position in ``name_order``."""
    rank = {name: k for k, name in enumerate(name_order)}
    best_name: str | None = None
    best = (math.inf, math.inf)
    for kp in gt_keypoints.visible_keypoints():
        d = math.hypot(point[0] - kp.u, point[1] - kp.v)
        key = (d, rank.get(kp.name, math.inf))
        if key < best:
            best = key
            best_name = kp.name
    return best_name


def keypoint_confusion(
    instances: Sequence[tuple[Mapping[str, tuple[float, float]], KeypointSet]],
    names: Sequence[str],
) -> ConfusionResult:
    """Accumulate a confusion matrix over (predictions, ground truth) pairs.

    For every prediction whose like-named ground-truth keypoint is visible,
    the count at (queried name, nearest visible ground-truth name) is
    incremented.  ``names`` fixes the row/column order.
    """
    names = tuple(names)
    if len(set(names)) != len(names):
        raise ConfigError("confusion names must be unique")
    index = {name: k for k, name in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.float64)
    for predictions, gt_keypoints in instances:
        for name, point in predictions.items():
            gt = gt_keypoints.get(name)
            if gt is None or not gt.visible or name not in index:
                continue
            nearest = _nearest_gt_name(point, gt_keypoints, names)
            if nearest is None or nearest not in index:
                continue
            counts[index[name], index[nearest]] += 1.0
    return ConfusionResult(names=names, counts=counts)


# ---------------------------------------------------------------------------
# Plumbing helpers
# ---------------------------------------------------------------------------


def mask_to_grid(image_mask: np.ndarray, grid_shape: tuple[int, int],
                 image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Downsample a per-pixel boolean mask to grid resolution by sampling
    the image pixel nearest each cell center."""
    image_mask = np.asarray(image_mask).astype(bool)
    if image_mask.ndim != 2:
        raise ShapeError(f"image mask must be 2D, got shape {image_mask.shape}")
    img_h, img_w = image_mask.shape
    if image_size is not None and image_size != (img_w, img_h):
        raise ShapeError(
            f"mask shape {(img_w, img_h)} does not match image size {image_size}"
        )
    gh, gw = grid_shape
    out = np.zeros((gh, gw), dtype=bool)
    for i in range(gh):
        v = (i + 0.5) * (img_h / gh) - 0.5
        pi = int(np.clip(np.rint(v), 0, img_h - 1))
        for j in range(gw):
            u = (j + 0.5) * (img_w / gw) - 0.5
            pj = int(np.clip(np.rint(u), 0, img_w - 1))
            out[i, j] = image_mask[pi, pj]
    return out


def scale_threshold_px(
    base_px: float, image_size: tuple[int, int]
) -> float:
    """Rescale a pixel threshold quoted at 640x480 to another image size,
    proportionally to the image diagonal."""
    if not base_px > 0:
        raise ConfigError(f"threshold must be positive, got {base_px}")
    w, h = image_size
    return base_px * math.hypot(w, h) / _REFERENCE_DIAGONAL


def points_diagonal(points: np.ndarray) -> float:
    """Diagonal length of the axis-aligned bounding box of (N, 3) points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise ShapeError(f"expected (N, 3) points, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise DataError("points contain non-finite values")
    extent = points.max(axis=0) - points.min(axis=0)
    return float(np.linalg.norm(extent))
