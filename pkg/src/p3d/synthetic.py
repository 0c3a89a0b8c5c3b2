"""Procedurally generated evaluation fixtures with analytically known truth.

Three families of fixtures, each built so the correct answer is known in
closed form rather than approximated:

* **Wavy-surface probe data** — images whose depth is a smooth sinusoid
  ``d(u, v) = base + amp_u sin(freq_u (u - cx) + phase_u)
  + amp_v cos(freq_v (v - cy) + phase_v)`` with analytic partial
  derivatives, hence analytic surface normals.  Feature grids encode the
  local depth (radial-basis bumps plus an affine channel) and the normal
  components at every cell center, so a dense probe can recover the truth
  from the features alone.

* **Orbit stereo pairs** — two pinhole cameras on a circle around a common
  fixation point, looking inward, with a single-row image so every ray
  lies in one plane.  Each world point is constructed as the *exact*
  intersection of a pixel-center ray from camera A with a pixel-center ray
  from camera B, so the true correspondence maps cell centers to cell
  centers with zero geometric error (up to float rounding).  Features
  embed the world point itself, making nearest-neighbour matching recover
  the true correspondence exactly.

* **Identity semantic pairs** — two views with identical one-hot feature
  grids and keypoints placed exactly at cell centers, so keypoint transfer
  is exact and the name-confusion matrix is the identity.

Every fixture also has a writer that materializes it as a manifest plus
feature/map files, for exercising the command-line pipeline end to end.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datastore import (
    DenseMap,
    FeatureBlock,
    FeatureFileData,
    MAP_KIND_DEPTH,
    MAP_KIND_MASK,
    MAP_KIND_NORMAL3,
    write_dense_map,
    write_feature_file,
    write_manifest,
)
from .errors import ConfigError, DataError
from .geometry import CameraFrame, Intrinsics, Pose, normals_from_depth
from .matching import FeatureGrid, Keypoint, KeypointSet
from .objectives import TASK_DEPTH, TASK_NORMALS

# ---------------------------------------------------------------------------
# Wavy-surface probe fixture
# ---------------------------------------------------------------------------

#: Number of radial-basis channels used to encode depth.
DEPTH_CODE_CHANNELS = 8

#: Total channels per feature stage: affine depth + RBF code + normal xyz.
FEATURE_CHANNELS = 1 + DEPTH_CODE_CHANNELS + 3

#: Depth interval the radial-basis code is spread over.
DEPTH_CODE_RANGE = (1.5, 8.5)


@dataclass(frozen=True)
class WavySurface:
    """Parameters of one smooth sinusoidal depth field."""

    base: float
    amp_u: float
    amp_v: float
    freq_u: float
    freq_v: float
    phase_u: float
    phase_v: float

    def depth(self, u, v, cx: float, cy: float):
        """Depth and its partial derivatives at continuous pixel coords."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        au = self.freq_u * (u - cx) + self.phase_u
        av = self.freq_v * (v - cy) + self.phase_v
        d = self.base + self.amp_u * np.sin(au) + self.amp_v * np.cos(av)
        d_du = self.amp_u * self.freq_u * np.cos(au)
        d_dv = -self.amp_v * self.freq_v * np.sin(av)
        return d, d_du, d_dv


def _normal_at(surface: WavySurface, u, v, intr: Intrinsics) -> np.ndarray:
    """Unit surface normal at continuous pixel coords, camera-facing.

    Same tangent-cross-product construction as
    :func:`p3d.geometry.normals_from_depth`, evaluated pointwise so cell
    centers between pixel centers get exact values.
    """
    d, d_du, d_dv = surface.depth(u, v, intr.cx, intr.cy)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    tu = np.stack([(d + (u - intr.cx) * d_du) / intr.fx,
                   (v - intr.cy) * d_du / intr.fy,
                   d_du + np.zeros_like(d)])
    tv = np.stack([(u - intr.cx) * d_dv / intr.fx,
                   (d + (v - intr.cy) * d_dv) / intr.fy,
                   d_dv + np.zeros_like(d)])
    n = np.cross(tu, tv, axis=0)
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    flip = n[2] > 0
    n[:, flip] *= -1.0
    return n


def _depth_code(depth: np.ndarray) -> np.ndarray:
    """Stack of radial-basis responses encoding a depth value, plus an
    affine channel; shape (1 + DEPTH_CODE_CHANNELS, ...)."""
    lo, hi = DEPTH_CODE_RANGE
    centers = np.linspace(lo, hi, DEPTH_CODE_CHANNELS)
    sigma = (hi - lo) / (DEPTH_CODE_CHANNELS - 1)
    bumps = np.exp(-((depth[None] - centers.reshape(-1, *[1] * depth.ndim)) ** 2)
                   / (2.0 * sigma * sigma))
    affine = (depth[None] / 5.0) - 1.0
    return np.concatenate([affine, bumps], axis=0)


def _cell_center_coords(grid_hw: tuple[int, int],
                        image_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) pixel coordinates of every cell center of a grid over an image."""
    gh, gw = grid_hw
    h, w = image_hw
    su, sv = w / gw, h / gh
    u = (np.arange(gw, dtype=np.float64) + 0.5) * su - 0.5
    v = (np.arange(gh, dtype=np.float64) + 0.5) * sv - 0.5
    return np.meshgrid(u, v)  # each (gh, gw)


def _stage_features(surface: WavySurface, grid_hw: tuple[int, int],
                    image_hw: tuple[int, int], intr: Intrinsics) -> np.ndarray:
    """(FEATURE_CHANNELS, gh, gw) float32 encoding of the surface at cell
    centers of one stage grid."""
    uu, vv = _cell_center_coords(grid_hw, image_hw)
    d, _, _ = surface.depth(uu, vv, intr.cx, intr.cy)
    code = _depth_code(d)
    normal = _normal_at(surface, uu, vv, intr)
    return np.concatenate([code, normal], axis=0).astype(np.float32)


@dataclass
class ProbeSample:
    """One probe-training sample: multiscale features plus dense truth."""

    features: list[np.ndarray]  # three (C, h, w) float32 stages, coarsest first
    depth: np.ndarray  # (H, W) float64
    normal: np.ndarray  # (3, H, W) float64
    mask: np.ndarray  # (H, W) bool
    intrinsics: Intrinsics
    surface: WavySurface


def make_probe_samples(n_images: int = 64, image_hw: tuple[int, int] = (32, 32),
                       grid_hw: tuple[int, int] = (8, 8), seed: int = 0) -> list[ProbeSample]:
    """Generate a wavy-surface dataset whose features determine the truth.

    Stage grids are ``grid_hw`` scaled down by 4 and 2 plus ``grid_hw``
    itself (coarsest first).  Depth stays within roughly [2.7, 7.3]; surface
    tilt reaches ~20 degrees so a constant normal prediction cannot score
    well at an 11.25-degree threshold.
    """
    h, w = image_hw
    gh, gw = grid_hw
    if h % gh or w % gw or gh % 4 or gw % 4:
        raise ConfigError(
            f"grid {grid_hw} must divide image {image_hw} and be divisible by 4")
    rng = np.random.default_rng(seed)
    intr = Intrinsics(fx=40.0, fy=40.0, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0,
                      width=w, height=h)
    stage_grids = [(gh // 4, gw // 4), (gh // 2, gw // 2), (gh, gw)]
    samples = []
    for _ in range(n_images):
        surface = WavySurface(
            base=float(rng.uniform(3.5, 6.5)),
            amp_u=float(rng.uniform(0.2, 0.4)),
            amp_v=float(rng.uniform(0.2, 0.4)),
            freq_u=float(rng.uniform(0.05, 0.09)),
            freq_v=float(rng.uniform(0.05, 0.09)),
            phase_u=float(rng.uniform(0.0, 2.0 * np.pi)),
            phase_v=float(rng.uniform(0.0, 2.0 * np.pi)),
        )
        uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        depth, d_du, d_dv = surface.depth(uu, vv, intr.cx, intr.cy)
        normal = normals_from_depth(depth, intr, d_du, d_dv)
        features = [_stage_features(surface, g, image_hw, intr) for g in stage_grids]
        samples.append(ProbeSample(
            features=features, depth=depth, normal=normal,
            mask=np.ones(image_hw, dtype=bool), intrinsics=intr, surface=surface))
    return samples


class ProbeFixtureDataset:
    """Adapts :class:`ProbeSample` lists to the training dataset protocol."""

    def __init__(self, samples: list[ProbeSample], task: str):
        if task not in (TASK_DEPTH, TASK_NORMALS):
            raise ConfigError(f"unknown task {task!r}")
        self.samples = list(samples)
        self.task = task

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int):
        s = self.samples[idx]
        gt = s.depth if self.task == TASK_DEPTH else s.normal
        return s.features, gt, s.mask


# ---------------------------------------------------------------------------
# Orbit stereo pairs with exact correspondences
# ---------------------------------------------------------------------------


def _rot_y(angle_deg: float) -> np.ndarray:
    t = np.radians(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class StereoPair:
    """Two posed single-row views with exactly corresponding cell centers."""

    frame_a: CameraFrame
    frame_b: CameraFrame
    grid_a: FeatureGrid
    grid_b: FeatureGrid
    angle_deg: float
    points: np.ndarray  # (n, 3) world points, one per pixel column


def make_stereo_pair(angle_deg: float, n_pixels: int = 12, focal: float = 40.0,
                     fixation_depth: float = 5.0, model_id: str = "fixture",
                     block_id: int = 0) -> StereoPair:
    """Build one exact two-view pair separated by ``angle_deg``.

    Camera A sits at the origin looking down +z; camera B is A rotated by
    ``angle_deg`` about the vertical axis through the fixation point
    ``(0, 0, fixation_depth)``, so both look at that point.  The image is a
    single row (cy = 0 puts every ray in the y = 0 plane), and the world
    point for pixel column ``u`` is the exact intersection of A's ray
    through its pixel center with B's ray through the *same* pixel center,
    found by a 2x2 linear solve.  Features embed the world point as
    ``(x, z, 1)``, which is injective under cosine distance because the
    constant third component pins the scale.
    """
    if not 0.0 < angle_deg < 180.0:
        raise ConfigError(f"pair angle must be in (0, 180), got {angle_deg}")
    if n_pixels < 2:
        raise ConfigError(f"need at least 2 pixel columns, got {n_pixels}")
    cx = (n_pixels - 1) / 2.0
    intr = Intrinsics(fx=focal, fy=focal, cx=cx, cy=0.0, width=n_pixels, height=1)
    fixation = np.array([0.0, 0.0, fixation_depth])
    rot = _rot_y(angle_deg)
    translation = fixation - rot @ fixation
    pose_a = Pose.identity()
    pose_b = Pose(rot, translation)

    depth_a = np.zeros(n_pixels)
    depth_b = np.zeros(n_pixels)
    points = np.zeros((n_pixels, 3))
    for u in range(n_pixels):
        p = (u - cx) / focal
        dir_a = np.array([p, 1.0])  # (x, z) direction from the origin
        dir_b3 = rot @ np.array([p, 0.0, 1.0])
        dir_b = np.array([dir_b3[0], dir_b3[2]])
        origin_b = np.array([translation[0], translation[2]])
        system = np.column_stack([dir_a, -dir_b])
        da, db = np.linalg.solve(system, origin_b)
        if da <= 0 or db <= 0:
            raise DataError(
                f"ray intersection behind a camera at column {u} for angle {angle_deg}")
        depth_a[u] = da
        depth_b[u] = db
        points[u] = [da * p, 0.0, da]

    frame_a = CameraFrame(intr, pose_a, depth_a.reshape(1, n_pixels))
    frame_b = CameraFrame(intr, pose_b, depth_b.reshape(1, n_pixels))
    embed = np.concatenate([points[:, [0, 2]], np.ones((n_pixels, 1))], axis=1)
    values = embed.reshape(1, n_pixels, 3)
    grid_a = FeatureGrid(values, model_id=model_id, block_id=block_id,
                         image_size=(n_pixels, 1))
    grid_b = FeatureGrid(values.copy(), model_id=model_id, block_id=block_id,
                         image_size=(n_pixels, 1))
    return StereoPair(frame_a, frame_b, grid_a, grid_b, float(angle_deg), points)


def binned_pair_angles(edges: tuple[float, ...]) -> list[float]:
    """One representative angle at the middle of each viewpoint bin."""
    if len(edges) < 2:
        raise ConfigError("need at least two bin edges")
    return [(lo + hi) / 2.0 for lo, hi in zip(edges[:-1], edges[1:])]


def make_binned_stereo_pairs(edges: tuple[float, ...], pairs_per_bin: int = 1,
                             n_pixels: int = 12, **kwargs) -> list[StereoPair]:
    """Exact stereo pairs covering every viewpoint bin of ``edges``.

    Additional pairs within a bin nudge the angle by ±10% of the bin width
    around its middle, staying strictly inside the bin.
    """
    if pairs_per_bin < 1:
        raise ConfigError(f"pairs_per_bin must be positive, got {pairs_per_bin}")
    pairs = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mid, width = (lo + hi) / 2.0, hi - lo
        for k in range(pairs_per_bin):
            offset = 0.0 if k == 0 else (0.1 * width if k % 2 else -0.1 * width)
            pairs.append(make_stereo_pair(mid + offset, n_pixels=n_pixels, **kwargs))
    return pairs


# ---------------------------------------------------------------------------
# Identity semantic pairs
# ---------------------------------------------------------------------------


@dataclass
class SemanticPair:
    """Two views with identical one-hot features and cell-center keypoints."""

    grid_a: FeatureGrid
    grid_b: FeatureGrid
    keypoints_a: KeypointSet
    keypoints_b: KeypointSet
    class_label: str
    variation: int


def make_semantic_pairs(class_labels: tuple[str, ...] = ("widget", "gadget"),
                        variations: tuple[int, ...] = (0, 1, 2),
                        grid_hw: tuple[int, int] = (4, 4),
                        cell_px: int = 4,
                        keypoints_per_class: int = 5) -> list[SemanticPair]:
    """One identity pair per (class, variation) with exact transfers.

    Features are one-hot per cell (identical in both views) so the matched
    cell is always the true cell; keypoints sit exactly at cell centers so
    the transferred prediction lands on the keypoint with zero error.
    """
    gh, gw = grid_hw
    n_cells = gh * gw
    if keypoints_per_class > n_cells:
        raise ConfigError(
            f"cannot place {keypoints_per_class} keypoints on {n_cells} cells")
    h, w = gh * cell_px, gw * cell_px
    one_hot = np.eye(n_cells, dtype=np.float64).reshape(gh, gw, n_cells)
    stride = max(1, n_cells // keypoints_per_class)
    pairs = []
    for ci, label in enumerate(class_labels):
        cells = [(ci + 1 + k * stride) % n_cells for k in range(keypoints_per_class)]
        if len(set(cells)) != keypoints_per_class:
            raise ConfigError(
                f"cannot place {keypoints_per_class} distinct keypoints on {n_cells} cells")
        kps = []
        for k, cell in enumerate(cells):
            i, j = divmod(cell, gw)
            u = (j + 0.5) * cell_px - 0.5
            v = (i + 0.5) * cell_px - 0.5
            kps.append(Keypoint(name=f"{label}_kp{k}", u=u, v=v))
        kp_set = KeypointSet(tuple(kps), bbox=(0.0, 0.0, w - 1.0, h - 1.0),
                             class_label=label)
        for d in variations:
            grid_a = FeatureGrid(one_hot, model_id="fixture", block_id=0,
                                 image_size=(w, h))
            grid_b = FeatureGrid(one_hot.copy(), model_id="fixture", block_id=0,
                                 image_size=(w, h))
            pairs.append(SemanticPair(grid_a, grid_b, kp_set, kp_set, label, d))
    return pairs


# ---------------------------------------------------------------------------
# Writers: materialize fixtures as manifest + files
# ---------------------------------------------------------------------------


def _feature_blocks_from_grid(values: np.ndarray) -> list[FeatureBlock]:
    """Replicate one (H, W, C) grid across all four block slots."""
    v32 = np.ascontiguousarray(values, dtype=np.float32)
    return [FeatureBlock(block_id=b, values=v32.copy()) for b in range(4)]


def _item_entry(item_id: str, intr: Intrinsics, pose: Pose, **paths) -> dict:
    entry = {
        "id": item_id,
        "width": intr.width,
        "height": intr.height,
        "intrinsics": intr.to_dict(),
        "pose": pose.to_dict(),
    }
    entry.update({k: v for k, v in paths.items() if v is not None})
    return entry


def write_stereo_fixture(out_dir, pairs: list[StereoPair],
                         model_id: str = "fixture") -> Path:
    """Write stereo pairs as manifest + feature files + depth maps.

    Returns the manifest path.  Layout: ``manifest.json`` at the root,
    features under ``features/``, maps under ``maps/``.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    items, pair_entries = [], []
    for idx, pair in enumerate(pairs):
        for side, frame, grid in (("a", pair.frame_a, pair.grid_a),
                                  ("b", pair.frame_b, pair.grid_b)):
            item_id = f"pair{idx:03d}_{side}"
            feat_rel = f"features/{item_id}.p3df"
            depth_rel = f"maps/{item_id}_depth.p3dm"
            write_feature_file(
                out_dir / feat_rel,
                FeatureFileData(model_id=model_id,
                                blocks=_feature_blocks_from_grid(grid.values)))
            write_dense_map(out_dir / depth_rel,
                            DenseMap(MAP_KIND_DEPTH, frame.depth.astype(np.float64)))
            items.append(_item_entry(item_id, frame.intrinsics, frame.pose,
                                     features=feat_rel, depth_map=depth_rel))
        pair_entries.append({"a": f"pair{idx:03d}_a", "b": f"pair{idx:03d}_b",
                             "angle_deg": pair.angle_deg})
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path,
                   {"version": 1, "items": items, "pairs": pair_entries})
    return manifest_path


def write_probe_fixture(out_dir, samples: list[ProbeSample],
                        model_id: str = "fixture") -> Path:
    """Write probe samples as manifest + feature files + truth maps.

    Feature blocks 0-2 hold the three stages coarsest first; block 3
    duplicates the finest stage so files carry the full four-block layout.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    items = []
    for idx, s in enumerate(samples):
        item_id = f"img{idx:03d}"
        feat_rel = f"features/{item_id}.p3df"
        stage_values = [np.moveaxis(f, 0, 2) for f in s.features]  # (h, w, C)
        stage_values.append(stage_values[-1])
        blocks = [FeatureBlock(block_id=b, values=np.ascontiguousarray(v, dtype=np.float32))
                  for b, v in enumerate(stage_values)]
        write_feature_file(out_dir / feat_rel,
                           FeatureFileData(model_id=model_id, blocks=blocks))
        depth_rel = f"maps/{item_id}_depth.p3dm"
        normal_rel = f"maps/{item_id}_normal.p3dm"
        mask_rel = f"maps/{item_id}_valid.p3dm"
        write_dense_map(out_dir / depth_rel, DenseMap(MAP_KIND_DEPTH, s.depth))
        write_dense_map(out_dir / normal_rel, DenseMap(MAP_KIND_NORMAL3, s.normal))
        write_dense_map(out_dir / mask_rel, DenseMap(MAP_KIND_MASK, s.mask))
        split = "train" if idx % 8 else "val"
        items.append(_item_entry(item_id, s.intrinsics, Pose.identity(),
                                 features=feat_rel, depth_map=depth_rel,
                                 normal_map=normal_rel, valid_mask=mask_rel,
                                 split=split))
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path, {"version": 1, "items": items})
    return manifest_path


def write_semantic_fixture(out_dir, pairs: list[SemanticPair],
                           model_id: str = "fixture") -> Path:
    """Write semantic pairs as manifest + feature files with keypoints."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    items, kp_pairs, seen = [], [], {}
    for pair in pairs:
        ids = []
        for side, grid, kps in (("a", pair.grid_a, pair.keypoints_a),
                                ("b", pair.grid_b, pair.keypoints_b)):
            item_id = f"{pair.class_label}_{side}"
            ids.append(item_id)
            if item_id in seen:
                continue
            seen[item_id] = True
            feat_rel = f"features/{item_id}.p3df"
            write_feature_file(
                out_dir / feat_rel,
                FeatureFileData(model_id=model_id,
                                blocks=_feature_blocks_from_grid(grid.values)))
            w, h = grid.image_size
            intr = Intrinsics(fx=float(max(w, h)), fy=float(max(w, h)),
                              cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, width=w, height=h)
            entry = _item_entry(item_id, intr, Pose.identity(), features=feat_rel)
            entry["keypoints"] = {
                "points": [{"name": k.name, "u": k.u, "v": k.v, "visible": k.visible}
                           for k in kps.keypoints],
                "bbox": list(kps.bbox),
                "class": pair.class_label,
            }
            items.append(entry)
        kp_pairs.append({"a": ids[0], "b": ids[1], "variation": pair.variation,
                         "class": pair.class_label})
    manifest_path = out_dir / "manifest.json"
    write_manifest(manifest_path,
                   {"version": 1, "items": items, "keypoint_pairs": kp_pairs})
    return manifest_path
