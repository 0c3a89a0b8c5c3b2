"""Dataset conversion: exported source trees in, evaluation manifests out.

Each supported kind reads a documented plain-file layout (PNG images,
16-bit PNG depth in millimeters, JSON/TXT metadata), validates it strictly
— any missing file, missing key, or ill-formed value is reported as schema
drift naming the offending piece — and writes a self-contained output
tree::

    out/
      manifest.json      (version-1 manifest, deterministic JSON)
      images/<id>.<ext>  (byte-identical copies of the source images)
      maps/<id>_*.p3dm   (depth / normal / mask files)

Supported kinds and their source layouts:

* ``nyu`` — single-camera RGB-D collection::

      intrinsics.json               {"fx","fy","cx","cy","width","height"}
      train.txt / test.txt          item ids, one per line
      images/<id>.png               RGB
      depth/<id>.png                16-bit, millimeters, 0 = invalid
      normals/<id>.png (optional)   RGB-encoded unit normals (v/127.5 - 1)
      masks/<id>.png (optional)     0/255 object mask

  Items carry identity poses (the source has no cameras; single-view
  probing never reads them).

* ``navi`` — posed object collections, one directory per object::

      <object>/annotations.json     {"intrinsics": {...}, "images": [
                                      {"file","set","pose":{"rotation",
                                       "translation"}}, ...]}
      <object>/images|depth|masks/  as referenced by the annotations

  Objects lacking a ``multiview`` or a ``wild`` image set are excluded
  (reported in the summary).  Multiview images become the train split,
  wild images the test split.  For every wild image, one partner with a
  relative rotation in (0, 120] degrees is sampled deterministically from
  the seed; images with no partner under the cap contribute no pair.

* ``scannet_pairs`` — a flat frame store plus an explicit pair list::

      intrinsics.txt                3x3 matrix, rows "fx 0 cx" etc.
      color/<frame>.png             RGB
      depth/<frame>.png             16-bit millimeters
      pose/<frame>.txt              4x4 camera-to-world matrix
      pairs.txt                     "<frame_a> <frame_b>" per line

  Every listed pair is emitted with its precomputed relative angle.

* ``spair`` — semantic keypoint pairs::

      images/<class>/<imname>
      ImageAnnotation/<class>/<stem>.json   {"kps": {name: [x, y] | null},
                                             "bndbox", "image_width",
                                             "image_height"}
      PairAnnotation/**/*.json              {"src_imname", "trg_imname",
                                             "category",
                                             "viewpoint_variation" in 0..2}

  Up to ``pairs_per_class`` pairs are sampled per class, deterministically
  from the seed.  Items get identity poses and nominal pinhole intrinsics
  (semantic transfer never consults them).  Invisible keypoints (null) are
  carried with ``visible: false``.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import formats
from .errors import ConfigError, SchemaError

__all__ = ["ConversionSummary", "convert_dataset", "DATASET_KINDS"]

MAX_PAIR_ANGLE_DEG = 120.0
DEFAULT_PAIRS_PER_CLASS = 200
_ROTATION_TOL = 1e-5


@dataclass(frozen=True)
class ConversionSummary:
    """What one conversion produced."""

    kind: str
    manifest: Path
    items: int
    pairs: int
    keypoint_pairs: int
    excluded: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# Shared validation and file helpers
# ---------------------------------------------------------------------------


def _need(mapping, key: str, where: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise SchemaError(f"{where}: missing key {key!r}")
    return mapping[key]


def _read_json(path: Path, where: str) -> dict:
    if not path.is_file():
        raise SchemaError(f"{where}: file not found: {path}")
    try:
        doc = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{where}: invalid JSON in {path}: {e}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: {path} must hold a JSON object")
    return doc


def _intrinsics_dict(raw, where: str) -> dict:
    out = {}
    for key in ("fx", "fy", "cx", "cy"):
        out[key] = float(_need(raw, key, where))
    for key in ("width", "height"):
        out[key] = int(_need(raw, key, where))
    if out["fx"] <= 0 or out["fy"] <= 0 or out["width"] < 1 or out["height"] < 1:
        raise SchemaError(f"{where}: non-positive intrinsics")
    return out


def _rotation(rows, where: str) -> np.ndarray:
    r = np.asarray(rows, dtype=np.float64)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise SchemaError(f"{where}: rotation must be a finite 3x3 matrix")
    if (np.abs(r.T @ r - np.eye(3)).max() > _ROTATION_TOL
            or abs(np.linalg.det(r) - 1.0) > 1e-4):
        raise SchemaError(f"{where}: not a rotation matrix (orthonormal, "
                          f"det +1)")
    return r


def _pose_dict(raw, where: str) -> tuple[dict, np.ndarray]:
    rotation = _rotation(_need(raw, "rotation", where), where)
    translation = np.asarray(_need(raw, "translation", where), dtype=np.float64)
    if translation.shape != (3,) or not np.all(np.isfinite(translation)):
        raise SchemaError(f"{where}: translation must be 3 finite numbers")
    return (
        {"rotation": rotation.tolist(), "translation": translation.tolist()},
        rotation,
    )


def _identity_pose() -> dict:
    return {"rotation": np.eye(3).tolist(), "translation": [0.0, 0.0, 0.0]}


def _relative_angle_deg(rot_a: np.ndarray, rot_b: np.ndarray) -> float:
    cos = (np.trace(rot_a.T @ rot_b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def _image_size(path: Path, where: str) -> tuple[int, int]:
    if not path.is_file():
        raise SchemaError(f"{where}: image not found: {path}")
    try:
        with Image.open(path) as img:
            return img.size  # (width, height)
    except OSError as e:
        raise SchemaError(f"{where}: cannot read image {path}: {e}") from None


def _copy_file(src: Path, dst: Path) -> None:
    dst.parent.mkdir(parents=True, exist_ok=True)
    formats.atomic_write_bytes(dst, src.read_bytes())


def _read_depth_png(path: Path, where: str) -> np.ndarray:
    """16-bit depth PNG in millimeters to float32 meters; 0 stays invalid."""
    if not path.is_file():
        raise SchemaError(f"{where}: depth file not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise SchemaError(f"{where}: depth image {path} must be "
                          f"single-channel, got shape {arr.shape}")
    return (arr.astype(np.float32)) / 1000.0


def _read_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127


def _decode_normals_png(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """RGB-encoded normals (v/127.5 - 1) to unit (3, H, W) + validity."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    vec = arr / 127.5 - 1.0
    norm = np.linalg.norm(vec, axis=2)
    valid = norm > 0.5
    unit = np.zeros_like(vec)
    unit[valid] = vec[valid] / norm[valid][:, np.newaxis]
    return np.moveaxis(unit, 2, 0).astype(np.float32), valid


class _OutputTree:
    """Collects items/pairs and writes the self-contained output layout."""

    def __init__(self, out: Path):
        self.out = Path(out)
        self.maps = self.out / "maps"
        self.images = self.out / "images"
        self.items: dict[str, dict] = {}
        self.pairs: list[dict] = []
        self.keypoint_pairs: list[dict] = []
        self.out.mkdir(parents=True, exist_ok=True)

    def add_item(self, item: dict) -> None:
        item_id = item["id"]
        if item_id in self.items:
            raise SchemaError(f"duplicate item id {item_id!r}")
        self.items[item_id] = {k: v for k, v in item.items() if v is not None}

    def copy_image(self, item_id: str, src: Path) -> str:
        rel = f"images/{item_id}{src.suffix}"
        _copy_file(src, self.out / rel)
        return rel

    def write_depth(self, item_id: str, depth: np.ndarray) -> str:
        rel = f"maps/{item_id}_depth.p3dm"
        self.maps.mkdir(exist_ok=True)
        formats.write_depth_map(self.out / rel, depth)
        return rel

    def write_normals(self, item_id: str, normals: np.ndarray) -> str:
        rel = f"maps/{item_id}_normal.p3dm"
        self.maps.mkdir(exist_ok=True)
        formats.write_normal_map(self.out / rel, normals)
        return rel

    def write_mask(self, item_id: str, mask: np.ndarray, label: str) -> str:
        rel = f"maps/{item_id}_{label}.p3dm"
        self.maps.mkdir(exist_ok=True)
        formats.write_mask_map(self.out / rel, mask)
        return rel

    def finish(self, kind: str, excluded=()) -> ConversionSummary:
        document = {
            "version": formats.MANIFEST_VERSION,
            "items": [self.items[k] for k in sorted(self.items)],
            "pairs": self.pairs,
            "keypoint_pairs": self.keypoint_pairs,
        }
        manifest = self.out / "manifest.json"
        formats.write_manifest_document(manifest, document)
        return ConversionSummary(
            kind=kind,
            manifest=manifest,
            items=len(self.items),
            pairs=len(self.pairs),
            keypoint_pairs=len(self.keypoint_pairs),
            excluded=tuple(excluded),
        )


# ---------------------------------------------------------------------------
# nyu
# ---------------------------------------------------------------------------


def _read_split_file(path: Path) -> list[str]:
    if not path.is_file():
        return []
    return [line.strip() for line in path.read_text().splitlines()
            if line.strip()]


def _convert_nyu(src: Path, out: Path, seed: int, pairs_per_class: int
                 ) -> ConversionSummary:
    where = "nyu: intrinsics.json"
    intrinsics = _intrinsics_dict(
        _read_json(src / "intrinsics.json", where), where)
    width, height = intrinsics["width"], intrinsics["height"]

    splits = [("train", _read_split_file(src / "train.txt")),
              ("test", _read_split_file(src / "test.txt"))]
    if not any(ids for _, ids in splits):
        raise SchemaError("nyu: no items listed in train.txt or test.txt")

    tree = _OutputTree(out)
    for split, ids in splits:
        for item_id in ids:
            where = f"nyu: item {item_id!r}"
            image_src = src / "images" / f"{item_id}.png"
            if _image_size(image_src, where) != (width, height):
                raise SchemaError(
                    f"{where}: image size {_image_size(image_src, where)} "
                    f"does not match intrinsics ({width}, {height})")
            depth = _read_depth_png(src / "depth" / f"{item_id}.png", where)
            if depth.shape != (height, width):
                raise SchemaError(f"{where}: depth size {depth.shape} does "
                                  f"not match intrinsics")
            valid = depth > 0

            normal_rel = None
            normals_src = src / "normals" / f"{item_id}.png"
            if normals_src.is_file():
                normals, normal_valid = _decode_normals_png(normals_src)
                if normals.shape[1:] != (height, width):
                    raise SchemaError(f"{where}: normal size does not match")
                normal_rel = tree.write_normals(item_id, normals)
                valid = valid & normal_valid

            object_rel = None
            mask_src = src / "masks" / f"{item_id}.png"
            if mask_src.is_file():
                object_rel = tree.write_mask(
                    item_id, _read_mask_png(mask_src), "object")

            tree.add_item({
                "id": item_id,
                "width": width,
                "height": height,
                "intrinsics": intrinsics,
                "pose": _identity_pose(),
                "image": tree.copy_image(item_id, image_src),
                "depth_map": tree.write_depth(item_id, depth),
                "normal_map": normal_rel,
                "valid_mask": tree.write_mask(item_id, valid, "valid"),
                "object_mask": object_rel,
                "split": split,
            })
    return tree.finish("nyu")


# ---------------------------------------------------------------------------
# navi
# ---------------------------------------------------------------------------


def _convert_navi(src: Path, out: Path, seed: int, pairs_per_class: int
                  ) -> ConversionSummary:
    object_dirs = sorted(p for p in src.iterdir() if p.is_dir()) \
        if src.is_dir() else []
    if not object_dirs:
        raise SchemaError(f"navi: no object directories under {src}")

    tree = _OutputTree(out)
    excluded: list[str] = []
    for obj_dir in object_dirs:
        obj = obj_dir.name
        where = f"navi: {obj}/annotations.json"
        ann = _read_json(obj_dir / "annotations.json", where)
        intrinsics = _intrinsics_dict(_need(ann, "intrinsics", where), where)
        width, height = intrinsics["width"], intrinsics["height"]
        entries = _need(ann, "images", where)
        if not isinstance(entries, list) or not entries:
            raise SchemaError(f"{where}: 'images' must be a nonempty list")

        parsed = []
        sets_present = set()
        for entry in entries:
            file_rel = str(_need(entry, "file", where))
            stem = Path(file_rel).stem
            image_where = f"{where} image {stem!r}"
            which = str(_need(entry, "set", image_where))
            if which not in ("multiview", "wild"):
                raise SchemaError(f"{image_where}: unknown set {which!r}")
            pose_doc, rotation = _pose_dict(
                _need(entry, "pose", image_where), image_where)
            sets_present.add(which)
            parsed.append((stem, file_rel, which, pose_doc, rotation))

        if sets_present != {"multiview", "wild"}:
            excluded.append(obj)
            continue

        wild: list[tuple[str, np.ndarray]] = []
        for stem, file_rel, which, pose_doc, rotation in sorted(parsed):
            item_id = f"{obj}_{stem}"
            where_item = f"navi: item {item_id!r}"
            image_src = obj_dir / file_rel
            if _image_size(image_src, where_item) != (width, height):
                raise SchemaError(f"{where_item}: image size does not match "
                                  f"intrinsics ({width}, {height})")
            depth = _read_depth_png(obj_dir / "depth" / f"{stem}.png",
                                    where_item)
            if depth.shape != (height, width):
                raise SchemaError(f"{where_item}: depth size does not match")

            object_rel = None
            mask_src = obj_dir / "masks" / f"{stem}.png"
            if mask_src.is_file():
                object_rel = tree.write_mask(
                    item_id, _read_mask_png(mask_src), "object")

            tree.add_item({
                "id": item_id,
                "width": width,
                "height": height,
                "intrinsics": intrinsics,
                "pose": pose_doc,
                "image": tree.copy_image(item_id, image_src),
                "depth_map": tree.write_depth(item_id, depth),
                "valid_mask": tree.write_mask(item_id, depth > 0, "valid"),
                "object_mask": object_rel,
                "split": "train" if which == "multiview" else "test",
            })
            if which == "wild":
                wild.append((item_id, rotation))

        wild.sort(key=lambda pair: pair[0])
        for item_id, rotation in wild:
            candidates = []
            for other_id, other_rot in wild:
                if other_id == item_id:
                    continue
                angle = _relative_angle_deg(rotation, other_rot)
                if 0.0 < angle <= MAX_PAIR_ANGLE_DEG:
                    candidates.append((other_id, angle))
            if not candidates:
                continue
            rng = random.Random(f"{seed}:{obj}:{item_id}")
            partner, angle = rng.choice(candidates)
            tree.pairs.append(
                {"a": item_id, "b": partner, "angle_deg": angle})
    return tree.finish("navi", excluded=excluded)


# ---------------------------------------------------------------------------
# scannet_pairs
# ---------------------------------------------------------------------------


def _read_scannet_intrinsics(path: Path) -> np.ndarray:
    where = "scannet_pairs: intrinsics.txt"
    if not path.is_file():
        raise SchemaError(f"{where}: file not found: {path}")
    try:
        rows = [[float(v) for v in line.split()]
                for line in path.read_text().splitlines() if line.strip()]
        matrix = np.asarray(rows, dtype=np.float64)
    except ValueError:
        raise SchemaError(f"{where}: non-numeric entries") from None
    if matrix.shape != (3, 3):
        raise SchemaError(f"{where}: expected a 3x3 matrix, got "
                          f"{matrix.shape}")
    if (matrix[2] != (0.0, 0.0, 1.0)).any() or matrix[0, 1] != 0.0 \
            or matrix[1, 0] != 0.0:
        raise SchemaError(f"{where}: not a pinhole matrix "
                          f"(fx 0 cx / 0 fy cy / 0 0 1)")
    return matrix


def _read_scannet_pose(path: Path, frame: str) -> tuple[dict, np.ndarray]:
    where = f"scannet_pairs: pose for frame {frame!r}"
    if not path.is_file():
        raise SchemaError(f"{where}: file not found: {path}")
    try:
        values = [float(v) for v in path.read_text().split()]
    except ValueError:
        raise SchemaError(f"{where}: non-numeric entries") from None
    if len(values) != 16:
        raise SchemaError(f"{where}: expected 16 numbers (4x4 matrix), "
                          f"got {len(values)}")
    matrix = np.asarray(values, dtype=np.float64).reshape(4, 4)
    if np.abs(matrix[3] - (0.0, 0.0, 0.0, 1.0)).max() > 1e-6:
        raise SchemaError(f"{where}: bottom row must be 0 0 0 1")
    rotation = _rotation(matrix[:3, :3], where)
    return (
        {"rotation": rotation.tolist(),
         "translation": matrix[:3, 3].tolist()},
        rotation,
    )


def _convert_scannet(src: Path, out: Path, seed: int, pairs_per_class: int
                     ) -> ConversionSummary:
    matrix = _read_scannet_intrinsics(src / "intrinsics.txt")
    pairs_file = src / "pairs.txt"
    if not pairs_file.is_file():
        raise SchemaError(f"scannet_pairs: pair list not found: {pairs_file}")

    listed: list[tuple[str, str]] = []
    for lineno, line in enumerate(pairs_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 2:
            raise SchemaError(
                f"scannet_pairs: pairs.txt line {lineno}: expected two frame "
                f"ids, got {len(tokens)} tokens")
        listed.append((tokens[0], tokens[1]))
    if not listed:
        raise SchemaError("scannet_pairs: pairs.txt lists no pairs")

    tree = _OutputTree(out)
    rotations: dict[str, np.ndarray] = {}
    for frame in sorted({f for pair in listed for f in pair}):
        where = f"scannet_pairs: frame {frame!r}"
        image_src = src / "color" / f"{frame}.png"
        width, height = _image_size(image_src, where)
        depth = _read_depth_png(src / "depth" / f"{frame}.png", where)
        if depth.shape != (height, width):
            raise SchemaError(f"{where}: depth size {depth.shape} does not "
                              f"match color image ({height}, {width})")
        pose_doc, rotation = _read_scannet_pose(
            src / "pose" / f"{frame}.txt", frame)
        rotations[frame] = rotation
        tree.add_item({
            "id": frame,
            "width": width,
            "height": height,
            "intrinsics": {"fx": matrix[0, 0], "fy": matrix[1, 1],
                           "cx": matrix[0, 2], "cy": matrix[1, 2],
                           "width": width, "height": height},
            "pose": pose_doc,
            "image": tree.copy_image(frame, image_src),
            "depth_map": tree.write_depth(frame, depth),
            "valid_mask": tree.write_mask(frame, depth > 0, "valid"),
            "split": "test",
        })

    for frame_a, frame_b in listed:
        angle = _relative_angle_deg(rotations[frame_a], rotations[frame_b])
        tree.pairs.append({"a": frame_a, "b": frame_b, "angle_deg": angle})
    return tree.finish("scannet_pairs")


# ---------------------------------------------------------------------------
# spair
# ---------------------------------------------------------------------------


def _convert_spair(src: Path, out: Path, seed: int, pairs_per_class: int
                   ) -> ConversionSummary:
    pair_root = src / "PairAnnotation"
    if not pair_root.is_dir():
        raise SchemaError(
            f"spair: pair annotations not found under {pair_root}")
    pair_files = sorted(pair_root.rglob("*.json"))
    if not pair_files:
        raise SchemaError(f"spair: no pair annotations under {pair_root}")

    by_class: dict[str, list[tuple[str, str, int, Path]]] = {}
    for pair_file in pair_files:
        where = f"spair: {pair_file.name}"
        doc = _read_json(pair_file, where)
        src_name = str(_need(doc, "src_imname", where))
        trg_name = str(_need(doc, "trg_imname", where))
        category = str(_need(doc, "category", where))
        variation = _need(doc, "viewpoint_variation", where)
        if not isinstance(variation, int) or variation not in (0, 1, 2):
            raise SchemaError(
                f"{where}: viewpoint_variation must be 0, 1, or 2, "
                f"got {variation!r}")
        by_class.setdefault(category, []).append(
            (src_name, trg_name, variation, pair_file))

    tree = _OutputTree(out)

    def ensure_item(category: str, imname: str) -> str:
        stem = Path(imname).stem
        item_id = f"{category}_{stem}"
        if item_id in tree.items:
            return item_id
        where = f"spair: {category}/{stem}"
        ann = _read_json(
            src / "ImageAnnotation" / category / f"{stem}.json", where)
        width = int(_need(ann, "image_width", where))
        height = int(_need(ann, "image_height", where))
        image_src = src / "images" / category / imname
        if _image_size(image_src, where) != (width, height):
            raise SchemaError(f"{where}: image size does not match the "
                              f"annotated ({width}, {height})")
        bbox = _need(ann, "bndbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise SchemaError(f"{where}: bndbox must have 4 entries")
        kps = _need(ann, "kps", where)
        if not isinstance(kps, dict) or not kps:
            raise SchemaError(f"{where}: kps must be a nonempty mapping")
        points = []
        for name in sorted(kps, key=lambda n: (len(n), n)):
            coords = kps[name]
            if coords is None:
                points.append({"name": name, "u": 0.0, "v": 0.0,
                               "visible": False})
                continue
            if not isinstance(coords, list) or len(coords) != 2:
                raise SchemaError(f"{where}: keypoint {name!r} must be "
                                  f"[x, y] or null")
            points.append({"name": name, "u": float(coords[0]),
                           "v": float(coords[1]), "visible": True})
        tree.add_item({
            "id": item_id,
            "width": width,
            "height": height,
            "intrinsics": {"fx": float(max(width, height)),
                           "fy": float(max(width, height)),
                           "cx": width / 2.0, "cy": height / 2.0,
                           "width": width, "height": height},
            "pose": _identity_pose(),
            "image": tree.copy_image(item_id, image_src),
            "keypoints": {"points": points, "bbox": [float(v) for v in bbox],
                          "class": category},
            "split": "test",
        })
        return item_id

    for category in sorted(by_class):
        candidates = by_class[category]
        count = min(pairs_per_class, len(candidates))
        rng = random.Random(f"{seed}:{category}")
        chosen = rng.sample(candidates, count) if count < len(candidates) \
            else list(candidates)
        chosen.sort(key=lambda entry: entry[3].name)
        for src_name, trg_name, variation, _ in chosen:
            a = ensure_item(category, src_name)
            b = ensure_item(category, trg_name)
            tree.keypoint_pairs.append(
                {"a": a, "b": b, "class": category, "variation": variation})
    return tree.finish("spair")


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


_CONVERTERS = {
    "nyu": _convert_nyu,
    "navi": _convert_navi,
    "scannet_pairs": _convert_scannet,
    "spair": _convert_spair,
}

DATASET_KINDS = tuple(sorted(_CONVERTERS))


def convert_dataset(kind: str, src, out, seed: int = 0,
                    pairs_per_class: int = DEFAULT_PAIRS_PER_CLASS
                    ) -> ConversionSummary:
    """Convert one exported dataset tree into an evaluation manifest.

    Returns a :class:`ConversionSummary`; raises :class:`SchemaError` when
    the source tree does not match the documented layout for ``kind``.
    """
    converter = _CONVERTERS.get(kind)
    if converter is None:
        raise ConfigError(
            f"unknown dataset kind {kind!r}; supported: "
            f"{', '.join(DATASET_KINDS)}")
    if pairs_per_class < 1:
        raise ConfigError(
            f"pairs_per_class must be positive, got {pairs_per_class}")
    return converter(Path(src), Path(out), int(seed), int(pairs_per_class))
