"""Bit-exact file formats, manifests, and report serialization.

Binary layouts (all integers and floats little-endian):

* Feature file (magic ``P3DF``)::

    "P3DF" | u16 version | u16 model_id_len | model_id utf-8 |
    u8 block_count | per block: u8 block_id | u32 H | u32 W | u32 C |
    H*W*C float32 row-major

* Dense map file (magic ``P3DM``)::

    "P3DM" | u8 kind (0 depth, 1 normal3, 2 mask) | u32 H | u32 W |
    payload float32 row-major (H*W values; normal3 stores H*W*3 as
    (H, W, 3) row-major)

  Depth maps are nonnegative with 0 meaning "invalid"; masks hold exactly
  0.0 or 1.0.

* Probe checkpoint (magic ``P3DC``)::

    "P3DC" | u16 version | u32 config_len | config JSON utf-8 |
    u16 param_count | per param: u16 name_len | name utf-8 | u8 ndim |
    u32 dims... | float32 payload

Readers validate magic and version first, then bound every declared size
against the actual file length before touching payload bytes, so a corrupt
header can never trigger a huge allocation.  All round trips are bitwise.

The manifest is a JSON document listing dataset items (images with depth
maps, masks, camera intrinsics and poses, keypoints) plus pair lists with
precomputed relative viewpoint angles.  Loading validates the full object
graph, checks referenced files exist, deduplicates pair entries (keeping a
warning count), and sorts items by id so iteration order is deterministic.

Reports are written as CSV with a fixed header (floats via ``repr`` so they
round-trip exactly) and as JSON."""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .analysis import CorrelationResult, MetricReport, MetricRow, RatingResult
from .errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    ShapeError,
)
from .geometry import Intrinsics, Pose
from .matching import Keypoint, KeypointSet
from .probes import DenseProbe, ProbeConfig, init_probe
from .tensorcore import Tensor

__all__ = [
    "FEATURE_MAGIC",
    "DENSEMAP_MAGIC",
    "CHECKPOINT_MAGIC",
    "FEATURE_VERSION",
    "CHECKPOINT_VERSION",
    "MAP_KIND_DEPTH",
    "MAP_KIND_NORMAL3",
    "MAP_KIND_MASK",
    "FeatureBlock",
    "FeatureFileData",
    "DenseMap",
    "ManifestItem",
    "PairEntry",
    "KeypointPairEntry",
    "Manifest",
    "write_feature_file",
    "read_feature_file",
    "write_dense_map",
    "read_dense_map",
    "checkpoint_probe",
    "restore_probe",
    "write_manifest",
    "load_manifest",
    "REPORT_CSV_HEADER",
    "write_report_csv",
    "read_report_csv",
    "write_report_json",
    "write_correlation_csv",
    "write_rating_csv",
]

FEATURE_MAGIC = b"P3DF"
DENSEMAP_MAGIC = b"P3DM"
CHECKPOINT_MAGIC = b"P3DC"
FEATURE_VERSION = 1
CHECKPOINT_VERSION = 1

MAP_KIND_DEPTH = 0
MAP_KIND_NORMAL3 = 1
MAP_KIND_MASK = 2
_MAP_KIND_NAMES = {MAP_KIND_DEPTH: "depth", MAP_KIND_NORMAL3: "normal3",
                   MAP_KIND_MASK: "mask"}


# ---------------------------------------------------------------------------
# Low-level cursor with bounds checking
# ---------------------------------------------------------------------------


class _Reader:
    """Sequential binary reader that refuses to read past the buffer."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if n < 0:
            raise CorruptionError(
                f"{self.path}: negative size for {what}", offset=self.pos
            )
        if self.pos + n > len(self.data):
            raise CorruptionError(
                f"{self.path}: truncated file reading {what}: need {n} bytes, "
                f"have {len(self.data) - self.pos}",
                offset=self.pos,
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise CorruptionError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes after payload",
                offset=self.pos,
            )


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


def _check_magic(reader: _Reader, magic: bytes, kind: str) -> None:
    got = reader.take(len(magic), "magic")
    if got != magic:
        raise FormatError(
            f"{reader.path}: not a {kind} file (magic {got!r}, expected {magic!r})"
        )


def _utf8(reader: _Reader, length: int, what: str) -> str:
    raw = reader.take(length, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptionError(
            f"{reader.path}: invalid UTF-8 in {what}", offset=reader.pos - length
        ) from None


def _f32_payload(reader: _Reader, count: int, what: str) -> np.ndarray:
    raw = reader.take(4 * count, what)
    return np.frombuffer(raw, dtype="<f4").copy()


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureBlock:
    """One block's feature grid as stored on disk: (H, W, C) float32."""

    block_id: int
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(
                f"feature block must be nonempty (H, W, C), got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError(f"feature block {self.block_id} contains non-finite values")
        if not (0 <= self.block_id <= 255):
            raise ConfigError(f"block_id must fit in a byte, got {self.block_id}")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class FeatureFileData:
    """The content of one feature file: a model id and its blocks."""

    model_id: str
    blocks: tuple[FeatureBlock, ...]

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ConfigError("feature file needs at least one block")
        if len(blocks) > 255:
            raise ConfigError(f"too many blocks for one file: {len(blocks)}")
        ids = [b.block_id for b in blocks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate block ids in feature file: {ids}")
        if len(self.model_id.encode("utf-8")) > 0xFFFF:
            raise ConfigError("model_id too long to serialize")
        object.__setattr__(self, "blocks", blocks)

    def block(self, block_id: int) -> FeatureBlock:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        raise DataError(
            f"feature file for {self.model_id!r} has no block {block_id} "
            f"(has {[b.block_id for b in self.blocks]})"
        )


def write_feature_file(path, data: FeatureFileData) -> None:
    out = io.BytesIO()
    out.write(FEATURE_MAGIC)
    out.write(struct.pack("<H", FEATURE_VERSION))
    encoded = data.model_id.encode("utf-8")
    out.write(struct.pack("<H", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<B", len(data.blocks)))
    for block in data.blocks:
        h, w, c = block.values.shape
        out.write(struct.pack("<BIII", block.block_id, h, w, c))
        out.write(block.values.astype("<f4", copy=False).tobytes(order="C"))
    Path(path).write_bytes(out.getvalue())


def read_feature_file(path) -> FeatureFileData:
    reader = _Reader(_read_bytes(path), str(path))
    _check_magic(reader, FEATURE_MAGIC, "feature")
    (version,) = reader.unpack("<H", "version")
    if version != FEATURE_VERSION:
        raise FormatError(
            f"{path}: unsupported feature file version {version} "
            f"(supported: {FEATURE_VERSION})"
        )
    (name_len,) = reader.unpack("<H", "model_id length")
    model_id = _utf8(reader, name_len, "model_id")
    (block_count,) = reader.unpack("<B", "block count")
    if block_count < 1:
        raise FormatError(f"{path}: feature file declares zero blocks")
    blocks = []
    for k in range(block_count):
        block_id, h, w, c = reader.unpack("<BIII", f"block {k} header")
        if min(h, w, c) < 1:
            raise CorruptionError(
                f"{path}: block {block_id} declares empty shape ({h}, {w}, {c})",
                offset=reader.pos,
            )
        payload = _f32_payload(reader, h * w * c, f"block {block_id} payload")
        blocks.append(FeatureBlock(block_id=block_id, values=payload.reshape(h, w, c)))
    reader.expect_end()
    return FeatureFileData(model_id=model_id, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Dense map files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseMap:
    """A dense per-pixel map: depth (H, W), normals (3, H, W), or a boolean
    mask (H, W)."""

    kind: int
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in _MAP_KIND_NAMES:
            raise ConfigError(f"unknown dense map kind {self.kind}")
        values = np.asarray(self.values)
        if self.kind == MAP_KIND_NORMAL3:
            values = np.ascontiguousarray(values, dtype=np.float32)
            if values.ndim != 3 or values.shape[0] != 3:
                raise ShapeError(f"normal map must be (3, H, W), got {values.shape}")
            if not np.all(np.isfinite(values)):
                raise DataError("normal map contains non-finite values")
        elif self.kind == MAP_KIND_MASK:
            values = np.ascontiguousarray(values.astype(bool))
            if values.ndim != 2:
                raise ShapeError(f"mask must be (H, W), got {values.shape}")
        else:
            values = np.ascontiguousarray(values, dtype=np.float32)
            if values.ndim != 2:
                raise ShapeError(f"depth map must be (H, W), got {values.shape}")
            if not np.all(np.isfinite(values)):
                raise DataError("depth map contains non-finite values")
            if np.any(values < 0):
                raise DataError("depth map contains negative values (0 means invalid)")
        if min(values.shape) < 1:
            raise ShapeError(f"dense map has empty dimension: {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def kind_name(self) -> str:
        return _MAP_KIND_NAMES[self.kind]


def write_dense_map(path, dense_map: DenseMap) -> None:
    values = dense_map.values
    if dense_map.kind == MAP_KIND_NORMAL3:
        h, w = values.shape[1], values.shape[2]
        payload = np.moveaxis(values, 0, 2)  # stored (H, W, 3) row-major
    elif dense_map.kind == MAP_KIND_MASK:
        h, w = values.shape
        payload = values.astype(np.float32)
    else:
        h, w = values.shape
        payload = values
    out = io.BytesIO()
    out.write(DENSEMAP_MAGIC)
    out.write(struct.pack("<BII", dense_map.kind, h, w))
    out.write(np.ascontiguousarray(payload, dtype="<f4").tobytes(order="C"))
    Path(path).write_bytes(out.getvalue())


def read_dense_map(path) -> DenseMap:
    reader = _Reader(_read_bytes(path), str(path))
    _check_magic(reader, DENSEMAP_MAGIC, "dense map")
    kind, h, w = reader.unpack("<BII", "map header")
    if kind not in _MAP_KIND_NAMES:
        raise FormatError(f"{path}: unknown dense map kind {kind}")
    if min(h, w) < 1:
        raise CorruptionError(f"{path}: map declares empty shape ({h}, {w})",
                              offset=reader.pos)
    channels = 3 if kind == MAP_KIND_NORMAL3 else 1
    payload = _f32_payload(reader, h * w * channels, "map payload")
    reader.expect_end()
    if kind == MAP_KIND_NORMAL3:
        values = np.moveaxis(payload.reshape(h, w, 3), 2, 0)
    elif kind == MAP_KIND_MASK:
        raw = payload.reshape(h, w)
        if not np.all((raw == 0.0) | (raw == 1.0)):
            raise FormatError(f"{path}: mask payload contains values other than 0/1")
        values = raw == 1.0
    else:
        values = payload.reshape(h, w)
    return DenseMap(kind=kind, values=values)


# ---------------------------------------------------------------------------
# Probe checkpoints
# ---------------------------------------------------------------------------


def checkpoint_probe(path, probe: DenseProbe) -> None:
    """Serialize a probe's configuration and float32 parameters."""
    config_json = json.dumps(probe.config.to_dict(), sort_keys=True).encode("utf-8")
    names = sorted(probe.params)
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<H", CHECKPOINT_VERSION))
    out.write(struct.pack("<I", len(config_json)))
    out.write(config_json)
    out.write(struct.pack("<H", len(names)))
    for name in names:
        values = probe.params[name].values
        if values.dtype != np.float32:
            raise ConfigError(
                f"checkpointing requires float32 parameters, {name} is {values.dtype}"
            )
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", values.ndim))
        for dim in values.shape:
            out.write(struct.pack("<I", dim))
        out.write(np.ascontiguousarray(values, dtype="<f4").tobytes(order="C"))
    Path(path).write_bytes(out.getvalue())


def read_checkpoint_config(path) -> ProbeConfig:
    """Read only the probe configuration embedded in a checkpoint."""
    reader = _Reader(_read_bytes(path), str(path))
    _check_magic(reader, CHECKPOINT_MAGIC, "checkpoint")
    (version,) = reader.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version} "
            f"(supported: {CHECKPOINT_VERSION})"
        )
    (config_len,) = reader.unpack("<I", "config length")
    try:
        stored = json.loads(_utf8(reader, config_len, "config"))
    except json.JSONDecodeError as e:
        raise CorruptionError(f"{path}: invalid config JSON: {e}",
                              offset=reader.pos) from None
    return ProbeConfig.from_dict(stored)


def restore_probe(path, config: ProbeConfig) -> DenseProbe:
    """Rebuild a probe from a checkpoint; the stored configuration must
    equal ``config`` exactly."""
    reader = _Reader(_read_bytes(path), str(path))
    _check_magic(reader, CHECKPOINT_MAGIC, "checkpoint")
    (version,) = reader.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: unsupported checkpoint version {version} "
            f"(supported: {CHECKPOINT_VERSION})"
        )
    (config_len,) = reader.unpack("<I", "config length")
    try:
        stored = json.loads(_utf8(reader, config_len, "config"))
    except json.JSONDecodeError as e:
        raise CorruptionError(f"{path}: invalid config JSON: {e}",
                              offset=reader.pos) from None
    stored_config = ProbeConfig.from_dict(stored)
    if stored_config != config:
        raise ConfigError(
            f"checkpoint config mismatch: stored {stored_config.to_dict()}, "
            f"requested {config.to_dict()}"
        )
    (param_count,) = reader.unpack("<H", "parameter count")
    params: dict[str, Tensor] = {}
    for _ in range(param_count):
        (name_len,) = reader.unpack("<H", "parameter name length")
        name = _utf8(reader, name_len, "parameter name")
        (ndim,) = reader.unpack("<B", f"{name} ndim")
        dims = tuple(reader.unpack("<" + "I" * ndim, f"{name} dims")) if ndim else ()
        count = 1
        for d in dims:
            if d < 1:
                raise CorruptionError(f"{path}: parameter {name} has zero dim",
                                      offset=reader.pos)
            count *= d
        payload = _f32_payload(reader, count, f"{name} payload")
        if name in params:
            raise CorruptionError(f"{path}: duplicate parameter {name}",
                                  offset=reader.pos)
        params[name] = Tensor(payload.reshape(dims), requires_grad=True, name=name)
    reader.expect_end()

    # the freshly initialized probe defines the expected parameter inventory
    template = init_probe(config, seed=0)
    expected = {name: p.values.shape for name, p in template.params.items()}
    got = {name: p.values.shape for name, p in params.items()}
    if expected != got:
        raise CorruptionError(
            f"{path}: checkpoint parameters {sorted(got)} with shapes {got} do not "
            f"match the configuration's inventory {expected}"
        )
    return DenseProbe(config=config, params=params)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ManifestItem:
    """One dataset item: image geometry plus paths to its serialized maps."""

    item_id: str
    width: int
    height: int
    intrinsics: Intrinsics
    pose: Pose
    features: str | None = None
    depth_map: str | None = None
    normal_map: str | None = None
    valid_mask: str | None = None
    object_mask: str | None = None
    keypoints: KeypointSet | None = None
    split: str | None = None


@dataclass(frozen=True)
class PairEntry:
    """A geometric evaluation pair with its precomputed viewpoint angle."""

    a: str
    b: str
    angle_deg: float


@dataclass(frozen=True)
class KeypointPairEntry:
    """A semantic evaluation pair with its viewpoint-variation level."""

    a: str
    b: str
    class_label: str
    variation: int


@dataclass(frozen=True)
class Manifest:
    items: dict[str, ManifestItem]
    pairs: tuple[PairEntry, ...]
    keypoint_pairs: tuple[KeypointPairEntry, ...]
    duplicate_pairs_dropped: int = 0

    def ordered_items(self) -> list[ManifestItem]:
        return [self.items[k] for k in sorted(self.items)]

    def item(self, item_id: str) -> ManifestItem:
        if item_id not in self.items:
            raise DataError(f"manifest has no item {item_id!r}")
        return self.items[item_id]


def _require(mapping: Mapping, key: str, where: str):
    if key not in mapping:
        raise DataError(f"manifest {where}: missing field {key!r}")
    return mapping[key]


def _keypoints_from_dict(d: Mapping, where: str) -> KeypointSet:
    kps = []
    for k in _require(d, "points", where):
        kps.append(
            Keypoint(
                name=str(_require(k, "name", where)),
                u=float(_require(k, "u", where)),
                v=float(_require(k, "v", where)),
                visible=bool(k.get("visible", True)),
            )
        )
    bbox = tuple(float(x) for x in _require(d, "bbox", where))
    if len(bbox) != 4:
        raise DataError(f"manifest {where}: bbox must have 4 entries, got {len(bbox)}")
    return KeypointSet(
        keypoints=tuple(kps),
        bbox=bbox,
        class_label=str(d.get("class", "")),
    )


def _item_from_dict(d: Mapping, base: Path) -> ManifestItem:
    item_id = str(_require(d, "id", "item"))
    where = f"item {item_id!r}"
    width = int(_require(d, "width", where))
    height = int(_require(d, "height", where))
    try:
        intrinsics = Intrinsics.from_dict(_require(d, "intrinsics", where))
        pose = Pose.from_dict(_require(d, "pose", where))
    except (ConfigError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"manifest {where}: invalid camera data: {e}") from None
    if (intrinsics.width, intrinsics.height) != (width, height):
        raise DataError(
            f"manifest {where}: intrinsics size ({intrinsics.width}, "
            f"{intrinsics.height}) does not match item size ({width}, {height})"
        )
    paths = {}
    for key in ("features", "depth_map", "normal_map", "valid_mask", "object_mask"):
        value = d.get(key)
        if value is None:
            paths[key] = None
            continue
        resolved = base / str(value)
        if not resolved.exists():
            raise DataError(f"manifest {where}: {key} file not found: {resolved}")
        paths[key] = str(resolved)
    keypoints = None
    if d.get("keypoints") is not None:
        keypoints = _keypoints_from_dict(d["keypoints"], where)
    return ManifestItem(
        item_id=item_id,
        width=width,
        height=height,
        intrinsics=intrinsics,
        pose=pose,
        keypoints=keypoints,
        split=d.get("split"),
        **paths,
    )


def load_manifest(path, root=None) -> Manifest:
    """Parse and fully validate a manifest document.

    Relative feature/map paths resolve against ``root`` (default: the
    manifest's own directory) and must exist; items keep the resolved
    paths.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest root must be an object")
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise FormatError(
            f"{path}: unsupported manifest version {version!r} "
            f"(supported: {MANIFEST_VERSION})"
        )
    base = path.parent if root is None else Path(root)

    items: dict[str, ManifestItem] = {}
    for raw in doc.get("items", []):
        item = _item_from_dict(raw, base)
        if item.item_id in items:
            raise DataError(f"manifest {path}: duplicate item id {item.item_id!r}")
        items[item.item_id] = item

    def check_ref(item_id: str, where: str) -> str:
        if item_id not in items:
            raise DataError(f"manifest {where}: unknown item {item_id!r}")
        return item_id

    pairs: list[PairEntry] = []
    seen_pairs: set[tuple[str, str]] = set()
    dropped = 0
    for k, raw in enumerate(doc.get("pairs", [])):
        where = f"pair {k}"
        a = check_ref(str(_require(raw, "a", where)), where)
        b = check_ref(str(_require(raw, "b", where)), where)
        angle = float(_require(raw, "angle_deg", where))
        if not np.isfinite(angle) or angle < 0.0:
            raise DataError(f"manifest {where}: invalid angle {angle}")
        if (a, b) in seen_pairs:
            dropped += 1
            continue
        seen_pairs.add((a, b))
        pairs.append(PairEntry(a=a, b=b, angle_deg=angle))

    kp_pairs: list[KeypointPairEntry] = []
    for k, raw in enumerate(doc.get("keypoint_pairs", [])):
        where = f"keypoint_pair {k}"
        a = check_ref(str(_require(raw, "a", where)), where)
        b = check_ref(str(_require(raw, "b", where)), where)
        for item_id in (a, b):
            if items[item_id].keypoints is None:
                raise DataError(f"manifest {where}: item {item_id!r} has no keypoints")
        variation = int(_require(raw, "variation", where))
        if variation not in (0, 1, 2):
            raise DataError(f"manifest {where}: variation must be 0, 1, or 2")
        kp_pairs.append(
            KeypointPairEntry(
                a=a,
                b=b,
                class_label=str(raw.get("class", items[a].keypoints.class_label)),
                variation=variation,
            )
        )

    return Manifest(
        items=items,
        pairs=tuple(pairs),
        keypoint_pairs=tuple(kp_pairs),
        duplicate_pairs_dropped=dropped,
    )


def write_manifest(path, document: Mapping) -> None:
    """Write a manifest document as deterministic JSON."""
    path = Path(path)
    text = json.dumps(document, sort_keys=True, indent=2)
    path.write_text(text + "\n", "utf-8")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_CSV_HEADER = [
    "model_id",
    "task_id",
    "domain_id",
    "block_id",
    "bin_id",
    "metric",
    "value",
    "higher_is_better",
]


def _row_sort_key(r: MetricRow):
    return (
        r.model_id,
        r.task_id,
        r.domain_id,
        r.block_id if r.block_id is not None else -1,
        r.bin_id if r.bin_id is not None else "",
        r.metric,
    )


def write_report_csv(path, report: MetricReport) -> None:
    """Write a metric report as CSV, rows sorted by key, floats via repr."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_CSV_HEADER)
        for r in sorted(report.rows, key=_row_sort_key):
            writer.writerow([
                r.model_id,
                r.task_id,
                r.domain_id,
                "" if r.block_id is None else str(r.block_id),
                "" if r.bin_id is None else r.bin_id,
                r.metric,
                repr(float(r.value)),
                "true" if r.higher_is_better else "false",
            ])


def read_report_csv(path) -> MetricReport:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except FileNotFoundError:
        raise DataError(f"report not found: {path}") from None
    rows = []
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != REPORT_CSV_HEADER:
        raise FormatError(
            f"{path}: unexpected report header {header}, expected {REPORT_CSV_HEADER}"
        )
    for k, record in enumerate(reader):
        if len(record) != len(REPORT_CSV_HEADER):
            raise FormatError(
                f"{path}: row {k + 1} has {len(record)} columns, expected "
                f"{len(REPORT_CSV_HEADER)}"
            )
        model, task, domain, block, bin_id, metric, value, higher = record
        if higher not in ("true", "false"):
            raise FormatError(
                f"{path}: row {k + 1}: higher_is_better must be true/false, got {higher!r}"
            )
        try:
            parsed = float(value)
        except ValueError:
            raise FormatError(f"{path}: row {k + 1}: invalid value {value!r}") from None
        rows.append(
            MetricRow(
                model_id=model,
                task_id=task,
                domain_id=domain,
                metric=metric,
                value=parsed,
                higher_is_better=higher == "true",
                block_id=None if block == "" else int(block),
                bin_id=None if bin_id == "" else bin_id,
            )
        )
    return MetricReport(rows)


def write_report_json(path, report: MetricReport) -> None:
    rows = []
    for r in sorted(report.rows, key=_row_sort_key):
        rows.append({
            "model_id": r.model_id,
            "task_id": r.task_id,
            "domain_id": r.domain_id,
            "block_id": r.block_id,
            "bin_id": r.bin_id,
            "metric": r.metric,
            "value": r.value,
            "higher_is_better": r.higher_is_better,
        })
    Path(path).write_text(json.dumps({"rows": rows}, sort_keys=True, indent=2) + "\n",
                          "utf-8")


def write_correlation_csv(path, result: CorrelationResult) -> None:
    """Correlation matrix as CSV: first column names the row task."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["task"] + list(result.task_names))
        for i, name in enumerate(result.task_names):
            writer.writerow([name] + [repr(float(v)) for v in result.matrix[i]])


def write_rating_csv(path, result: RatingResult) -> None:
    """Per-model ratings as CSV, models sorted by rating descending then id."""
    order = sorted(result.models, key=lambda m: (-result.ratings[m], m))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["model_id", "rating"])
        for m in order:
            writer.writerow([m, repr(float(result.ratings[m]))])
