"""Writers and readers for the interchange file formats.

This module is written against the published byte layouts, independently of
the evaluation engine's own implementation, so that files produced here
prove cross-implementation compatibility rather than shared code paths.

All integers and floats are little-endian.

Feature file (magic ``P3DF``)::

    "P3DF" | u16 version | u16 model_id_len | model_id utf-8 |
    u8 block_count | per block: u8 block_id | u32 H | u32 W | u32 C |
    H*W*C float32 row-major

Dense map file (magic ``P3DM``)::

    "P3DM" | u8 kind (0 depth, 1 normal3, 2 mask) | u32 H | u32 W |
    float32 payload row-major (normal maps store H*W*3 interleaved as
    (H, W, 3); masks hold exactly 0.0 or 1.0)

Depth maps are nonnegative with 0 meaning "invalid".  Manifests are JSON
documents with a ``version`` field; see :mod:`p3d_extractor.convert` for the
item schema.  Every write in this package goes through
:func:`atomic_write_bytes` (write to a temporary file in the target
directory, flush, then rename), so readers never observe half-written
files.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, FormatError

__all__ = [
    "FEATURE_MAGIC",
    "FEATURE_VERSION",
    "DENSEMAP_MAGIC",
    "MANIFEST_VERSION",
    "MAP_KIND_DEPTH",
    "MAP_KIND_NORMAL3",
    "MAP_KIND_MASK",
    "FeatureBlock",
    "FeatureGrids",
    "atomic_write_bytes",
    "write_feature_file",
    "read_feature_file",
    "write_depth_map",
    "write_normal_map",
    "write_mask_map",
    "read_dense_map",
    "write_manifest_document",
    "read_manifest_document",
]

FEATURE_MAGIC = b"P3DF"
DENSEMAP_MAGIC = b"P3DM"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1

MAP_KIND_DEPTH = 0
MAP_KIND_NORMAL3 = 1
MAP_KIND_MASK = 2
_KIND_NAMES = {MAP_KIND_DEPTH: "depth", MAP_KIND_NORMAL3: "normal3",
               MAP_KIND_MASK: "mask"}


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file + rename in one directory.

    A crash mid-write leaves at worst a ``*.tmp`` file behind, never a
    truncated target; concurrent readers of an existing ``path`` see either
    the old or the new complete content.
    """
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(
        dir=path.parent, prefix=f".{path.name}.", suffix=".tmp"
    )
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# Bounds-checked binary reading
# ---------------------------------------------------------------------------


class _Reader:
    """Sequential reader that bounds every declared size against the file."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if count < 0 or self.pos + count > len(self.data):
            raise CorruptionError(
                f"{self.path}: truncated file while reading {what}: needs "
                f"{count} bytes, {len(self.data) - self.pos} left",
                offset=self.pos,
            )
        raw = self.data[self.pos : self.pos + count]
        self.pos += count
        return raw

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise CorruptionError(
                f"{self.path}: {len(self.data) - self.pos} unexpected "
                "trailing bytes",
                offset=self.pos,
            )


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None


def _check_magic(reader: _Reader, magic: bytes, label: str) -> None:
    got = reader.take(len(magic), "magic")
    if got != magic:
        raise FormatError(
            f"{reader.path}: not a {label} file (magic {got!r}, "
            f"expected {magic!r})"
        )


def _f32(reader: _Reader, count: int, what: str) -> np.ndarray:
    raw = reader.take(4 * count, what)
    return np.frombuffer(raw, dtype="<f4").copy()


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureBlock:
    """One feature grid as stored on disk: (H, W, C) float32."""

    block_id: int
    values: np.ndarray

    def __post_init__(self):
        if not (0 <= self.block_id <= 255):
            raise ConfigError(f"block_id must fit in a byte, got {self.block_id}")
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise DataError(
                f"feature block {self.block_id} must be nonempty (H, W, C), "
                f"got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError(
                f"feature block {self.block_id} contains non-finite values"
            )
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class FeatureGrids:
    """The content of one feature file: a model id and its blocks."""

    model_id: str
    blocks: tuple[FeatureBlock, ...]

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if not blocks:
            raise ConfigError("a feature file needs at least one block")
        if len(blocks) > 255:
            raise ConfigError(f"too many blocks for one file: {len(blocks)}")
        ids = [b.block_id for b in blocks]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate block ids: {ids}")
        if len(self.model_id.encode("utf-8")) > 0xFFFF:
            raise ConfigError("model_id too long to serialize")
        object.__setattr__(self, "blocks", blocks)


def write_feature_file(path, grids: FeatureGrids) -> None:
    out = io.BytesIO()
    out.write(FEATURE_MAGIC)
    out.write(struct.pack("<H", FEATURE_VERSION))
    name = grids.model_id.encode("utf-8")
    out.write(struct.pack("<H", len(name)))
    out.write(name)
    out.write(struct.pack("<B", len(grids.blocks)))
    for block in grids.blocks:
        h, w, c = block.values.shape
        out.write(struct.pack("<BIII", block.block_id, h, w, c))
        out.write(block.values.astype("<f4", copy=False).tobytes(order="C"))
    atomic_write_bytes(path, out.getvalue())


def read_feature_file(path) -> FeatureGrids:
    reader = _Reader(_read_bytes(path), str(path))
    _check_magic(reader, FEATURE_MAGIC, "feature")
    (version,) = reader.unpack("<H", "version")
    if version != FEATURE_VERSION:
        raise FormatError(
            f"{path}: unsupported feature file version {version} "
            f"(supported: {FEATURE_VERSION})"
        )
    (name_len,) = reader.unpack("<H", "model_id length")
    raw_name = reader.take(name_len, "model_id")
    try:
        model_id = raw_name.decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptionError(
            f"{path}: model_id is not valid UTF-8", offset=reader.pos - name_len
        ) from None
    (block_count,) = reader.unpack("<B", "block count")
    if block_count < 1:
        raise FormatError(f"{path}: feature file declares zero blocks")
    blocks = []
    for k in range(block_count):
        block_id, h, w, c = reader.unpack("<BIII", f"block {k} header")
        if min(h, w, c) < 1:
            raise CorruptionError(
                f"{path}: block {block_id} declares an empty shape "
                f"({h}, {w}, {c})",
                offset=reader.pos,
            )
        payload = _f32(reader, h * w * c, f"block {block_id} payload")
        blocks.append(FeatureBlock(block_id, payload.reshape(h, w, c)))
    reader.expect_end()
    return FeatureGrids(model_id=model_id, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Dense map files
# ---------------------------------------------------------------------------


def _write_map(path, kind: int, h: int, w: int, payload: np.ndarray) -> None:
    out = io.BytesIO()
    out.write(DENSEMAP_MAGIC)
    out.write(struct.pack("<BII", kind, h, w))
    out.write(np.ascontiguousarray(payload, dtype="<f4").tobytes(order="C"))
    atomic_write_bytes(path, out.getvalue())


def write_depth_map(path, depth: np.ndarray) -> None:
    """Write an (H, W) depth map in meters; 0 marks invalid pixels."""
    depth = np.ascontiguousarray(depth, dtype=np.float32)
    if depth.ndim != 2 or min(depth.shape) < 1:
        raise DataError(f"depth map must be nonempty (H, W), got {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise DataError("depth map contains non-finite values")
    if np.any(depth < 0):
        raise DataError("depth map contains negative values (0 means invalid)")
    _write_map(path, MAP_KIND_DEPTH, depth.shape[0], depth.shape[1], depth)


def write_normal_map(path, normals: np.ndarray) -> None:
    """Write a (3, H, W) unit-normal map; stored interleaved as (H, W, 3)."""
    normals = np.ascontiguousarray(normals, dtype=np.float32)
    if normals.ndim != 3 or normals.shape[0] != 3 or min(normals.shape[1:]) < 1:
        raise DataError(f"normal map must be (3, H, W), got {normals.shape}")
    if not np.all(np.isfinite(normals)):
        raise DataError("normal map contains non-finite values")
    h, w = normals.shape[1], normals.shape[2]
    _write_map(path, MAP_KIND_NORMAL3, h, w, np.moveaxis(normals, 0, 2))


def write_mask_map(path, mask: np.ndarray) -> None:
    """Write an (H, W) boolean validity/object mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or min(mask.shape) < 1:
        raise DataError(f"mask must be nonempty (H, W), got {mask.shape}")
    payload = mask.astype(bool).astype(np.float32)
    _write_map(path, MAP_KIND_MASK, mask.shape[0], mask.shape[1], payload)


def read_dense_map(path) -> tuple[str, np.ndarray]:
    """Read a dense map; returns (kind name, values).

    Depth comes back as (H, W) float32, normals as (3, H, W) float32, masks
    as (H, W) bool.
    """
    reader = _Reader(_read_bytes(path), str(path))
    _check_magic(reader, DENSEMAP_MAGIC, "dense map")
    kind, h, w = reader.unpack("<BII", "map header")
    if kind not in _KIND_NAMES:
        raise FormatError(f"{path}: unknown dense map kind {kind}")
    if min(h, w) < 1:
        raise CorruptionError(
            f"{path}: map declares an empty shape ({h}, {w})", offset=reader.pos
        )
    channels = 3 if kind == MAP_KIND_NORMAL3 else 1
    payload = _f32(reader, h * w * channels, "map payload")
    reader.expect_end()
    if kind == MAP_KIND_NORMAL3:
        values = np.moveaxis(payload.reshape(h, w, 3), 2, 0)
    elif kind == MAP_KIND_MASK:
        raw = payload.reshape(h, w)
        if not np.all((raw == 0.0) | (raw == 1.0)):
            raise FormatError(
                f"{path}: mask payload contains values other than 0/1"
            )
        values = raw == 1.0
    else:
        values = payload.reshape(h, w)
    return _KIND_NAMES[kind], values


# ---------------------------------------------------------------------------
# Manifest documents
# ---------------------------------------------------------------------------


def write_manifest_document(path, document: Mapping) -> None:
    """Write a manifest as deterministic JSON (sorted keys, 2-space indent)."""
    text = json.dumps(document, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def read_manifest_document(path) -> dict:
    """Parse a manifest document and validate its version field.

    This is a light structural read (the evaluation engine performs the deep
    validation on load); it is used to feed extraction and to round-trip
    documents.
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
    if not isinstance(doc.get("items", []), list):
        raise FormatError(f"{path}: manifest 'items' must be a list")
    return doc
