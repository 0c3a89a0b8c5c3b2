"""File formats: bitwise round trips, validation, and corruption handling."""

import json
import struct

import numpy as np
import pytest

from p3d import analysis as an
from p3d import datastore as ds
from p3d import probes
from p3d import tensorcore as tc
from p3d.errors import (
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
)
from p3d.geometry import Intrinsics, Pose


# ---------------------------------------------------------------------------
# Feature files
# ---------------------------------------------------------------------------


def sample_feature_data(rng):
    blocks = tuple(
        ds.FeatureBlock(block_id=k, values=rng.normal(size=(3, 4, 5)).astype(np.float32))
        for k in range(4)
    )
    return ds.FeatureFileData(model_id="toy-model", blocks=blocks)


def test_feature_file_bitwise_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = sample_feature_data(rng)
    path = tmp_path / "feat.p3df"
    ds.write_feature_file(path, data)
    loaded = ds.read_feature_file(path)
    assert loaded.model_id == "toy-model"
    assert len(loaded.blocks) == 4
    for orig, back in zip(data.blocks, loaded.blocks):
        assert back.block_id == orig.block_id
        assert back.values.dtype == np.float32
        assert back.values.tobytes() == orig.values.tobytes()  # bitwise
    # writing the same content twice produces identical bytes
    path2 = tmp_path / "feat2.p3df"
    ds.write_feature_file(path2, data)
    assert path.read_bytes() == path2.read_bytes()


def test_feature_file_bad_magic(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "feat.p3df"
    ds.write_feature_file(path, sample_feature_data(rng))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        ds.read_feature_file(path)


def test_feature_file_unsupported_version(tmp_path):
    rng = np.random.default_rng(2)
    path = tmp_path / "feat.p3df"
    ds.write_feature_file(path, sample_feature_data(rng))
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 999)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        ds.read_feature_file(path)


def test_feature_file_truncation_reports_offset(tmp_path):
    rng = np.random.default_rng(3)
    path = tmp_path / "feat.p3df"
    ds.write_feature_file(path, sample_feature_data(rng))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptionError) as exc_info:
        ds.read_feature_file(path)
    assert exc_info.value.offset is not None


def test_feature_file_huge_declared_size_is_not_allocated(tmp_path):
    # header declares a block of ~10 MB but the payload is tiny
    path = tmp_path / "feat.p3df"
    out = bytearray()
    out += ds.FEATURE_MAGIC
    out += struct.pack("<H", ds.FEATURE_VERSION)
    out += struct.pack("<H", 1) + b"m"
    out += struct.pack("<B", 1)
    out += struct.pack("<BIII", 0, 1000, 1000, 3)  # 12 MB declared
    out += b"\x00" * 64  # 64 bytes present
    path.write_bytes(bytes(out))
    with pytest.raises(CorruptionError, match="truncated"):
        ds.read_feature_file(path)


def test_feature_file_trailing_bytes_rejected(tmp_path):
    rng = np.random.default_rng(4)
    path = tmp_path / "feat.p3df"
    ds.write_feature_file(path, sample_feature_data(rng))
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CorruptionError, match="trailing"):
        ds.read_feature_file(path)


def test_feature_data_validation():
    ok = np.zeros((2, 2, 2), dtype=np.float32)
    with pytest.raises(ConfigError):
        ds.FeatureFileData(model_id="m", blocks=())
    with pytest.raises(ConfigError):
        ds.FeatureFileData(
            model_id="m",
            blocks=(ds.FeatureBlock(0, ok), ds.FeatureBlock(0, ok)),
        )
    with pytest.raises(DataError):
        ds.FeatureBlock(0, np.full((2, 2, 2), np.nan, dtype=np.float32))
    data = ds.FeatureFileData(model_id="m", blocks=(ds.FeatureBlock(2, ok),))
    assert data.block(2).block_id == 2
    with pytest.raises(DataError):
        data.block(0)


def test_feature_file_missing_path():
    with pytest.raises(DataError, match="not found"):
        ds.read_feature_file("/nonexistent/feat.p3df")


# ---------------------------------------------------------------------------
# Dense maps
# ---------------------------------------------------------------------------


def test_dense_map_round_trips(tmp_path):
    rng = np.random.default_rng(5)
    depth = rng.uniform(0.0, 5.0, size=(6, 7)).astype(np.float32)
    normal = rng.normal(size=(3, 6, 7)).astype(np.float32)
    mask = rng.uniform(size=(6, 7)) > 0.5
    for name, kind, values in (
        ("depth", ds.MAP_KIND_DEPTH, depth),
        ("normal", ds.MAP_KIND_NORMAL3, normal),
        ("mask", ds.MAP_KIND_MASK, mask),
    ):
        path = tmp_path / f"{name}.p3dm"
        ds.write_dense_map(path, ds.DenseMap(kind=kind, values=values))
        loaded = ds.read_dense_map(path)
        assert loaded.kind == kind
        if kind == ds.MAP_KIND_MASK:
            assert loaded.values.dtype == bool
            assert (loaded.values == mask).all()
        else:
            assert loaded.values.tobytes() == values.tobytes()


def test_dense_map_validation():
    with pytest.raises(ConfigError):
        ds.DenseMap(kind=9, values=np.zeros((2, 2)))
    with pytest.raises(DataError):
        ds.DenseMap(kind=ds.MAP_KIND_DEPTH, values=np.full((2, 2), -1.0))
    with pytest.raises(DataError):
        ds.DenseMap(kind=ds.MAP_KIND_DEPTH, values=np.full((2, 2), np.inf))


def test_dense_map_bad_mask_payload(tmp_path):
    path = tmp_path / "bad.p3dm"
    out = ds.DENSEMAP_MAGIC + struct.pack("<BII", ds.MAP_KIND_MASK, 1, 2)
    out += np.array([0.0, 0.5], dtype="<f4").tobytes()
    path.write_bytes(out)
    with pytest.raises(FormatError, match="0/1"):
        ds.read_dense_map(path)


def test_dense_map_bad_kind(tmp_path):
    path = tmp_path / "bad.p3dm"
    out = ds.DENSEMAP_MAGIC + struct.pack("<BII", 7, 1, 1)
    out += np.zeros(1, dtype="<f4").tobytes()
    path.write_bytes(out)
    with pytest.raises(FormatError, match="kind"):
        ds.read_dense_map(path)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def small_config(out_channels=256):
    return probes.ProbeConfig(
        stage_channels=(4, 4, 4), out_channels=out_channels, hidden_width=8
    )


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    config = small_config()
    probe = probes.init_probe(config, seed=7)
    path = tmp_path / "probe.p3dc"
    ds.checkpoint_probe(path, probe)
    restored = ds.restore_probe(path, config)
    assert sorted(restored.params) == sorted(probe.params)
    for name in probe.params:
        assert restored.params[name].values.tobytes() == probe.params[name].values.tobytes()
    # identical forward output on identical input
    rng = np.random.default_rng(8)
    feats = [tc.Tensor(rng.normal(size=(1, 4, s, s)).astype(np.float32))
             for s in (2, 4, 8)]
    out_a = probes.probe_forward(probe, feats, out_hw=(8, 8))
    out_b = probes.probe_forward(restored, feats, out_hw=(8, 8))
    assert out_a.values.tobytes() == out_b.values.tobytes()


def test_checkpoint_config_mismatch(tmp_path):
    probe = probes.init_probe(small_config(out_channels=256), seed=0)
    path = tmp_path / "probe.p3dc"
    ds.checkpoint_probe(path, probe)
    with pytest.raises(ConfigError, match="mismatch"):
        ds.restore_probe(path, small_config(out_channels=4))


def test_checkpoint_config_readable_without_knowing_it(tmp_path):
    config = small_config(out_channels=4)
    probe = probes.init_probe(config, seed=3)
    path = tmp_path / "probe.p3dc"
    ds.checkpoint_probe(path, probe)
    assert ds.read_checkpoint_config(path) == config
    restored = ds.restore_probe(path, ds.read_checkpoint_config(path))
    assert sorted(restored.params) == sorted(probe.params)


def test_checkpoint_unknown_version(tmp_path):
    probe = probes.init_probe(small_config(), seed=0)
    path = tmp_path / "probe.p3dc"
    ds.checkpoint_probe(path, probe)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 42)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        ds.restore_probe(path, small_config())


def test_checkpoint_truncation(tmp_path):
    probe = probes.init_probe(small_config(), seed=0)
    path = tmp_path / "probe.p3dc"
    ds.checkpoint_probe(path, probe)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(CorruptionError):
        ds.restore_probe(path, small_config())


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def intrinsics_dict(w=8, h=6):
    return Intrinsics(fx=10.0, fy=10.0, cx=(w - 1) / 2, cy=(h - 1) / 2,
                      width=w, height=h).to_dict()


def pose_dict():
    return Pose.identity().to_dict()


def minimal_manifest_doc(tmp_path, n_items=1):
    items = []
    for k in range(n_items):
        depth_path = tmp_path / f"depth{k}.p3dm"
        ds.write_dense_map(
            depth_path, ds.DenseMap(ds.MAP_KIND_DEPTH, np.full((6, 8), 2.0))
        )
        items.append({
            "id": f"img{k}",
            "width": 8,
            "height": 6,
            "intrinsics": intrinsics_dict(),
            "pose": pose_dict(),
            "depth_map": depth_path.name,
        })
    return {"version": 1, "items": items, "pairs": [], "keypoint_pairs": []}


def test_manifest_minimal_loads(tmp_path):
    doc = minimal_manifest_doc(tmp_path)
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    manifest = ds.load_manifest(path)
    assert list(manifest.items) == ["img0"]
    item = manifest.item("img0")
    assert item.depth_map.endswith("depth0.p3dm")
    assert item.intrinsics.width == 8


def test_manifest_missing_referenced_file(tmp_path):
    doc = minimal_manifest_doc(tmp_path)
    doc["items"][0]["depth_map"] = "missing.p3dm"
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    with pytest.raises(DataError, match="img0"):
        ds.load_manifest(path)


def test_manifest_invalid_pose_rejected(tmp_path):
    doc = minimal_manifest_doc(tmp_path)
    bad_pose = pose_dict()
    bad_pose["rotation"] = [[1, 0, 0], [0, 1, 0], [0, 0, -1]]  # det -1
    doc["items"][0]["pose"] = bad_pose
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    with pytest.raises(DataError, match="img0"):
        ds.load_manifest(path)


def test_manifest_duplicate_pairs_collapsed_with_count(tmp_path):
    doc = minimal_manifest_doc(tmp_path, n_items=2)
    doc["pairs"] = [
        {"a": "img0", "b": "img1", "angle_deg": 10.0},
        {"a": "img0", "b": "img1", "angle_deg": 10.0},
        {"a": "img1", "b": "img0", "angle_deg": 10.0},
    ]
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    manifest = ds.load_manifest(path)
    assert len(manifest.pairs) == 2  # (a,b) and (b,a) are distinct pairs
    assert manifest.duplicate_pairs_dropped == 1


def test_manifest_unknown_pair_item(tmp_path):
    doc = minimal_manifest_doc(tmp_path)
    doc["pairs"] = [{"a": "img0", "b": "ghost", "angle_deg": 5.0}]
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    with pytest.raises(DataError, match="ghost"):
        ds.load_manifest(path)


def test_manifest_keypoint_pairs(tmp_path):
    doc = minimal_manifest_doc(tmp_path, n_items=2)
    for item in doc["items"]:
        item["keypoints"] = {
            "points": [{"name": "a", "u": 1.0, "v": 1.0}],
            "bbox": [0, 0, 8, 6],
            "class": "cat",
        }
    doc["keypoint_pairs"] = [{"a": "img0", "b": "img1", "variation": 1}]
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    manifest = ds.load_manifest(path)
    (kp,) = manifest.keypoint_pairs
    assert kp.class_label == "cat"
    assert kp.variation == 1
    assert manifest.item("img0").keypoints.get("a").u == 1.0


def test_manifest_bad_version_and_json(tmp_path):
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, {"version": 99, "items": []})
    with pytest.raises(FormatError, match="version"):
        ds.load_manifest(path)
    path.write_text("{not json")
    with pytest.raises(FormatError, match="JSON"):
        ds.load_manifest(path)


def test_manifest_items_ordered_deterministically(tmp_path):
    doc = minimal_manifest_doc(tmp_path, n_items=3)
    doc["items"] = [doc["items"][2], doc["items"][0], doc["items"][1]]
    path = tmp_path / "manifest.json"
    ds.write_manifest(path, doc)
    manifest = ds.load_manifest(path)
    assert [i.item_id for i in manifest.ordered_items()] == ["img0", "img1", "img2"]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def sample_report():
    rows = [
        an.MetricRow("m2", "depth", "scene", "delta1", 91.25, True),
        an.MetricRow("m1", "corr", "scene", "recall", 1 / 3, True, block_id=2,
                     bin_id="0-15"),
        an.MetricRow("m1", "depth", "scene", "rmse", 0.125, False),
    ]
    return an.MetricReport(rows)


def test_report_csv_round_trip_exact(tmp_path):
    report = sample_report()
    path = tmp_path / "report.csv"
    ds.write_report_csv(path, report)
    loaded = ds.read_report_csv(path)
    assert {r.key() for r in loaded.rows} == {r.key() for r in report.rows}
    by_key = {r.key(): r for r in loaded.rows}
    for r in report.rows:
        # repr round trip keeps the exact float, including 1/3
        assert by_key[r.key()].value == r.value
        assert by_key[r.key()].higher_is_better == r.higher_is_better


def test_report_csv_deterministic_bytes(tmp_path):
    report = sample_report()
    p1, p2 = tmp_path / "r1.csv", tmp_path / "r2.csv"
    ds.write_report_csv(p1, report)
    ds.write_report_csv(p2, an.MetricReport(tuple(reversed(report.rows))))
    assert p1.read_bytes() == p2.read_bytes()  # row order is canonical


def test_report_csv_rejects_bad_header_and_rows(tmp_path):
    path = tmp_path / "report.csv"
    path.write_text("wrong,header\n")
    with pytest.raises(FormatError, match="header"):
        ds.read_report_csv(path)
    ds.write_report_csv(path, sample_report())
    lines = path.read_text().splitlines()
    lines.append("a,b,c")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="columns"):
        ds.read_report_csv(path)


def test_report_json_deterministic(tmp_path):
    report = sample_report()
    p1, p2 = tmp_path / "r1.json", tmp_path / "r2.json"
    ds.write_report_json(p1, report)
    ds.write_report_json(p2, report)
    assert p1.read_bytes() == p2.read_bytes()
    doc = json.loads(p1.read_text())
    assert len(doc["rows"]) == 3
    assert doc["rows"][0]["model_id"] == "m1"


def test_correlation_and_rating_csv(tmp_path):
    tasks = [
        an.TaskSpec(name="t0", task_id="t0", metric="s"),
        an.TaskSpec(name="t1", task_id="t1", metric="s"),
    ]
    rows = []
    for model, (v0, v1) in (("a", (3.0, 30.0)), ("b", (2.0, 20.0)), ("c", (1.0, 10.0))):
        rows.append(an.MetricRow(model, "t0", "d", "s", v0, True))
        rows.append(an.MetricRow(model, "t1", "d", "s", v1, True))
    report = an.MetricReport(rows)
    corr = an.task_correlation_matrix(report, tasks)
    rating = an.rank_rating(report, tasks)
    cp = tmp_path / "corr.csv"
    rp = tmp_path / "rating.csv"
    ds.write_correlation_csv(cp, corr)
    ds.write_rating_csv(rp, rating)
    corr_lines = cp.read_text().splitlines()
    assert corr_lines[0] == "task,t0,t1"
    assert corr_lines[1].startswith("t0,1.0,")
    rating_lines = rp.read_text().splitlines()
    assert rating_lines == ["model_id,rating", "a,1.0", "b,0.5", "c,0.0"]
