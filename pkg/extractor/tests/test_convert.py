"""Dataset conversion: miniature source trees in each documented layout.

Oracles: depth PNGs are millimeters (1500 -> 1.5 m); relative angles of
z-axis rotations are the rotation deltas; exclusion and sampling rules are
checked structurally.
"""

import json
import math

import numpy as np
import pytest
from PIL import Image

from p3d_extractor import convert, formats
from p3d_extractor.errors import ConfigError, SchemaError


# ---------------------------------------------------------------------------
# Tree builders
# ---------------------------------------------------------------------------


def rot_z(deg):
    r = math.radians(deg)
    c, s = math.cos(r), math.sin(r)
    return [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]


def write_rgb(path, w, h, level=100):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((h, w, 3), level, dtype=np.uint8), "RGB").save(path)


def write_depth16(path, w, h, mm=1500, hole=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    depth = np.full((h, w), mm, dtype=np.uint16)
    if hole is not None:
        depth[hole] = 0
    Image.fromarray(depth).save(path)


def write_mask_png(path, w, h):
    path.parent.mkdir(parents=True, exist_ok=True)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[: h // 2] = 255
    Image.fromarray(mask, mode="L").save(path)


def write_normals_png(path, w, h):
    """All pixels encode the +x normal: rgb = (255, 128, 128)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.zeros((h, w, 3), dtype=np.uint8)
    arr[:, :] = (255, 128, 128)
    Image.fromarray(arr, "RGB").save(path)


def build_nyu(root, w=32, h=24):
    (root / "intrinsics.json").parent.mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.json").write_text(json.dumps(
        {"fx": 40.0, "fy": 41.0, "cx": w / 2, "cy": h / 2,
         "width": w, "height": h}))
    (root / "train.txt").write_text("kitchen_0001\nkitchen_0002\n")
    (root / "test.txt").write_text("office_0001\n")
    for item in ("kitchen_0001", "kitchen_0002", "office_0001"):
        write_rgb(root / "images" / f"{item}.png", w, h)
        write_depth16(root / "depth" / f"{item}.png", w, h,
                      mm=1500, hole=(0, 0))
    write_normals_png(root / "normals" / "office_0001.png", w, h)
    write_mask_png(root / "masks" / "office_0001.png", w, h)
    return root


def build_navi(root, w=24, h=18):
    intr = {"fx": 30.0, "fy": 30.0, "cx": w / 2, "cy": h / 2,
            "width": w, "height": h}

    def obj(name, images):
        d = root / name
        ann = {"intrinsics": intr, "images": []}
        for stem, which, deg in images:
            write_rgb(d / "images" / f"{stem}.png", w, h)
            write_depth16(d / "depth" / f"{stem}.png", w, h, mm=2000)
            write_mask_png(d / "masks" / f"{stem}.png", w, h)
            ann["images"].append({
                "file": f"images/{stem}.png",
                "set": which,
                "pose": {"rotation": rot_z(deg),
                         "translation": [0.0, 0.0, 1.0]},
            })
        d.mkdir(parents=True, exist_ok=True)
        (d / "annotations.json").write_text(json.dumps(ann))

    obj("obj_a", [("mv0", "multiview", 0), ("mv1", "multiview", 10),
                  ("w0", "wild", 0), ("w1", "wild", 30),
                  ("w2", "wild", 170)])
    obj("obj_b", [("mv0", "multiview", 0), ("w0", "wild", 0),
                  ("w1", "wild", 90)])
    obj("obj_c", [("mv0", "multiview", 0)])          # no wild set
    obj("obj_d", [("w0", "wild", 0)])                # no multiview set
    return root


def build_scannet(root, w=32, h=24, angles=(0, 45, 90)):
    root.mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.txt").write_text("40 0 16\n0 40 12\n0 0 1\n")
    for k, deg in enumerate(angles):
        frame = f"f{k}"
        write_rgb(root / "color" / f"{frame}.png", w, h)
        write_depth16(root / "depth" / f"{frame}.png", w, h, mm=3000)
        rows = rot_z(deg)
        lines = []
        for i in range(3):
            lines.append(" ".join(str(v) for v in rows[i]) + " 0.0")
        lines.append("0 0 0 1")
        (root / "pose").mkdir(exist_ok=True)
        (root / "pose" / f"{frame}.txt").write_text("\n".join(lines) + "\n")
    (root / "pairs.txt").write_text("f0 f1\nf0 f2\nf1 f2\n")
    return root


def build_spair(root, classes=("chair", "plane"), pairs_per_class=3,
                w=40, h=30):
    for cls in classes:
        for k in range(3):
            stem = f"{cls}{k}"
            write_rgb(root / "images" / cls / f"{stem}.jpg", w, h)
            ann = {
                "kps": {"0": [10.0, 20.0], "1": [30.0, 12.0], "2": None},
                "bndbox": [5, 5, w - 5, h - 5],
                "image_width": w,
                "image_height": h,
            }
            p = root / "ImageAnnotation" / cls / f"{stem}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(ann))
        combos = [(0, 1), (1, 2), (0, 2)][:pairs_per_class]
        for k, (i, j) in enumerate(combos):
            pair = {
                "src_imname": f"{cls}{i}.jpg",
                "trg_imname": f"{cls}{j}.jpg",
                "category": cls,
                "viewpoint_variation": k % 3,
            }
            p = root / "PairAnnotation" / "test" / f"{cls}-{k}.json"
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(json.dumps(pair))
    return root


# ---------------------------------------------------------------------------
# NYU
# ---------------------------------------------------------------------------


class TestNyu:
    def test_items_maps_and_splits(self, tmp_path):
        src = build_nyu(tmp_path / "src")
        out = tmp_path / "out"
        summary = convert.convert_dataset("nyu", src, out)
        assert summary.items == 3
        assert summary.pairs == 0

        doc = json.loads((out / "manifest.json").read_text())
        assert doc["version"] == 1
        by_id = {item["id"]: item for item in doc["items"]}
        assert set(by_id) == {"kitchen_0001", "kitchen_0002", "office_0001"}
        assert by_id["kitchen_0001"]["split"] == "train"
        assert by_id["office_0001"]["split"] == "test"
        assert by_id["office_0001"]["normal_map"]
        assert by_id["kitchen_0001"].get("normal_map") is None

        kind, depth = formats.read_dense_map(
            out / by_id["kitchen_0001"]["depth_map"])
        assert kind == "depth"
        assert depth[0, 0] == 0.0            # the hole stays invalid
        assert depth[5, 5] == pytest.approx(1.5)  # 1500 mm -> 1.5 m

        kind, mask = formats.read_dense_map(
            out / by_id["kitchen_0001"]["valid_mask"])
        assert kind == "mask"
        assert not mask[0, 0] and mask[5, 5]

    def test_normals_decode_to_unit_vectors(self, tmp_path):
        src = build_nyu(tmp_path / "src")
        out = tmp_path / "out"
        convert.convert_dataset("nyu", src, out)
        doc = json.loads((out / "manifest.json").read_text())
        item = next(i for i in doc["items"] if i["id"] == "office_0001")
        kind, normals = formats.read_dense_map(out / item["normal_map"])
        assert kind == "normal3"
        norms = np.linalg.norm(normals, axis=0)
        assert np.allclose(norms, 1.0, atol=1e-5)
        assert np.all(normals[0] > 0.99)  # encoded +x

    def test_images_copied_next_to_manifest(self, tmp_path):
        src = build_nyu(tmp_path / "src")
        out = tmp_path / "out"
        convert.convert_dataset("nyu", src, out)
        doc = json.loads((out / "manifest.json").read_text())
        for item in doc["items"]:
            image = out / item["image"]
            assert image.is_file()
            assert image.read_bytes() == (
                src / "images" / f"{item['id']}.png").read_bytes()

    def test_missing_intrinsics_key_names_it(self, tmp_path):
        src = build_nyu(tmp_path / "src")
        intr = json.loads((src / "intrinsics.json").read_text())
        del intr["fy"]
        (src / "intrinsics.json").write_text(json.dumps(intr))
        with pytest.raises(SchemaError, match="fy"):
            convert.convert_dataset("nyu", src, tmp_path / "out")

    def test_missing_depth_file_names_the_item(self, tmp_path):
        src = build_nyu(tmp_path / "src")
        (src / "depth" / "kitchen_0002.png").unlink()
        with pytest.raises(SchemaError, match="kitchen_0002"):
            convert.convert_dataset("nyu", src, tmp_path / "out")

    def test_size_mismatch_is_schema_drift(self, tmp_path):
        src = build_nyu(tmp_path / "src")
        write_rgb(src / "images" / "kitchen_0001.png", 64, 48)
        with pytest.raises(SchemaError, match="kitchen_0001"):
            convert.convert_dataset("nyu", src, tmp_path / "out")


# ---------------------------------------------------------------------------
# NAVI
# ---------------------------------------------------------------------------


class TestNavi:
    def test_exclusion_splits_and_pair_cap(self, tmp_path):
        src = build_navi(tmp_path / "src")
        out = tmp_path / "out"
        summary = convert.convert_dataset("navi", src, out)
        # Two objects lack one of the two required sets.
        assert summary.excluded == ("obj_c", "obj_d")
        assert summary.items == 8  # 5 from obj_a + 3 from obj_b

        doc = json.loads((out / "manifest.json").read_text())
        by_id = {item["id"]: item for item in doc["items"]}
        assert by_id["obj_a_mv0"]["split"] == "train"
        assert by_id["obj_a_w0"]["split"] == "test"

        pairs = {(p["a"], p["b"]): p["angle_deg"] for p in doc["pairs"]}
        # w2 sits at 170deg: 140deg and 170deg from its peers, so no
        # partner within the 120deg cap exists for it.
        assert ("obj_a_w2",) not in {(a,) for a, _ in pairs}
        for (a, b), angle in pairs.items():
            assert a.rsplit("_", 1)[0] == b.rsplit("_", 1)[0]
            assert 0.0 < angle <= 120.0

        # obj_a: w0 and w1 can only partner each other (30deg apart).
        assert pairs[("obj_a_w0", "obj_a_w1")] == pytest.approx(30.0, abs=1e-9)
        assert pairs[("obj_a_w1", "obj_a_w0")] == pytest.approx(30.0, abs=1e-9)
        # obj_b: the two wild images are 90deg apart.
        assert pairs[("obj_b_w0", "obj_b_w1")] == pytest.approx(90.0, abs=1e-9)

    def test_every_wild_image_with_a_candidate_gets_one_pair(self, tmp_path):
        src = build_navi(tmp_path / "src")
        out = tmp_path / "out"
        convert.convert_dataset("navi", src, out)
        doc = json.loads((out / "manifest.json").read_text())
        sources = [p["a"] for p in doc["pairs"]]
        assert sorted(sources) == [
            "obj_a_w0", "obj_a_w1", "obj_b_w0", "obj_b_w1"
        ]
        assert len(set(sources)) == len(sources)  # one pair per source image

    def test_object_masks_and_depth_flow_through(self, tmp_path):
        src = build_navi(tmp_path / "src")
        out = tmp_path / "out"
        convert.convert_dataset("navi", src, out)
        doc = json.loads((out / "manifest.json").read_text())
        item = next(i for i in doc["items"] if i["id"] == "obj_a_w0")
        kind, depth = formats.read_dense_map(out / item["depth_map"])
        assert depth[3, 3] == pytest.approx(2.0)
        kind, mask = formats.read_dense_map(out / item["object_mask"])
        assert kind == "mask"
        assert mask[0, 0] and not mask[-1, 0]

    def test_same_seed_is_byte_identical(self, tmp_path):
        src = build_navi(tmp_path / "src")
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        convert.convert_dataset("navi", src, out1, seed=7)
        convert.convert_dataset("navi", src, out2, seed=7)
        assert (out1 / "manifest.json").read_bytes() == \
            (out2 / "manifest.json").read_bytes()

    def test_bad_pose_matrix_names_the_image(self, tmp_path):
        src = build_navi(tmp_path / "src")
        ann_path = src / "obj_a" / "annotations.json"
        ann = json.loads(ann_path.read_text())
        ann["images"][0]["pose"]["rotation"] = [[2, 0, 0], [0, 1, 0], [0, 0, 1]]
        ann_path.write_text(json.dumps(ann))
        with pytest.raises(SchemaError, match="mv0"):
            convert.convert_dataset("navi", src, tmp_path / "out")

    def test_missing_set_key_names_the_file(self, tmp_path):
        src = build_navi(tmp_path / "src")
        ann_path = src / "obj_b" / "annotations.json"
        ann = json.loads(ann_path.read_text())
        del ann["images"][0]["set"]
        ann_path.write_text(json.dumps(ann))
        with pytest.raises(SchemaError, match="set"):
            convert.convert_dataset("navi", src, tmp_path / "out")


# ---------------------------------------------------------------------------
# ScanNet pairs
# ---------------------------------------------------------------------------


class TestScannetPairs:
    def test_every_listed_pair_with_angles(self, tmp_path):
        src = build_scannet(tmp_path / "src")
        out = tmp_path / "out"
        summary = convert.convert_dataset("scannet_pairs", src, out)
        assert summary.items == 3
        assert summary.pairs == 3

        doc = json.loads((out / "manifest.json").read_text())
        pairs = {(p["a"], p["b"]): p["angle_deg"] for p in doc["pairs"]}
        assert pairs[("f0", "f1")] == pytest.approx(45.0, abs=1e-9)
        assert pairs[("f0", "f2")] == pytest.approx(90.0, abs=1e-9)
        assert pairs[("f1", "f2")] == pytest.approx(45.0, abs=1e-9)
        for item in doc["items"]:
            assert item["split"] == "test"
            assert item["intrinsics"]["fx"] == 40.0
            assert (out / item["depth_map"]).is_file()

    def test_short_pose_file_is_schema_drift(self, tmp_path):
        src = build_scannet(tmp_path / "src")
        (src / "pose" / "f1.txt").write_text("1 0 0\n0 1 0\n0 0 1\n")
        with pytest.raises(SchemaError, match="f1"):
            convert.convert_dataset("scannet_pairs", src, tmp_path / "out")

    def test_bad_intrinsics_bottom_row_rejected(self, tmp_path):
        src = build_scannet(tmp_path / "src")
        (src / "intrinsics.txt").write_text("40 0 16\n0 40 12\n0 1 1\n")
        with pytest.raises(SchemaError, match="intrinsics"):
            convert.convert_dataset("scannet_pairs", src, tmp_path / "out")

    def test_malformed_pair_line_names_the_line(self, tmp_path):
        src = build_scannet(tmp_path / "src")
        (src / "pairs.txt").write_text("f0 f1\nf0 f1 f2\n")
        with pytest.raises(SchemaError, match="line 2"):
            convert.convert_dataset("scannet_pairs", src, tmp_path / "out")

    def test_pair_referencing_unknown_frame_fails(self, tmp_path):
        src = build_scannet(tmp_path / "src")
        (src / "pairs.txt").write_text("f0 ghost\n")
        with pytest.raises(SchemaError, match="ghost"):
            convert.convert_dataset("scannet_pairs", src, tmp_path / "out")


# ---------------------------------------------------------------------------
# SPair
# ---------------------------------------------------------------------------


class TestSpair:
    def test_sampling_keypoints_and_variation(self, tmp_path):
        src = build_spair(tmp_path / "src")
        out = tmp_path / "out"
        summary = convert.convert_dataset(
            "spair", src, out, seed=0, pairs_per_class=2)
        assert summary.keypoint_pairs == 4  # 2 per class x 2 classes
        assert summary.pairs == 0

        doc = json.loads((out / "manifest.json").read_text())
        for entry in doc["keypoint_pairs"]:
            assert entry["variation"] in (0, 1, 2)
            assert entry["class"] in ("chair", "plane")
            assert entry["a"] != entry["b"]

        by_id = {item["id"]: item for item in doc["items"]}
        some = doc["keypoint_pairs"][0]
        item = by_id[some["a"]]
        points = {p["name"]: p for p in item["keypoints"]["points"]}
        assert points["0"]["u"] == 10.0 and points["0"]["v"] == 20.0
        assert points["0"]["visible"] is True
        assert points["2"]["visible"] is False
        assert item["keypoints"]["bbox"] == [5, 5, 35, 25]
        assert item["keypoints"]["class"] == item["id"].split("_")[0]
        assert (out / item["image"]).is_file()

    def test_caps_at_available_pairs(self, tmp_path):
        src = build_spair(tmp_path / "src")
        summary = convert.convert_dataset(
            "spair", src, tmp_path / "out", seed=0, pairs_per_class=200)
        assert summary.keypoint_pairs == 6  # only 3 per class exist

    def test_sampling_is_deterministic_per_seed(self, tmp_path):
        src = build_spair(tmp_path / "src")
        outs = []
        for k, seed in enumerate((3, 3)):
            out = tmp_path / f"out{k}"
            convert.convert_dataset("spair", src, out, seed=seed,
                                    pairs_per_class=2)
            outs.append((out / "manifest.json").read_bytes())
        assert outs[0] == outs[1]

    def test_missing_variation_key_names_it(self, tmp_path):
        src = build_spair(tmp_path / "src")
        pair_file = src / "PairAnnotation" / "test" / "chair-0.json"
        pair = json.loads(pair_file.read_text())
        del pair["viewpoint_variation"]
        pair_file.write_text(json.dumps(pair))
        with pytest.raises(SchemaError, match="viewpoint_variation"):
            convert.convert_dataset("spair", src, tmp_path / "out")

    def test_out_of_range_variation_rejected(self, tmp_path):
        src = build_spair(tmp_path / "src")
        pair_file = src / "PairAnnotation" / "test" / "plane-1.json"
        pair = json.loads(pair_file.read_text())
        pair["viewpoint_variation"] = 3
        pair_file.write_text(json.dumps(pair))
        with pytest.raises(SchemaError, match="viewpoint_variation"):
            convert.convert_dataset("spair", src, tmp_path / "out")

    def test_missing_image_annotation_names_it(self, tmp_path):
        src = build_spair(tmp_path / "src")
        (src / "ImageAnnotation" / "chair" / "chair1.json").unlink()
        with pytest.raises(SchemaError, match="chair1"):
            convert.convert_dataset("spair", src, tmp_path / "out")


class TestDispatch:
    def test_unknown_kind_is_a_usage_error(self, tmp_path):
        with pytest.raises(ConfigError, match="nyu"):
            convert.convert_dataset("imagenet", tmp_path, tmp_path / "out")

    def test_missing_source_tree_is_a_data_error(self, tmp_path):
        with pytest.raises(SchemaError, match="intrinsics"):
            convert.convert_dataset("nyu", tmp_path / "absent",
                                    tmp_path / "out")
