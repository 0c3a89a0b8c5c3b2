"""Cross-implementation file interop with the evaluation engine.

These tests are the one place the evaluation engine (``p3d``) is imported:
files written by this package are read back by the engine's own readers
(and vice versa) to prove the two independent implementations agree on the
wire formats bit for bit.
"""

import numpy as np
import pytest
from PIL import Image

import p3d.datastore as engine_store
from p3d_extractor import features, formats, models


def checkerboard_image(path, size=(96, 64)) -> None:
    """A deterministic RGB fixture image with gradients and a checkerboard."""
    w, h = size
    y, x = np.mgrid[0:h, 0:w]
    r = (255 * x / (w - 1)).astype(np.uint8)
    g = (255 * y / (h - 1)).astype(np.uint8)
    b = (255 * (((x // 8) + (y // 8)) % 2)).astype(np.uint8)
    Image.fromarray(np.stack([r, g, b], axis=2), "RGB").save(path)


class TestFeatureFileInterop:
    def test_extractor_feature_file_reads_back_bitwise_in_engine(
        self, tmp_path
    ):
        """Acceptance: an extractor-written feature file, read by the
        evaluation engine, round-trips its payload bitwise on a fixture
        image."""
        image = tmp_path / "fixture.png"
        checkerboard_image(image)
        spec = models.get_model("pyramid16")
        written = features.extract_features(spec, [image], tmp_path / "out")
        assert len(written) == 1

        engine_view = engine_store.read_feature_file(written[0])
        assert engine_view.model_id == "pyramid16"
        assert tuple(b.block_id for b in engine_view.blocks) == (0, 1, 2, 3)

        own_view = formats.read_feature_file(written[0])
        for ours, theirs in zip(own_view.blocks, engine_view.blocks):
            assert theirs.values.dtype == np.float32
            assert ours.values.shape == theirs.values.shape
            assert ours.values.tobytes() == theirs.values.tobytes()

        # Stronger: the engine re-serializing what it read reproduces the
        # extractor's file byte for byte, so header conventions match too.
        rewritten = tmp_path / "rewritten.p3df"
        engine_store.write_feature_file(rewritten, engine_view)
        assert rewritten.read_bytes() == written[0].read_bytes()

    def test_engine_written_features_read_back_bitwise_here(self, tmp_path):
        rng = np.random.default_rng(11)
        blocks = tuple(
            engine_store.FeatureBlock(
                block_id=k,
                values=rng.standard_normal((5, 7, 3 + k)).astype(np.float32),
            )
            for k in range(4)
        )
        data = engine_store.FeatureFileData(model_id="engine-made", blocks=blocks)
        path = tmp_path / "engine.p3df"
        engine_store.write_feature_file(path, data)

        ours = formats.read_feature_file(path)
        assert ours.model_id == "engine-made"
        for theirs, mine in zip(blocks, ours.blocks):
            assert mine.values.tobytes() == theirs.values.tobytes()

    def test_identical_payloads_produce_identical_files_across_writers(
        self, tmp_path
    ):
        rng = np.random.default_rng(3)
        values = rng.standard_normal((4, 6, 5)).astype(np.float32)
        ours = tmp_path / "ours.p3df"
        theirs = tmp_path / "theirs.p3df"
        formats.write_feature_file(
            ours,
            formats.FeatureGrids("twin", (formats.FeatureBlock(2, values),)),
        )
        engine_store.write_feature_file(
            theirs,
            engine_store.FeatureFileData(
                "twin", (engine_store.FeatureBlock(2, values),)
            ),
        )
        assert ours.read_bytes() == theirs.read_bytes()


class TestDenseMapInterop:
    def test_depth_both_directions(self, tmp_path):
        rng = np.random.default_rng(5)
        depth = np.abs(rng.standard_normal((9, 11))).astype(np.float32)
        ours = tmp_path / "ours.p3dm"
        formats.write_depth_map(ours, depth)
        engine_map = engine_store.read_dense_map(ours)
        assert engine_map.kind == engine_store.MAP_KIND_DEPTH
        assert engine_map.values.tobytes() == depth.tobytes()

        theirs = tmp_path / "theirs.p3dm"
        engine_store.write_dense_map(
            theirs, engine_store.DenseMap(engine_store.MAP_KIND_DEPTH, depth)
        )
        kind, back = formats.read_dense_map(theirs)
        assert kind == "depth"
        assert back.tobytes() == depth.tobytes()
        assert ours.read_bytes() == theirs.read_bytes()

    def test_normals_interleaving_matches(self, tmp_path):
        rng = np.random.default_rng(6)
        raw = rng.standard_normal((3, 4, 5))
        normals = (raw / np.linalg.norm(raw, axis=0)).astype(np.float32)
        ours = tmp_path / "ours.p3dm"
        formats.write_normal_map(ours, normals)
        engine_map = engine_store.read_dense_map(ours)
        assert engine_map.kind == engine_store.MAP_KIND_NORMAL3
        assert engine_map.values.shape == (3, 4, 5)
        assert np.array_equal(engine_map.values, normals)

        theirs = tmp_path / "theirs.p3dm"
        engine_store.write_dense_map(
            theirs,
            engine_store.DenseMap(engine_store.MAP_KIND_NORMAL3, normals),
        )
        assert ours.read_bytes() == theirs.read_bytes()

    def test_masks_both_directions(self, tmp_path):
        mask = np.arange(12).reshape(3, 4) % 3 == 0
        ours = tmp_path / "ours.p3dm"
        formats.write_mask_map(ours, mask)
        engine_map = engine_store.read_dense_map(ours)
        assert engine_map.kind == engine_store.MAP_KIND_MASK
        assert np.array_equal(engine_map.values, mask)

        theirs = tmp_path / "theirs.p3dm"
        engine_store.write_dense_map(
            theirs, engine_store.DenseMap(engine_store.MAP_KIND_MASK, mask)
        )
        assert ours.read_bytes() == theirs.read_bytes()


class TestManifestInterop:
    def test_extractor_manifest_loads_in_engine(self, tmp_path):
        depth = np.full((4, 4), 2.0, dtype=np.float32)
        maps = tmp_path / "maps"
        maps.mkdir()
        formats.write_depth_map(maps / "a_depth.p3dm", depth)
        formats.write_depth_map(maps / "b_depth.p3dm", depth)
        intr = {"fx": 4.0, "fy": 4.0, "cx": 2.0, "cy": 2.0,
                "width": 4, "height": 4}
        eye = {"rotation": np.eye(3).tolist(), "translation": [0.0, 0.0, 0.0]}
        doc = {
            "version": 1,
            "items": [
                {"id": "a", "width": 4, "height": 4, "intrinsics": intr,
                 "pose": eye, "depth_map": "maps/a_depth.p3dm",
                 "split": "test"},
                {"id": "b", "width": 4, "height": 4, "intrinsics": intr,
                 "pose": eye, "depth_map": "maps/b_depth.p3dm",
                 "split": "test"},
            ],
            "pairs": [{"a": "a", "b": "b", "angle_deg": 12.5}],
            "keypoint_pairs": [],
        }
        manifest_path = tmp_path / "manifest.json"
        formats.write_manifest_document(manifest_path, doc)

        manifest = engine_store.load_manifest(manifest_path)
        assert sorted(manifest.items) == ["a", "b"]
        assert manifest.pairs[0].angle_deg == pytest.approx(12.5)
        item = manifest.item("a")
        assert item.split == "test"
        assert item.depth_map.endswith("a_depth.p3dm")
