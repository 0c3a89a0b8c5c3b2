"""Correspondence matching: brute-force oracles for nearest-neighbor search,
ratio confidence, recall, binning, and keypoint transfer."""

import math

import numpy as np
import pytest

from p3d import geometry as geo
from p3d import matching as mt
from p3d.errors import ConfigError, DataError, DegenerateInputError, ShapeError


# ---------------------------------------------------------------------------
# Independent oracle: explicit double loop, own normalization
# ---------------------------------------------------------------------------


def oracle_matches(feat_a, feat_b, mask_a=None, mask_b=None):
    """Exhaustive reference for dense_nn_matches, written as plain loops."""
    ha, wa, _ = feat_a.shape
    hb, wb, _ = feat_b.shape

    def unit(vec):
        n = math.sqrt(sum(float(x) * float(x) for x in vec))
        if n == 0.0:
            return [0.0] * len(vec)
        return [float(x) / n for x in vec]

    def dist(va, vb):
        s = sum(x * y for x, y in zip(unit(va), unit(vb)))
        s = min(1.0, max(-1.0, s))
        return 1.0 - s

    candidates = []
    for i in range(hb):
        for j in range(wb):
            if mask_b is None or mask_b[i, j]:
                candidates.append((i, j))
    out = []
    for i in range(ha):
        for j in range(wa):
            if mask_a is not None and not mask_a[i, j]:
                continue
            dists = [dist(feat_a[i, j], feat_b[ci, cj]) for ci, cj in candidates]
            b0 = min(range(len(dists)), key=lambda k: (dists[k], k))
            rest = [k for k in range(len(dists)) if k != b0]
            b1 = min(rest, key=lambda k: (dists[k], k))
            d0, d1 = dists[b0], dists[b1]
            r = 1.0 - d0 / d1 if d1 > 0.0 else 0.0
            out.append(((i, j), candidates[b0], candidates[b1], r, d0, d1))
    return out


def assert_matches_equal(matches, reference, r_tol=1e-12):
    assert len(matches) == len(reference)
    for m, (src, q0, q1, r, d0, d1) in zip(matches, reference):
        assert m.src == src
        assert m.dst_first == q0
        assert m.dst_second == q1
        assert abs(m.ratio - r) <= r_tol
        assert abs(m.d_first - d0) <= r_tol
        assert abs(m.d_second - d1) <= r_tol


# ---------------------------------------------------------------------------
# FeatureGrid basics
# ---------------------------------------------------------------------------


def test_feature_grid_validation():
    with pytest.raises(ShapeError):
        mt.FeatureGrid(np.zeros((4, 4)))
    with pytest.raises(DataError):
        mt.FeatureGrid(np.full((2, 2, 3), np.nan))
    with pytest.raises(ConfigError):
        mt.FeatureGrid(np.zeros((2, 2, 3)), block_id=7)
    g = mt.FeatureGrid(np.zeros((2, 4, 3)))
    assert g.image_size == (4, 2)
    assert g.grid_shape == (2, 4)
    assert g.channels == 3


def test_cell_center_and_pixel_round_trip():
    g = mt.FeatureGrid(np.zeros((8, 8, 2)), image_size=(32, 32))
    # scale 4: cell 0 center at (0.5*4 - 0.5) = 1.5
    assert g.cell_center(0, 0) == (1.5, 1.5)
    assert g.cell_center(2, 5) == (5.5 * 4 - 0.5, 2.5 * 4 - 0.5)
    gi, gj = g.pixel_to_grid(*g.cell_center(3, 6))
    assert (gi, gj) == pytest.approx((3.0, 6.0), abs=1e-12)
    # scale 1: centers are the integer pixels themselves
    g1 = mt.FeatureGrid(np.zeros((1, 5, 2)))
    assert g1.cell_center(0, 3) == (3.0, 0.0)


# ---------------------------------------------------------------------------
# dense_nn_matches
# ---------------------------------------------------------------------------


def test_matches_agree_with_double_loop_oracle():
    rng = np.random.default_rng(10)
    for _ in range(10):
        fa = rng.uniform(-1, 1, size=(8, 8, 4))
        fb = rng.uniform(-1, 1, size=(8, 8, 4))
        got = mt.dense_nn_matches(mt.FeatureGrid(fa), mt.FeatureGrid(fb))
        assert_matches_equal(got, oracle_matches(fa, fb))


def test_matches_agree_with_oracle_under_masks():
    rng = np.random.default_rng(11)
    fa = rng.uniform(-1, 1, size=(6, 6, 3))
    fb = rng.uniform(-1, 1, size=(6, 6, 3))
    ma = rng.uniform(size=(6, 6)) > 0.3
    mb = rng.uniform(size=(6, 6)) > 0.3
    assert mb.sum() >= 2
    got = mt.dense_nn_matches(mt.FeatureGrid(fa), mt.FeatureGrid(fb), ma, mb)
    assert_matches_equal(got, oracle_matches(fa, fb, ma, mb))


def test_self_match_one_hot_is_exact():
    # one-hot rows: normalization and dot products are exact in floats
    eye = np.eye(16).reshape(4, 4, 16)
    grid = mt.FeatureGrid(eye)
    for m in mt.dense_nn_matches(grid, grid):
        assert m.dst_first == m.src
        assert m.d_first == 0.0
        assert m.d_second == 1.0
        assert m.ratio == 1.0


def test_self_match_random_features():
    rng = np.random.default_rng(12)
    f = rng.normal(size=(5, 5, 8))
    grid = mt.FeatureGrid(f)
    for m in mt.dense_nn_matches(grid, grid):
        assert m.dst_first == m.src
        assert abs(m.ratio - 1.0) < 1e-12


def test_mask_b_single_row_restricts_destinations():
    rng = np.random.default_rng(13)
    fa = rng.normal(size=(4, 4, 3))
    fb = rng.normal(size=(4, 4, 3))
    mb = np.zeros((4, 4), dtype=bool)
    mb[2, :] = True
    for m in mt.dense_nn_matches(mt.FeatureGrid(fa), mt.FeatureGrid(fb), mask_b=mb):
        assert m.dst_first[0] == 2
        assert m.dst_second[0] == 2


def test_fewer_than_two_candidates_raises():
    fa = mt.FeatureGrid(np.ones((2, 2, 3)))
    mb = np.zeros((2, 2), dtype=bool)
    mb[0, 0] = True
    with pytest.raises(DegenerateInputError):
        mt.dense_nn_matches(fa, fa, mask_b=mb)


def test_channel_mismatch_raises():
    with pytest.raises(ShapeError):
        mt.dense_nn_matches(
            mt.FeatureGrid(np.ones((2, 2, 3))), mt.FeatureGrid(np.ones((2, 2, 4)))
        )


def test_zero_norm_vector_has_distance_one():
    # destination cells: a zero vector plus two anti-aligned vectors (D = 2)
    fa = mt.FeatureGrid(np.array([[[1.0, 0.0]]]))
    fb = mt.FeatureGrid(
        np.array([[[0.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]]])
    )
    (m,) = mt.dense_nn_matches(fa, fb)
    assert m.dst_first == (0, 0)  # the zero vector, at distance exactly 1
    assert m.d_first == 1.0
    assert m.d_second == 2.0
    assert m.ratio == 0.5


def test_tied_perfect_candidates_give_zero_ratio():
    # two identical perfect candidates: D0 = D1 = 0 -> no uniqueness evidence
    v = np.zeros(4)
    v[1] = 1.0
    fa = mt.FeatureGrid(v.reshape(1, 1, 4))
    fb_vals = np.zeros((1, 3, 4))
    fb_vals[0, 0] = v
    fb_vals[0, 1] = v
    fb_vals[0, 2, 2] = 1.0
    (m,) = mt.dense_nn_matches(fa, mt.FeatureGrid(fb_vals))
    assert m.dst_first == (0, 0)  # row-major first occurrence
    assert m.dst_second == (0, 1)
    assert m.ratio == 0.0


def test_scale_invariance_of_matching():
    rng = np.random.default_rng(14)
    fa = rng.normal(size=(5, 5, 6))
    fb = rng.normal(size=(5, 5, 6))
    base = mt.dense_nn_matches(mt.FeatureGrid(fa), mt.FeatureGrid(fb))
    scale_a = rng.uniform(0.1, 10.0, size=(5, 5, 1))
    scale_b = rng.uniform(0.1, 10.0, size=(5, 5, 1))
    scaled = mt.dense_nn_matches(
        mt.FeatureGrid(fa * scale_a), mt.FeatureGrid(fb * scale_b)
    )
    for m1, m2 in zip(base, scaled):
        assert m1.src == m2.src
        assert m1.dst_first == m2.dst_first
        assert m1.dst_second == m2.dst_second
        assert abs(m1.ratio - m2.ratio) < 1e-9


def test_ratio_range_invariant():
    rng = np.random.default_rng(15)
    fa = rng.normal(size=(7, 7, 5))
    fb = rng.normal(size=(7, 7, 5))
    for m in mt.dense_nn_matches(mt.FeatureGrid(fa), mt.FeatureGrid(fb)):
        assert 0.0 <= m.ratio <= 1.0
        assert m.d_first <= m.d_second
        assert m.dst_first != m.dst_second


# ---------------------------------------------------------------------------
# top_k
# ---------------------------------------------------------------------------


def test_top_k_sorting_and_prefix():
    rng = np.random.default_rng(16)
    fa = rng.normal(size=(6, 6, 4))
    fb = rng.normal(size=(6, 6, 4))
    matches = mt.dense_nn_matches(mt.FeatureGrid(fa), mt.FeatureGrid(fb))
    full = mt.top_k(matches, k=len(matches))
    # reference sort
    ref = sorted(matches, key=lambda m: (-m.ratio, m.src[0], m.src[1]))
    assert full == ref
    # prefix property and truncation
    assert mt.top_k(matches, k=5) == full[:5]
    assert mt.top_k(matches, k=1) == [full[0]]
    assert len(mt.top_k(matches, k=10_000)) == len(matches)
    ratios = [m.ratio for m in full]
    assert ratios == sorted(ratios, reverse=True)
    with pytest.raises(ConfigError):
        mt.top_k(matches, k=0)


def test_top_k_tie_break_row_major():
    def m(src, ratio):
        return mt.Match(src=src, dst_first=(0, 0), dst_second=(0, 1),
                        ratio=ratio, d_first=0.1, d_second=0.2)

    matches = [m((1, 1), 0.5), m((0, 2), 0.5), m((0, 1), 0.7), m((2, 0), 0.5)]
    ordered = mt.top_k(matches, k=4)
    assert [x.src for x in ordered] == [(0, 1), (0, 2), (1, 1), (2, 0)]


# ---------------------------------------------------------------------------
# geometric_recall
# ---------------------------------------------------------------------------


INTR32 = geo.Intrinsics(fx=40.0, fy=40.0, cx=15.5, cy=15.5, width=32, height=32)


def identity_rig(depth_value=4.0):
    depth = np.full((32, 32), depth_value)
    frame = geo.CameraFrame(INTR32, geo.Pose.identity(), depth)
    return frame


def shifted_matches():
    matches = []
    for i in range(8):
        for j in range(7):
            matches.append(mt.Match(src=(i, j), dst_first=(i, j + 1),
                                    dst_second=(i, j), ratio=0.5,
                                    d_first=0.0, d_second=0.1))
    return matches


def test_recall_threshold_boundary_one_cell_shift():
    # same camera both sides; matches shifted one grid cell = 4 px error
    frame = identity_rig()
    grid = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(32, 32))
    matches = shifted_matches()
    low = mt.geometric_recall(matches, grid, grid, frame, frame,
                              mode="proj2d", threshold=3.9)
    high = mt.geometric_recall(matches, grid, grid, frame, frame,
                               mode="proj2d", threshold=4.1)
    assert low.recall == 0.0
    assert high.recall == 1.0
    assert low.n_evaluable == len(matches)
    for err in high.errors:
        assert err == pytest.approx(4.0, abs=1e-9)


def test_recall_drops_invalid_depth_from_denominator():
    depth = np.full((32, 32), 4.0)
    depth[:, :16] = 0.0  # invalid half: sources there cannot be lifted
    frame_a = geo.CameraFrame(INTR32, geo.Pose.identity(), depth)
    frame_b = identity_rig()
    grid = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(32, 32))
    matches = [mt.Match(src=(i, j), dst_first=(i, j), dst_second=(i, (j + 1) % 8),
                        ratio=1.0, d_first=0.0, d_second=0.1)
               for i in range(8) for j in range(8)]
    res = mt.geometric_recall(matches, grid, grid, frame_a, frame_b,
                              mode="proj2d", threshold=1.0)
    assert res.n_dropped == 32  # grid columns 0..3 sit over invalid pixels
    assert res.n_evaluable == 32
    assert res.recall == 1.0
    assert sum(e is None for e in res.errors) == 32


def test_recall_undefined_when_nothing_evaluable():
    depth = np.zeros((32, 32))
    frame = geo.CameraFrame(INTR32, geo.Pose.identity(), depth)
    grid = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(32, 32))
    matches = shifted_matches()
    res = mt.geometric_recall(matches, grid, grid, frame, frame,
                              mode="proj2d", threshold=1.0)
    assert res.recall is None
    assert res.n_evaluable == 0
    assert res.n_dropped == len(matches)


def test_recall_behind_camera_counts_as_incorrect():
    frame_a = identity_rig()
    pose_b = geo.Pose(np.eye(3), np.array([0.0, 0.0, 100.0]))
    frame_b = geo.CameraFrame(INTR32, pose_b, np.full((32, 32), 4.0))
    grid = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(32, 32))
    matches = shifted_matches()
    res = mt.geometric_recall(matches, grid, grid, frame_a, frame_b,
                              mode="proj2d", threshold=1e9)
    assert res.recall == 0.0
    assert res.n_evaluable == len(matches)
    assert all(e == geo.BEHIND_CAMERA for e in res.errors)


def test_recall_metric3d_matches_direct_oracle():
    rng = np.random.default_rng(17)
    depth_a = rng.uniform(2.0, 6.0, size=(32, 32))
    depth_b = rng.uniform(2.0, 6.0, size=(32, 32))
    pose_b = geo.Pose(
        np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]),
        np.array([0.3, -0.2, 0.1]),
    )
    frame_a = geo.CameraFrame(INTR32, geo.Pose.identity(), depth_a)
    frame_b = geo.CameraFrame(INTR32, pose_b, depth_b)
    grid = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(32, 32))
    matches = [mt.Match(src=(i, j), dst_first=((i + 1) % 8, j), dst_second=(i, j),
                        ratio=0.5, d_first=0.0, d_second=0.1)
               for i in range(8) for j in range(8)]
    threshold = 1.0
    res = mt.geometric_recall(matches, grid, grid, frame_a, frame_b,
                              mode="metric3d", threshold=threshold)
    correct = 0
    for m, err in zip(matches, res.errors):
        direct = geo.metric_error_3d(grid.cell_center(*m.src),
                                     grid.cell_center(*m.dst_first),
                                     frame_a, frame_b)
        assert err == pytest.approx(direct, abs=1e-12)
        if direct < threshold:
            correct += 1
    assert res.recall == pytest.approx(correct / len(matches))


def test_recall_validates_configuration():
    frame = identity_rig()
    grid = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(32, 32))
    with pytest.raises(ConfigError):
        mt.geometric_recall([], grid, grid, frame, frame, mode="bogus", threshold=1.0)
    with pytest.raises(ConfigError):
        mt.geometric_recall([], grid, grid, frame, frame, threshold=0.0)
    wrong = mt.FeatureGrid(np.ones((8, 8, 2)), image_size=(64, 64))
    with pytest.raises(ConfigError):
        mt.geometric_recall([], wrong, grid, frame, frame, threshold=1.0)


# ---------------------------------------------------------------------------
# Viewpoint binning
# ---------------------------------------------------------------------------


def test_bin_pairs_half_open_rule():
    edges = mt.DEFAULT_SCENE_EDGES  # (0, 15, 30, 60, 180)
    binning = mt.bin_pairs([15.0, 0.0, 29.999, 60.0, 179.999], edges)
    assert binning.assignments == (1, 0, 1, 3, 3)
    assert binning.n_excluded == 0
    assert binning.labels() == ["0-15", "15-30", "30-60", "60-180"]
    assert binning.counts() == [1, 2, 0, 2]
    assert binning.indices_in(1) == [0, 2]


def test_bin_pairs_exclusion():
    binning = mt.bin_pairs([150.0, 45.0, 120.0], mt.DEFAULT_OBJECT_EDGES)
    assert binning.assignments == (None, 1, None)  # 120 is the open upper edge
    assert binning.n_excluded == 2


def test_bin_pairs_validates_edges():
    with pytest.raises(ConfigError):
        mt.bin_pairs([1.0], edges=(0.0,))
    with pytest.raises(ConfigError):
        mt.bin_pairs([1.0], edges=(0.0, 10.0, 10.0))
    with pytest.raises(DataError):
        mt.bin_pairs([float("nan")], edges=(0.0, 10.0))


def test_bin_pairs_from_poses():
    rot = geo.Pose(
        np.array([[math.cos(math.radians(20)), 0, math.sin(math.radians(20))],
                  [0, 1, 0],
                  [-math.sin(math.radians(20)), 0, math.cos(math.radians(20))]]),
        np.zeros(3))
    angle = geo.relative_angle(rot, geo.Pose.identity())
    binning = mt.bin_pairs([angle], mt.DEFAULT_SCENE_EDGES)
    assert binning.assignments == (1,)


# ---------------------------------------------------------------------------
# Keypoint transfer, PCK, confusion
# ---------------------------------------------------------------------------


def test_bilinear_sample_hand_values():
    vals = np.array([[[0.0], [4.0]], [[8.0], [12.0]]])  # 2x2 grid, 1 channel
    assert mt.bilinear_sample(vals, 0.0, 0.0) == pytest.approx([0.0])
    assert mt.bilinear_sample(vals, 0.0, 1.0) == pytest.approx([4.0])
    assert mt.bilinear_sample(vals, 0.5, 0.5) == pytest.approx([6.0])
    assert mt.bilinear_sample(vals, 0.25, 0.75) == pytest.approx(
        [(1 - 0.75) * ((1 - 0.25) * 0 + 0.25 * 8) + 0.75 * ((1 - 0.25) * 4 + 0.25 * 12)]
    )
    # clamped outside the center range
    assert mt.bilinear_sample(vals, -3.0, -3.0) == pytest.approx([0.0])
    assert mt.bilinear_sample(vals, 5.0, 5.0) == pytest.approx([12.0])


def test_transfer_identity_features_map_to_own_cells():
    eye = np.eye(16).reshape(4, 4, 16)
    grid = mt.FeatureGrid(eye, image_size=(16, 16))  # scale 4
    kps = mt.KeypointSet(
        keypoints=(
            mt.Keypoint("nose", *grid.cell_center(1, 2)),
            mt.Keypoint("tail", *grid.cell_center(3, 0)),
        ),
        bbox=(0, 0, 16, 16),
    )
    res = mt.transfer_keypoints(grid, grid, kps)
    assert res.skipped == ()
    assert res.predictions["nose"] == grid.cell_center(1, 2)
    assert res.predictions["tail"] == grid.cell_center(3, 0)


def test_transfer_agrees_with_exhaustive_oracle():
    rng = np.random.default_rng(18)
    fa = mt.FeatureGrid(rng.normal(size=(5, 6, 7)), image_size=(24, 20))
    fb = mt.FeatureGrid(rng.normal(size=(6, 5, 7)), image_size=(30, 18))
    kps = mt.KeypointSet(
        keypoints=tuple(
            mt.Keypoint(f"k{n}", rng.uniform(0, 23), rng.uniform(0, 19))
            for n in range(6)
        ),
        bbox=(0, 0, 24, 20),
    )
    res = mt.transfer_keypoints(fa, fb, kps)
    for kp in kps.keypoints:
        gi, gj = fa.pixel_to_grid(kp.u, kp.v)
        vec = mt.bilinear_sample(fa.values, gi, gj)
        vec = vec / np.linalg.norm(vec)
        best = None
        best_key = None
        for i in range(6):
            for j in range(5):
                cand = fb.values[i, j] / np.linalg.norm(fb.values[i, j])
                d = 1.0 - min(1.0, max(-1.0, float(np.dot(vec, cand))))
                key = (d, i, j)
                if best_key is None or key < best_key:
                    best_key = key
                    best = (i, j)
        assert res.predictions[kp.name] == fb.cell_center(*best)


def test_transfer_skips_keypoints_outside_image():
    grid = mt.FeatureGrid(np.eye(4).reshape(2, 2, 4), image_size=(8, 8))
    kps = mt.KeypointSet(
        keypoints=(
            mt.Keypoint("in", 2.0, 2.0),
            mt.Keypoint("out", 50.0, 2.0),
            mt.Keypoint("hidden", 2.0, 2.0, visible=False),
        ),
        bbox=(0, 0, 8, 8),
    )
    res = mt.transfer_keypoints(grid, grid, kps)
    assert "in" in res.predictions
    assert res.skipped == ("out",)
    assert "hidden" not in res.predictions


def test_pck_boundary_inclusive():
    gt = mt.KeypointSet(
        keypoints=(mt.Keypoint("a", 10.0, 10.0), mt.Keypoint("b", 30.0, 10.0)),
        bbox=(0.0, 0.0, 40.0, 20.0),  # max side 40 -> threshold 4 at alpha 0.1
    )
    exact = mt.pck({"a": (10.0, 10.0), "b": (30.0, 10.0)}, gt)
    assert exact.fraction == 1.0
    assert exact.percent == 100.0
    boundary = mt.pck({"a": (14.0, 10.0), "b": (30.0, 14.0)}, gt)
    assert boundary.fraction == 1.0  # distance exactly alpha*max(w,h) counts
    beyond = mt.pck({"a": (14.001, 10.0), "b": (0.0, 0.0)}, gt)
    assert beyond.fraction == 0.0
    assert beyond.n_scored == 2


def test_pck_scores_only_matched_visible_keypoints():
    gt = mt.KeypointSet(
        keypoints=(mt.Keypoint("a", 5.0, 5.0), mt.Keypoint("b", 9.0, 9.0, visible=False)),
        bbox=(0, 0, 10, 10),
    )
    res = mt.pck({"a": (5.0, 5.0), "b": (9.0, 9.0), "c": (1.0, 1.0)}, gt)
    assert res.n_scored == 1
    assert res.fraction == 1.0
    empty = mt.pck({"zz": (0.0, 0.0)}, gt)
    assert empty.fraction is None
    assert empty.n_scored == 0
    with pytest.raises(ConfigError):
        mt.pck({}, gt, alpha=0.0)


def test_confusion_perfect_predictions_identity():
    names = ("a", "b", "c")
    gt = mt.KeypointSet(
        keypoints=tuple(mt.Keypoint(n, 10.0 * k, 5.0) for k, n in enumerate(names)),
        bbox=(0, 0, 30, 10),
    )
    preds = {n: (10.0 * k, 5.0) for k, n in enumerate(names)}
    res = mt.keypoint_confusion([(preds, gt)], names)
    np.testing.assert_allclose(res.normalized(), np.eye(3))
    np.testing.assert_allclose(res.normalized().sum(axis=1), 1.0, atol=1e-9)


def test_confusion_all_mass_in_one_column():
    names = ("a", "b", "c")
    gt = mt.KeypointSet(
        keypoints=tuple(mt.Keypoint(n, 10.0 * k, 5.0) for k, n in enumerate(names)),
        bbox=(0, 0, 30, 10),
    )
    preds = {n: (20.0, 5.0) for n in names}  # everything lands on c
    res = mt.keypoint_confusion([(preds, gt)], names)
    normalized = res.normalized()
    np.testing.assert_allclose(normalized[:, 2], 1.0)
    np.testing.assert_allclose(normalized[:, :2], 0.0)


def test_confusion_matches_exhaustive_oracle():
    rng = np.random.default_rng(19)
    names = ("a", "b", "c", "d")
    counts_ref = np.zeros((4, 4))
    instances = []
    for _ in range(5):
        gt = mt.KeypointSet(
            keypoints=tuple(
                mt.Keypoint(n, rng.uniform(0, 20), rng.uniform(0, 20)) for n in names
            ),
            bbox=(0, 0, 20, 20),
        )
        preds = {n: (rng.uniform(0, 20), rng.uniform(0, 20)) for n in names}
        instances.append((preds, gt))
        for qi, n in enumerate(names):
            u, v = preds[n]
            dists = [math.hypot(u - kp.u, v - kp.v) for kp in gt.keypoints]
            counts_ref[qi, int(np.argmin(dists))] += 1
    res = mt.keypoint_confusion(instances, names)
    np.testing.assert_allclose(res.counts, counts_ref)
    np.testing.assert_allclose(res.normalized().sum(axis=1), 1.0, atol=1e-9)


def test_confusion_skips_unmatched_queries():
    names = ("a", "b")
    gt = mt.KeypointSet(
        keypoints=(mt.Keypoint("a", 0.0, 0.0), mt.Keypoint("b", 5.0, 0.0, visible=False)),
        bbox=(0, 0, 10, 10),
    )
    res = mt.keypoint_confusion([({"a": (0.0, 0.0), "b": (5.0, 0.0)}, gt)], names)
    assert res.counts[0, 0] == 1.0
    assert res.counts[1].sum() == 0.0  # b has no visible true match
    assert res.row_totals().tolist() == [1.0, 0.0]


def test_keypoint_set_validation():
    with pytest.raises(ConfigError):
        mt.KeypointSet(keypoints=(), bbox=(0, 0, 0, 10))
    with pytest.raises(ConfigError):
        mt.KeypointSet(keypoints=(), bbox=(0, 0, 10, 10), variation=5)
    with pytest.raises(ConfigError):
        mt.KeypointSet(
            keypoints=(mt.Keypoint("x", 0, 0), mt.Keypoint("x", 1, 1)),
            bbox=(0, 0, 10, 10),
        )


# ---------------------------------------------------------------------------
# Plumbing helpers
# ---------------------------------------------------------------------------


def test_mask_to_grid_samples_cell_centers():
    image_mask = np.zeros((8, 8), dtype=bool)
    image_mask[:, 4:] = True  # right half
    grid_mask = mt.mask_to_grid(image_mask, (2, 2))
    # cell centers at pixels ~(1.5, 5.5) -> rint gives 2 and 6
    assert grid_mask.tolist() == [[False, True], [False, True]]


def test_scale_threshold_px():
    assert mt.scale_threshold_px(10.0, (640, 480)) == pytest.approx(10.0)
    assert mt.scale_threshold_px(10.0, (320, 240)) == pytest.approx(5.0)
    with pytest.raises(ConfigError):
        mt.scale_threshold_px(0.0, (640, 480))


def test_points_diagonal():
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0], [0.5, 1.0, 1.0]])
    assert mt.points_diagonal(pts) == pytest.approx(3.0)
    with pytest.raises(ShapeError):
        mt.points_diagonal(np.zeros((3, 2)))
