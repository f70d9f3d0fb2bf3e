import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from voxelbench.errors import FormatError, GeometryError, TrainingError
from voxelbench.phantom import PhantomSpec, generate_case
from voxelbench.voiforest import (
    Forest,
    ForestConfig,
    RegressionTree,
    WallPrediction,
    box_iou,
    build_feature_geometry,
    compute_feature_vector,
    compute_features,
    compute_offset,
    evaluate_bbox,
    grow_tree,
    load_forest,
    predict_bbox,
    predict_walls,
    sample_candidate_voxels,
    save_forest,
    train_forest,
    voxel_world,
    walls_from_offset,
)
from voxelbench.volgrid import BoundingBoxMM, Volume

walls = st.tuples(*(st.floats(-200, 200),) * 6).map(
    lambda w: BoundingBoxMM(*sorted(w[:2]), *sorted(w[2:4]), *sorted(w[4:]))
)
points = st.tuples(*(st.floats(-300, 300),) * 3).map(np.array)


def leaf_tree(offset, count=1):
    return RegressionTree(
        np.array([-1]), np.zeros(1), np.array([-1]), np.array([-1]),
        np.asarray(offset, float).reshape(1, 6), np.array([count]),
    )


# ---------------------------------------------------------------------------
# feature geometry


def test_default_geometry():
    g = build_feature_geometry()
    assert g.n_boxes == 50 and g.directions.shape == (50, 3)
    assert g.sphere_radii == (50.0, 25.0, 12.5)
    np.testing.assert_allclose(np.linalg.norm(g.directions, axis=1), 1.0, atol=1e-9)
    radii = np.linalg.norm(g.displacements, axis=1)
    np.testing.assert_allclose(radii, np.repeat([50, 25, 12.5], [17, 17, 16]))
    np.testing.assert_array_equal(g.directions, build_feature_geometry().directions)
    with pytest.raises(ValueError):
        g.directions[0, 0] = 1.0


def test_geometry_rejects_bad_config():
    for kwargs in (
        dict(sphere_radii=(50, -1, 12)),
        dict(box_edge=0),
        dict(sphere_radii=(10, 10, 5)),
        dict(boxes_per_sphere=(17, 17)),
    ):
        with pytest.raises(ValueError):
            build_feature_geometry(**kwargs)


# ---------------------------------------------------------------------------
# candidate voxels


@given(
    st.tuples(*(st.integers(1, 16),) * 3),
    st.floats(0, 40),
    st.integers(1, 3),
    st.tuples(*(st.integers(-20, 20),) * 3),
)
@settings(max_examples=80, deadline=None)
def test_candidates_match_cylinder_scan(dims, radius, stride, origin):
    v = Volume(np.zeros(dims, np.int16), (2.0, 2.0, 2.0), origin)
    cx = origin[0] + (dims[0] - 1)
    cy = origin[1] + (dims[1] - 1)
    expected = {
        (i, j, k)
        for i, j, k in itertools.product(*(range(0, n, stride) for n in dims))
        if (origin[0] + 2 * i - cx) ** 2 + (origin[1] + 2 * j - cy) ** 2 <= radius**2
    }
    if not expected:
        with pytest.raises(GeometryError):
            sample_candidate_voxels(v, radius, stride)
        return
    got = sample_candidate_voxels(v, radius, stride)
    assert len(got) == len(expected)
    assert set(map(tuple, got.tolist())) == expected


def test_candidates_vacuous_and_axial():
    v = Volume(np.zeros((5, 6, 7), np.int16), (2.0, 2.0, 2.0))
    assert len(sample_candidate_voxels(v, 100.0)) == 5 * 6 * 7
    line = Volume(np.zeros((1, 1, 9), np.int16))
    np.testing.assert_array_equal(sample_candidate_voxels(line, 0.0)[:, 2], np.arange(9))
    with pytest.raises(GeometryError):
        sample_candidate_voxels(Volume(np.zeros((4, 4, 4), np.int16), (2.0, 2.0, 2.0)), 0.5)


# ---------------------------------------------------------------------------
# features


def brute_box_mean(arr, spacing, origin, center, edge, fill=-1024.0):
    vals = []
    for idx in itertools.product(*(range(n) for n in arr.shape)):
        w = np.asarray(origin) + np.asarray(idx) * spacing
        if np.all(np.abs(w - center) <= edge / 2):
            vals.append(float(arr[idx]))
    return np.mean(vals) if vals else fill


@given(
    hnp.arrays(np.float32, (16, 16, 16), elements=st.floats(-1000, 1000, width=32)),
    st.tuples(*(st.floats(-10, 40),) * 3),
    st.sampled_from([2.0, 3.0, 6.0, 7.3]),
)
@settings(max_examples=25, deadline=None)
def test_single_box_mean_matches_enumeration(arr, center, edge):
    v = Volume(arr, (2.0, 2.0, 2.0), (1.0, -3.0, 0.5))
    g = build_feature_geometry(sphere_radii=(1e-6,), boxes_per_sphere=(1,), box_edge=edge)
    got = compute_features(v, np.array([center]), g)[0, 0]
    assert got == pytest.approx(brute_box_mean(arr, 2.0, v.origin, np.array(center), edge), abs=1e-6, rel=1e-6)


def test_constant_volume_and_out_of_field():
    v = Volume(np.full((64, 64, 64), 37, np.int16), (2.0, 2.0, 2.0))
    f = compute_feature_vector(v, (63.0, 63.0, 63.0), build_feature_geometry())
    assert f.shape == (50,)
    np.testing.assert_array_equal(f, 37.0)
    far = compute_feature_vector(v, (1000.0, 63.0, 63.0), build_feature_geometry())
    np.testing.assert_array_equal(far, -1024.0)


@given(st.tuples(*(st.integers(-40, 40),) * 3), st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_features_invariant_under_joint_translation(shift, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(-300, 300, size=(20, 20, 20)).astype(np.int16)
    pts = rng.uniform(-10, 50, size=(30, 3))
    g = build_feature_geometry(sphere_radii=(15, 8, 4))
    a = compute_features(Volume(arr, (2.0, 2.0, 2.0)), pts, g)
    b = compute_features(Volume(arr, (2.0, 2.0, 2.0), shift), pts + np.array(shift, float), g)
    np.testing.assert_array_equal(a, b)


def test_features_require_isotropic_grid():
    with pytest.raises(GeometryError):
        compute_features(Volume(np.zeros((4, 4, 4), np.int16), (1, 2, 1)), np.zeros((1, 3)), build_feature_geometry())


# ---------------------------------------------------------------------------
# offsets


def test_offset_hand_example_and_corner():
    box = BoundingBoxMM(0, 40, 0, 60, 20, 80)
    np.testing.assert_array_equal(compute_offset((10, 20, 30), box), [10, -30, 20, -40, 10, -50])
    d = compute_offset((0, 0, 20), box)
    assert d[0] == d[2] == d[4] == 0


@given(points, walls)
@settings(max_examples=300, deadline=None)
def test_offset_inversion_recovers_walls(p, box):
    back = walls_from_offset(p, compute_offset(p, box))
    np.testing.assert_allclose(back, box.as_array(), rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# trees and forests


def test_constant_features_give_single_exact_leaf():
    rng = np.random.default_rng(0)
    x = np.full((64, 50), 3.0, np.float32)
    y = rng.normal(size=(64, 6))
    tree = grow_tree(x, y, ForestConfig(min_leaf=4), rng)
    assert tree.n_nodes == 1
    np.testing.assert_allclose(tree.value[0], y.mean(0))


def test_identical_boxes_and_features_reproduce_offset_exactly():
    # one candidate voxel per case, same box: every sample has target d(p)
    box = BoundingBoxMM(-5, 3, -2, 7, 1, 4)
    cases = [(Volume(np.full((1, 1, 1), 10 * k, np.int16), (2.0, 2.0, 2.0)), box) for k in range(3)]
    cfg = ForestConfig(n_trees=3, min_leaf=1, train_stride=1, predict_stride=1)
    forest = train_forest(cases, "liver", cfg)
    d = compute_offset((0.0, 0.0, 0.0), box)
    for tree in forest.trees:
        for leaf in np.flatnonzero(tree.feature < 0):
            np.testing.assert_array_equal(tree.value[leaf], d)
    box_pred, spread = predict_bbox(forest, cases[0][0])
    assert box_pred == box
    np.testing.assert_array_equal(spread, 0.0)


def test_depth_zero_forest_single_voxel_box():
    o = np.array([3.0, -4.0, 1.0, -2.0, 0.5, -6.0])
    cfg = ForestConfig(n_trees=2, predict_stride=1, geometry=build_feature_geometry())
    forest = Forest([leaf_tree(o), leaf_tree(o)], cfg.geometry, "spleen", cfg)
    v = Volume(np.zeros((1, 1, 1), np.int16), (2.0, 2.0, 2.0), (10.0, 20.0, 30.0))
    box, _ = predict_bbox(forest, v)
    np.testing.assert_array_equal(box.as_array(), np.repeat([10.0, 20.0, 30.0], 2) - o)


def test_median_of_symmetric_votes():
    w = np.array([-5.0, 5.0, -6.0, 6.0, -7.0, 7.0])
    trees = [leaf_tree(-w + s) for s in (-3.0, -1.0, 1.0, 3.0, 0.0)]
    cfg = ForestConfig(n_trees=5, predict_stride=1)
    forest = Forest(trees, cfg.geometry, "liver", cfg)
    pred = predict_walls(forest, Volume(np.zeros((1, 1, 1), np.int16)))
    np.testing.assert_array_equal(pred.walls, w)


def test_tree_invariants_and_growth_limits():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(500, 5))
    y = np.column_stack([x[:, 0] * 10 + (x[:, 1] > 0) * 5] * 6)
    cfg = ForestConfig(min_leaf=10, max_depth=4, candidate_splits=20)
    tree = grow_tree(x, y, cfg, rng)
    internal = tree.feature >= 0
    assert np.all(tree.left[internal] > 0) and np.all(tree.right[internal] > 0)
    assert np.all(tree.count[~internal] >= 10)
    assert tree.depth() <= 4 and tree.n_nodes > 1
    # leaf counts partition the samples
    assert tree.count[~internal].sum() == 500
    np.testing.assert_array_equal(np.bincount(tree.apply(x), minlength=tree.n_nodes)[~internal], tree.count[~internal])
    with pytest.raises(TrainingError):
        grow_tree(x[:5], y[:5], cfg, rng)


@pytest.fixture(scope="module")
def small_forest_cases():
    cases = [generate_case(PhantomSpec(), s) for s in range(3)]
    return [(c.volume, c.gt_boxes["kidney_left"]) for c in cases]


SMALL = dict(n_trees=2, max_depth=6, candidate_splits=10, train_stride=4, predict_stride=4)


def test_forest_determinism_and_file_round_trip(tmp_path, small_forest_cases):
    cfg = ForestConfig(seed=9, **SMALL)
    a = train_forest(small_forest_cases[:2], "kidney_left", cfg)
    b = train_forest(small_forest_cases[:2], "kidney_left", cfg)
    save_forest(a, tmp_path / "a.forest")
    save_forest(b, tmp_path / "b.forest")
    assert (tmp_path / "a.forest").read_bytes() == (tmp_path / "b.forest").read_bytes()
    back = load_forest(tmp_path / "a.forest")
    assert back.organ == "kidney_left" and back.train_meta == a.train_meta
    save_forest(back, tmp_path / "c.forest")
    assert (tmp_path / "c.forest").read_bytes() == (tmp_path / "a.forest").read_bytes()
    vol = small_forest_cases[2][0]
    np.testing.assert_array_equal(predict_walls(back, vol).walls, predict_walls(a, vol).walls)
    c = train_forest(small_forest_cases[:2], "kidney_left", ForestConfig(seed=10, **SMALL))
    save_forest(c, tmp_path / "c.forest")
    assert (tmp_path / "c.forest").read_bytes() != (tmp_path / "a.forest").read_bytes()


def test_forest_file_errors(tmp_path, small_forest_cases):
    forest = train_forest(small_forest_cases[:2], "kidney_left", ForestConfig(**SMALL))
    save_forest(forest, tmp_path / "f")
    lines = (tmp_path / "f").read_text().splitlines()
    for bad in (
        ["not-a-forest"] + lines[1:],
        lines[:-1],
        lines[:1],
        lines + ["L 0 0 0 0 0 0 1"],
        [lines[0]] + ["tree 5 1"] + lines[2:],
    ):
        (tmp_path / "g").write_text("\n".join(bad) + "\n")
        with pytest.raises(FormatError):
            load_forest(tmp_path / "g")
    (tmp_path / "g").write_text("")
    with pytest.raises(FormatError):
        load_forest(tmp_path / "g")


def test_training_needs_two_cases(small_forest_cases):
    with pytest.raises(TrainingError):
        train_forest(small_forest_cases[:1], "kidney_left")


# ---------------------------------------------------------------------------
# evaluation


def test_iou_cases():
    cube = BoundingBoxMM(0, 1, 0, 1, 0, 1)
    assert box_iou(cube, cube) == 1.0
    assert box_iou(cube, BoundingBoxMM(0.5, 1.5, 0, 1, 0, 1)) == pytest.approx(1 / 3, abs=1e-12)
    assert box_iou(cube, BoundingBoxMM(2, 3, 0, 1, 0, 1)) == 0.0
    ev = evaluate_bbox(cube, cube)
    np.testing.assert_array_equal(ev["wall_abs_errors"], 0.0)
    assert ev["iou_3d"] == 1.0


@given(walls, walls)
@settings(max_examples=100, deadline=None)
def test_iou_bounded_and_symmetric(a, b):
    iou = box_iou(a, b)
    assert 0.0 <= iou <= 1.0
    assert iou == pytest.approx(box_iou(b, a), abs=1e-12)


def test_ordering_violation_reported_not_fixed():
    pred = WallPrediction(np.array([5.0, 1.0, 0.0, 1.0, 3.0, 2.0]), np.zeros(6))
    assert pred.ordering_violations == ["left/right", "head/foot"]
    with pytest.raises(GeometryError, match="left/right"):
        pred.box()


def test_voxel_world():
    v = Volume(np.zeros((3, 3, 3), np.int16), (2.0, 2.0, 2.0), (1.0, 2.0, 3.0))
    np.testing.assert_array_equal(voxel_world(v, [[1, 2, 0]]), [[3.0, 6.0, 3.0]])
