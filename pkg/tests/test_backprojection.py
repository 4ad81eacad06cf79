import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pointrecon.backprojection import (
    VARIANTS,
    FeatureMap2D,
    GuidanceStrategy,
    backproject_dense,
    border_weight,
    feature_coords,
    point_backproject,
)
from pointrecon.geometry import GridSpec, Intrinsics, Pose, look_at
from pointrecon.scene import DepthMap
from pointrecon.tsdf import fuse_depths

K = Intrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)
STRIDE = 4
HW = (K.height // STRIDE, K.width // STRIDE)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def setup_views(rng, n=3):
    spec = GridSpec((-0.2, -0.2, -0.2), 0.05, (8, 8, 8))
    cams, depths, feats = [], [], []
    for _ in range(n):
        d = rng.normal(size=3)
        pose = look_at(1.5 * d / np.linalg.norm(d), rng.normal(scale=0.05, size=3))
        cams.append((K, pose))
        depths.append(DepthMap(rng.uniform(1.3, 1.7, size=(K.height, K.width))))
        feats.append(FeatureMap2D(rng.normal(size=(5,) + HW), STRIDE))
    return spec, cams, depths, feats


def test_border_weight_values():
    assert border_weight(10.0) == 0.5
    assert abs(border_weight(0.0) - sigmoid(-6.0)) < 1e-12
    assert border_weight(20.0) == border_weight(1000.0)
    assert border_weight(20.0) == pytest.approx(0.997527, abs=1e-6)


def test_feature_coords_align_cell_centers():
    # the center of feature cell 0 covers image pixels 0..stride-1
    assert feature_coords(np.array([1.5]), 4)[0] == pytest.approx(0.0)
    assert feature_coords(np.array([5.5]), 4)[0] == pytest.approx(1.0)


def test_constant_map_single_view():
    spec = GridSpec((-0.5, -0.5, 1.0), 0.25, (5, 5, 5))
    cam = [(K, Pose.identity())]
    vol = backproject_dense([FeatureMap2D(np.full((2,) + HW, 3.0), STRIDE)], cam, spec)
    seen = vol.validity > 0
    assert seen.any() and (~seen).any()
    assert np.allclose(vol.data[seen], 3.0)
    assert np.all(vol.data[~seen] == 0)


def test_two_constant_views_average():
    spec = GridSpec((-0.05, -0.05, 1.0), 0.05, (3, 3, 3))
    cams = [(K, Pose.identity()), (K, Pose.identity())]
    maps = [FeatureMap2D(np.full((1,) + HW, 1.0), STRIDE), FeatureMap2D(np.full((1,) + HW, 4.0), STRIDE)]
    vol = backproject_dense(maps, cams, spec)
    assert np.allclose(vol.data, 2.5) and np.all(vol.validity == 2)


@given(st.integers(0, 2**32 - 1), st.sampled_from(VARIANTS))
def test_dense_view_permutation_invariance(seed, variant):
    rng = np.random.default_rng(seed)
    spec, cams, depths, feats = setup_views(rng)
    strat = GuidanceStrategy(variant)

    def run(order):
        c = [cams[i] for i in order]
        d = [depths[i] for i in order]
        vol = fuse_depths(d, c, spec, 0.15) if strat.needs_volume else None
        return backproject_dense([feats[i] for i in order], c, spec, vol, strat, d).data

    ref = run((0, 1, 2))
    for perm in itertools.permutations(range(3)):
        assert np.max(np.abs(run(perm) - ref)) <= 1e-12


def test_strategy_channels(rng):
    spec, cams, depths, feats = setup_views(rng)
    vol = fuse_depths(depths, cams, spec, 0.15)
    plain = backproject_dense(feats, cams, spec)
    none = backproject_dense(feats, cams, spec, vol, GuidanceStrategy("none"), depths)
    assert np.array_equal(none.data, plain.data) and none.channels == 5
    depth_only = backproject_dense(feats, cams, spec, vol, GuidanceStrategy("depth_only"), depths)
    assert depth_only.channels == 1
    assert np.array_equal(depth_only.data[..., 0], vol.values)
    tsdf = backproject_dense(feats, cams, spec, vol, GuidanceStrategy("tsdf"), depths)
    assert tsdf.channels == 6 and np.array_equal(tsdf.data[..., :5], plain.data)
    for v in ("density", "gaussian_weight", "tsdf_plus_gaussian"):
        out = backproject_dense(feats, cams, spec, vol, GuidanceStrategy(v), depths)
        assert out.channels == GuidanceStrategy(v).output_channels(5)
        assert np.all(np.isfinite(out.data))


def test_missing_inputs_raise(rng):
    spec, cams, depths, feats = setup_views(rng)
    with pytest.raises(ValueError):
        backproject_dense(feats, cams, spec, None, GuidanceStrategy("tsdf"))
    with pytest.raises(ValueError):
        backproject_dense(feats, cams, spec, None, GuidanceStrategy("density"))
    with pytest.raises(ValueError):
        GuidanceStrategy("max")
    with pytest.raises(ValueError):
        GuidanceStrategy("density", sigma=0.0)


def test_point_backproject_single_view_constant():
    maps = [FeatureMap2D(np.full((3, 12, 16), 2.5), 2)]
    W, none = point_backproject(np.array([[0.0, 0.0, 1.0]]), maps, [(K, Pose.identity())])
    assert np.allclose(W, 2.5, atol=1e-15) and not none[0]


def test_point_backproject_outside_every_view():
    maps = [FeatureMap2D(np.ones((3, 12, 16)), 2)]
    W, none = point_backproject(np.array([[0.0, 0.0, -1.0]]), maps, [(K, Pose.identity())])
    assert np.all(W == 0) and none[0]


def test_point_matches_dense_away_from_borders():
    # one view, centered voxels far from the border: border weights cancel
    spec = GridSpec((-0.05, -0.05, 1.0), 0.05, (3, 3, 3))
    rng = np.random.default_rng(0)
    f = FeatureMap2D(rng.normal(size=(4,) + HW), STRIDE)
    cam = [(K, Pose.identity())]
    dense = backproject_dense([f], cam, spec).data.reshape(-1, 4)
    W, _ = point_backproject(spec.centers(), [f], cam)
    assert np.max(np.abs(W - dense)) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_point_backproject_view_permutation(seed):
    rng = np.random.default_rng(seed)
    _, cams, _, _ = setup_views(rng)
    maps = [FeatureMap2D(rng.normal(size=(4, 12, 16)), 2) for _ in cams]
    pts = rng.uniform(-0.2, 0.2, size=(40, 3))
    ref, _ = point_backproject(pts, maps, cams)
    for perm in itertools.permutations(range(3)):
        W, _ = point_backproject(pts, [maps[i] for i in perm], [cams[i] for i in perm])
        assert np.max(np.abs(W - ref)) <= 1e-12


def test_point_backproject_is_lipschitz_inside(rng):
    _, cams, _, _ = setup_views(rng)
    maps = [FeatureMap2D(rng.normal(size=(4, 12, 16)), 2) for _ in cams]
    pts = rng.uniform(-0.1, 0.1, size=(30, 3))
    h = 1e-6
    W0, _ = point_backproject(pts, maps, cams)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        W1, _ = point_backproject(pts + step, maps, cams)
        # bilinear sampling: change per meter bounded by focal/stride * feature range
        assert np.max(np.abs(W1 - W0)) / h < 1e4


def test_point_backproject_optional_depth_channel(rng):
    _, cams, depths, _ = setup_views(rng)
    maps = [FeatureMap2D(rng.normal(size=(4, 12, 16)), 2) for _ in cams]
    pts = rng.uniform(-0.1, 0.1, size=(10, 3))
    W, _ = point_backproject(pts, maps, cams, depths, 0.15, include_depth=True)
    assert W.shape == (10, 5)
    with pytest.raises(ValueError):
        point_backproject(pts, maps, cams, include_depth=True)
