"""Scene structure: voxelization, view context, feature bank, covariance."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorsplat.scene import (
    Anchor,
    Camera,
    FeatureBankNet,
    NeuralGaussian,
    PointCloud,
    blend_feature_bank,
    compose_covariance,
    decode_positions,
    gaussian_density,
    look_at_camera,
    rotation_from_quaternion,
    view_context,
    view_context_arrays,
    voxelize_anchors,
)
from anchorsplat.tensor import Tensor, no_grad

rng = np.random.default_rng(11)


def make_anchor(k=4, position=(0.0, 0.0, 0.0), seed=0):
    r = np.random.default_rng(seed)
    return Anchor(
        position=np.asarray(position, dtype=np.float64),
        feature=r.normal(size=32),
        scale=r.uniform(0.5, 2.0, size=3),
        offsets=r.normal(size=(k, 3)),
    )


# -- point cloud / voxelization ------------------------------------------------


def test_point_cloud_validation():
    with pytest.raises(ValueError, match="empty point cloud"):
        PointCloud(points=np.zeros((0, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        PointCloud(points=np.array([[np.nan, 0, 0]]))


def test_voxelize_single_point_rounds():
    anchors = voxelize_anchors(PointCloud(points=np.array([[1.3, 0, 0]])), eps=1.0)
    assert len(anchors) == 1
    assert np.allclose(anchors[0].position, [1.0, 0.0, 0.0])


def test_voxelize_deduplicates_same_voxel():
    cloud = PointCloud(points=np.array([[0.3, 0, 0], [0.4, 0, 0]]))
    anchors = voxelize_anchors(cloud, eps=1.0)
    assert len(anchors) == 1
    assert np.allclose(anchors[0].position, [0.0, 0.0, 0.0])


def test_voxelize_count_matches_hash_set_oracle():
    pts = rng.uniform(0.0, 4.0, size=(1000, 3))
    anchors = voxelize_anchors(PointCloud(points=pts), eps=1.0)
    oracle = {tuple(np.round(p / 1.0).astype(int)) for p in pts}
    assert len(anchors) == len(oracle)


def test_voxelize_sorted_and_initialized():
    pts = rng.uniform(-2.0, 2.0, size=(200, 3))
    anchors = voxelize_anchors(
        PointCloud(points=pts), eps=0.5, k=6, rng=np.random.default_rng(3)
    )
    positions = np.stack([a.position for a in anchors])
    keys = [tuple(p) for p in np.round(positions / 0.5).astype(int)]
    assert keys == sorted(keys)
    for a in anchors:
        assert a.k == 6
        assert np.all(np.abs(a.feature) <= 0.01)
        assert np.all(np.abs(a.offsets) <= 0.5)
        assert np.allclose(a.scale, 0.5)


def test_voxelize_idempotent():
    pts = rng.uniform(-3.0, 3.0, size=(300, 3))
    first = voxelize_anchors(PointCloud(points=pts), eps=0.7)
    again = voxelize_anchors(
        PointCloud(points=np.stack([a.position for a in first])), eps=0.7
    )
    assert len(first) == len(again)
    assert np.allclose(
        np.stack([a.position for a in first]), np.stack([a.position for a in again])
    )


def test_voxelize_errors():
    cloud = PointCloud(points=np.ones((1, 3)))
    with pytest.raises(ValueError, match="invalid voxel size"):
        voxelize_anchors(cloud, eps=0.0)


def test_round_half_to_even():
    anchors = voxelize_anchors(
        PointCloud(points=np.array([[0.5, 1.5, 2.5]])), eps=1.0
    )
    assert np.allclose(anchors[0].position, [0.0, 2.0, 2.0])


def test_feature_bank_views_are_tiled_strides():
    a = make_anchor()
    assert np.array_equal(a.feature_down1, np.tile(a.feature[::2], 2))
    assert np.array_equal(a.feature_down2, np.tile(a.feature[::4], 4))
    assert a.feature_down1.shape == a.feature.shape == a.feature_down2.shape


# -- cameras / view context ------------------------------------------------------


def test_camera_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Camera(
            width=8, height=8, fx=5, fy=5, cx=4, cy=4,
            rotation=np.eye(3) + 0.01, translation=np.zeros(3),
        )
    with pytest.raises(ValueError, match="focal"):
        Camera(
            width=8, height=8, fx=-1, fy=5, cx=4, cy=4,
            rotation=np.eye(3), translation=np.zeros(3),
        )


def test_camera_position_consistency():
    cam = look_at_camera(eye=(2.0, 1.0, 0.5), target=(0, 0, 0), width=16, height=16)
    assert np.allclose(cam.position, [2.0, 1.0, 0.5], atol=1e-12)
    # A point at the target projects to the principal point.
    p = cam.world_to_camera(np.array([0.0, 0.0, 0.0]))
    assert p[2] > 0  # +z forward
    assert abs(cam.fx * p[0] / p[2]) < 1e-9 and abs(cam.fy * p[1] / p[2]) < 1e-9


def identity_camera(width=8, height=8):
    return Camera(
        width=width, height=height, fx=4.0, fy=4.0, cx=width / 2, cy=height / 2,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def test_view_context_unit_cases():
    cam = identity_camera()
    ctx = view_context(make_anchor(position=(1, 0, 0)), cam)
    assert ctx.distance == pytest.approx(1.0)
    assert np.allclose(ctx.direction, [1, 0, 0])
    ctx = view_context(make_anchor(position=(0, 3, 4)), cam)
    assert ctx.distance == pytest.approx(5.0)
    assert np.allclose(ctx.direction, [0, 0.6, 0.8])


def test_view_context_random_matches_formula():
    cam = look_at_camera(eye=(0.3, -1.2, 0.8), target=(0, 0, 0), width=8, height=8)
    pos = rng.normal(size=(5, 3)) * 2.0
    dist, dirs = view_context_arrays(pos, cam)
    for i in range(5):
        rel = pos[i] - cam.position
        assert dist[i] == pytest.approx(np.linalg.norm(rel))
        assert np.allclose(dirs[i], rel / np.linalg.norm(rel))
        assert np.linalg.norm(dirs[i]) == pytest.approx(1.0, abs=1e-6)


def test_view_context_degenerate():
    cam = identity_camera()
    with pytest.raises(ValueError, match="degenerate view direction"):
        view_context(make_anchor(position=(0, 0, 0)), cam)


# -- feature-bank blending ----------------------------------------------------------


def offset_camera():
    return look_at_camera(eye=(1.5, -0.7, 2.0), target=(0, 0, 0), width=8, height=8)


def zeroed_bank_net():
    net = FeatureBankNet.create(np.random.default_rng(0))
    for t in net.parameters().values():
        t.data[:] = 0.0
    return net


def test_blend_zero_net_is_bank_mean():
    a = make_anchor()
    ctx = view_context(a, offset_camera())
    out = blend_feature_bank(a, ctx, zeroed_bank_net())
    expected = (a.feature + a.feature_down1 + a.feature_down2) / 3.0
    assert np.allclose(out, expected)


def test_blend_identical_entries_passthrough():
    a = make_anchor()
    a.feature = np.full(32, 0.37)  # all bank views collapse to the same vector
    net = FeatureBankNet.create(np.random.default_rng(5))
    ctx = view_context(a, offset_camera())
    assert np.allclose(blend_feature_bank(a, ctx, net), a.feature)


def test_blend_matches_hand_computed_softmax():
    a = make_anchor(seed=9)
    net = zeroed_bank_net()
    net.b2.data[:] = np.array([1.0, 0.0, 0.0])  # logits (1,0,0) for any input
    ctx = view_context(a, offset_camera())
    out = blend_feature_bank(a, ctx, net)
    w = np.exp([1.0, 0.0, 0.0])
    w /= w.sum()
    expected = w[0] * a.feature + w[1] * a.feature_down1 + w[2] * a.feature_down2
    assert np.allclose(out, expected, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_blend_weights_are_simplex(seed):
    r = np.random.default_rng(seed)
    net = FeatureBankNet.create(r)
    ctx = Tensor(r.normal(size=(4, 4)) * 3.0)
    with no_grad():
        w = net.weights(ctx).data
    assert (w >= 0).all()
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-7)


# -- gaussian geometry ------------------------------------------------------------------


def test_decode_positions_cases():
    a = make_anchor()
    a.offsets[:] = 0.0
    assert np.allclose(decode_positions(a), np.tile(a.position, (a.k, 1)))
    a = make_anchor(position=(0, 0, 0))
    a.scale[:] = 1.0
    a.offsets[0] = [1.0, 0.0, 0.0]
    assert np.allclose(decode_positions(a)[0], [1.0, 0.0, 0.0])


def test_decode_positions_oracle_and_linearity():
    a = make_anchor(seed=4)
    means = decode_positions(a)
    for i in range(a.k):
        assert np.allclose(means[i], a.position + a.offsets[i] * a.scale)
    doubled = Anchor(
        position=a.position, feature=a.feature, scale=a.scale, offsets=2 * a.offsets
    )
    assert np.allclose(
        decode_positions(doubled) - a.position, 2.0 * (means - a.position)
    )


def test_compose_covariance_identity_and_diag():
    assert np.allclose(compose_covariance([1, 1, 1], [1, 0, 0, 0]), np.eye(3))
    assert np.allclose(
        compose_covariance([2, 1, 1], [1, 0, 0, 0]), np.diag([4.0, 1.0, 1.0])
    )


def test_compose_covariance_eigenvalues_match_scales():
    for _ in range(20):
        s = rng.uniform(0.3, 2.0, size=3)
        q = rng.normal(size=4)
        cov = compose_covariance(s, q)
        assert np.abs(cov - cov.T).max() < 1e-12
        eig = np.sort(np.linalg.eigvalsh(cov))
        assert np.allclose(eig, np.sort(s**2), atol=1e-9)
        assert np.linalg.det(cov) == pytest.approx(np.prod(s) ** 2, rel=1e-9)
        assert eig.min() >= -1e-9


def test_compose_covariance_zero_quaternion():
    with pytest.raises(ValueError, match="degenerate rotation"):
        compose_covariance([1, 1, 1], [0, 0, 0, 0])


def test_rotation_from_quaternion_orthonormal():
    for _ in range(10):
        r = rotation_from_quaternion(rng.normal(size=4))
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_gaussian_density_cases():
    g = NeuralGaussian(
        mean=[0.5, -0.2, 1.0], opacity=0.5, color=[1, 0, 0], scale=[1, 1, 1]
    )
    assert gaussian_density(g.mean, g) == pytest.approx(1.0)
    assert gaussian_density(g.mean + np.array([1.0, 0, 0]), g) == pytest.approx(
        np.exp(-0.5)
    )


def test_gaussian_density_solve_oracle():
    for _ in range(10):
        g = NeuralGaussian(
            mean=rng.normal(size=3),
            opacity=0.3,
            color=[0.5, 0.5, 0.5],
            scale=rng.uniform(0.5, 1.5, size=3),
            rotation=rng.normal(size=4),
        )
        x = rng.normal(size=3)
        d = x - g.mean
        oracle = np.exp(-0.5 * d @ np.linalg.inv(g.covariance) @ d)
        assert gaussian_density(x, g) == pytest.approx(oracle, abs=1e-10)
        assert 0.0 < gaussian_density(x, g) <= 1.0


def test_gaussian_density_rotation_equivariant():
    # Density through a rotated covariance equals the axis-aligned density
    # of the back-rotated displacement.
    quat = rng.normal(size=4)
    scale = np.array([0.4, 0.9, 1.7])
    g = NeuralGaussian(
        mean=rng.normal(size=3), opacity=0.3, color=[1, 1, 1],
        scale=scale, rotation=quat,
    )
    x = g.mean + rng.normal(size=3)
    base = gaussian_density(x, g)
    axis_aligned = NeuralGaussian(
        mean=[0.0, 0.0, 0.0], opacity=0.3, color=[1, 1, 1], scale=scale
    )
    back_rotated = rotation_from_quaternion(quat).T @ (x - g.mean)
    assert gaussian_density(back_rotated, axis_aligned) == pytest.approx(
        base, abs=1e-9
    )


def test_gaussian_density_singular():
    g = NeuralGaussian(
        mean=[0, 0, 0], opacity=0.1, color=[1, 1, 1], scale=[1e-7, 1e3, 1e3]
    )
    with pytest.raises(ValueError, match="singular covariance"):
        gaussian_density([1.0, 0, 0], g)
