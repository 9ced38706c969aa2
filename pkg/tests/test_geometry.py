import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tco import autodiff as ad
from tco.geometry import (
    Intrinsics, Pose, axis_angle_matrix, matrix_to_quat, orthonormalize, pointmap_gradients, project,
    quat_to_matrix, quat_to_matrix_np, random_rotation, rotation_angle, surface_normals, to_world, unproject,
    unproject_intrinsics,
)

import gradcases

seeds = st.integers(0, 2**31 - 1)


def test_unproject_pixel_center_example():
    d = np.full((2, 2), 5.0)
    p = unproject(d, 1.0, 1.0).value
    assert np.array_equal(p[0, 0], [-2.5, -2.5, 5.0])


def test_principal_point_ray_is_on_axis():
    # odd extents put a pixel center exactly on the principal point
    d = np.full((3, 5), 7.0)
    p = unproject(d, 2.0, 3.0).value
    assert np.array_equal(p[1, 2], [0.0, 0.0, 7.0])


def test_unproject_rejects_non_positive_depth():
    d = np.ones((3, 3))
    d[1, 1] = 0.0
    with pytest.raises(ValueError, match="non-positive"):
        unproject(d, 1.0, 1.0)
    mask = np.ones((3, 3), bool)
    mask[1, 1] = False
    unproject(d, 1.0, 1.0, mask)  # masked pixel is ignored


def test_unproject_rejects_empty_mask_and_mismatched_intrinsics():
    with pytest.raises(ValueError, match="empty"):
        unproject(np.ones((2, 2)), 1.0, 1.0, np.zeros((2, 2), bool))
    with pytest.raises(ValueError, match="does not match"):
        unproject_intrinsics(np.ones((4, 4)), Intrinsics(1.0, 1.0, 5, 4))


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_project_unproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    H, W = rng.integers(2, 12, 2)
    fx, fy = rng.uniform(1, 50, 2)
    d = rng.uniform(0.1, 20, (H, W))
    u, v = project(unproject(d, fx, fy), fx, fy, W, H)
    assert np.max(np.abs(u - (np.arange(W) + 0.5))) < 1e-9
    assert np.max(np.abs(v - (np.arange(H)[:, None] + 0.5))) < 1e-9


def test_to_world_identity_and_translation():
    p = np.random.default_rng(0).normal(size=(3, 4, 3))
    assert np.array_equal(to_world(p, np.eye(3), np.zeros(3)).value, p)
    moved = to_world(p, np.eye(3), np.array([1.0, 0.0, 0.0])).value
    assert np.allclose(moved[..., 0] - p[..., 0], 1.0, atol=1e-15)
    assert np.array_equal(moved[..., 1:], p[..., 1:])


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_to_world_then_inverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    pose = Pose(random_rotation(rng), rng.normal(size=3) * 3)
    p = rng.normal(size=(2, 3, 3))
    inv = pose.inverse()
    back = to_world(to_world(p, pose.R, pose.t), inv.R, inv.t).value
    assert np.max(np.abs(back - p)) < 1e-12


def test_fronto_parallel_gradients_and_normals():
    s, H, W = 0.1, 4, 5
    y, x = np.mgrid[0:H, 0:W]
    pm = np.stack([x * s, y * s, np.full((H, W), 3.0)], axis=-1)
    gx, gy = pointmap_gradients(pm)
    assert np.allclose(gx.value, [s, 0, 0], atol=1e-15)
    assert np.allclose(gy.value, [0, s, 0], atol=1e-15)
    n, ok = surface_normals(gx, gy)
    assert ok.all()
    assert np.allclose(np.abs(n.value[..., 2]), 1.0, atol=1e-15)


def test_constant_pointmap_is_degenerate():
    gx, gy = pointmap_gradients(np.ones((3, 3, 3)))
    assert np.array_equal(gx.value, np.zeros((3, 3, 3)))
    n, ok = surface_normals(gx, gy)
    assert not ok.any() and np.array_equal(n.value, np.zeros((3, 3, 3)))


def test_tilted_plane_normal():
    # plane tilted 45 degrees about the x axis: z grows with y
    H, W = 4, 4
    y, x = np.mgrid[0:H, 0:W].astype(float)
    pm = np.stack([x, y, 5.0 + y], axis=-1)
    n, ok = surface_normals(*pointmap_gradients(pm))
    assert ok.all()
    assert np.max(np.abs(np.abs(n.value[..., 2]) - np.cos(np.pi / 4))) < 1e-9


def test_pointmap_gradients_rejects_one_pixel_extent():
    with pytest.raises(ValueError):
        pointmap_gradients(np.ones((1, 4, 3)))


def test_forward_difference_matches_smooth_surface():
    # z = sin(x) sampled at spacing h: forward difference = derivative + O(h)
    h = 0.01
    y, x = np.mgrid[0:5, 0:50] * h
    pm = np.stack([x, y, np.sin(x)], axis=-1)
    gx, _ = pointmap_gradients(pm)
    slope = gx.value[..., :-1, 2] / h
    assert np.max(np.abs(slope - np.cos(x[..., :-1]))) < h


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_normals_are_unit(seed):
    rng = np.random.default_rng(seed)
    gx, gy = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    n, ok = surface_normals(gx, gy)
    assert np.max(np.abs(np.linalg.norm(n.value[ok], axis=-1) - 1.0)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_pose_constructors_stay_orthonormal(seed):
    rng = np.random.default_rng(seed)
    a = Pose(random_rotation(rng), rng.normal(size=3))
    b = Pose(axis_angle_matrix(rng.normal(size=3), rng.uniform(0, np.pi)), rng.normal(size=3))
    for p in (a @ b, a.inverse(), Pose.from_matrix(a.matrix)):
        assert np.max(np.abs(p.R.T @ p.R - np.eye(3))) < 1e-9
        assert abs(np.linalg.det(p.R) - 1) < 1e-9


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 4, 4)


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_quaternion_round_trip(seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    q = matrix_to_quat(R)
    assert q[0] >= 0
    assert np.max(np.abs(quat_to_matrix_np(q) - R)) < 1e-9
    assert np.max(np.abs(quat_to_matrix(q[None]).value[0] - R)) < 1e-9


def test_orthonormalize_and_rotation_angle():
    rng = np.random.default_rng(4)
    R = axis_angle_matrix(rng.normal(size=3), 0.7)
    assert abs(rotation_angle(R) - 0.7) < 1e-12
    Rn = orthonormalize(R + 1e-4 * rng.normal(size=(3, 3)))
    assert np.max(np.abs(Rn.T @ Rn - np.eye(3))) < 1e-12


@pytest.mark.parametrize("name", ["unproject", "to_world", "quat_to_matrix", "pointmap_gradients", "surface_normals"])
def test_geometry_gradients(name):
    worst = max(gradcases.run_case(name, s) for s in range(10))
    assert worst < gradcases.TOL


def test_unproject_gradient_with_scalar_focal():
    d = np.random.default_rng(5).uniform(1, 3, (3, 4))
    err = ad.grad_check(lambda D, f: ad.sum(unproject(D, f, f * 1.2) ** 2), [d, np.array(2.0)])
    assert err < 1e-4
