import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tco import autodiff as ad
from tco.geometry import Intrinsics, Pose, axis_angle_matrix, matrix_to_quat, quat_to_matrix_np, random_rotation
from tco.render import RenderConfig, plan_render, render, render_views, save_debug_image
from tco.scenes import synth_scene
from tco.splats import SplatSet, derive_splats, frame_to_quaternion, opacity_from_confidence, splats_for_view

import gradcases

seeds = st.integers(0, 2**31 - 1)


def make_splats(centers, colors, opacities, radii, R=None):
    n = len(centers)
    R = np.eye(3) if R is None else R
    return SplatSet(
        centers=ad.const(np.asarray(centers, float)), colors=ad.const(np.asarray(colors, float)),
        opacities=ad.const(np.asarray(opacities, float)),
        axis_u=ad.const(np.tile(R[:, 0], (n, 1))), axis_v=ad.const(np.tile(R[:, 1], (n, 1))),
        normal=ad.const(np.tile(R[:, 2], (n, 1))), radii=ad.const(np.asarray(radii, float)),
        pixels=np.zeros((n, 3), int),
    )


# -- splat parameters --------------------------------------------------------------------

def test_opacity_examples():
    assert ad.value(opacity_from_confidence(np.array([2.0])))[0] == 0.5
    assert ad.value(opacity_from_confidence(np.array([1.0 + 1e-12])))[0] < 1e-11
    with pytest.raises(ValueError):
        opacity_from_confidence(np.array([1.0]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1.0001, 1e6), min_size=2, max_size=20))
def test_opacity_monotone_in_unit_interval(c):
    c = np.sort(np.asarray(c))
    o = ad.value(opacity_from_confidence(c))
    assert np.all(o >= 0) and np.all(o < 1) and np.all(np.diff(o) >= 0)


def test_frame_to_quaternion_examples():
    assert np.allclose(frame_to_quaternion([1, 0, 0], [0, 1, 0], [0, 0, 1]), [1, 0, 0, 0], atol=1e-15)
    q = frame_to_quaternion([0, 1, 0], [-1, 0, 0], [0, 0, 1])
    assert np.allclose(q, [np.sqrt(0.5), 0, 0, np.sqrt(0.5)], atol=1e-12)
    with pytest.raises(ValueError):
        frame_to_quaternion([1, 0, 0], [1, 0, 0], [0, 0, 1])
    with pytest.raises(ValueError):
        frame_to_quaternion([1, 0, 0], [0, 1, 0], [0, 0, -1])  # left-handed


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_frame_quaternion_round_trip(seed):
    R = random_rotation(np.random.default_rng(seed))
    q = frame_to_quaternion(R[:, 0], R[:, 1], R[:, 2])
    assert abs(np.linalg.norm(q) - 1) < 1e-12
    assert np.max(np.abs(quat_to_matrix_np(q) - R)) < 1e-9


def _fronto_plane(H=5, W=6, z=3.0, f=10.0):
    return np.full((H, W), z), f


def test_fronto_parallel_plane_splats():
    depth, f = _fronto_plane()
    H, W = depth.shape
    img = np.random.default_rng(0).random((H, W, 3))
    alpha = 0.5
    s = derive_splats(img, depth, np.full((H, W), 3.0), np.eye(3), np.zeros(3), f, f, radius_scale=alpha)
    assert len(s) == H * W
    spacing = depth[0, 0] / f
    assert np.allclose(np.abs(s.normal.value), [0, 0, 1], atol=1e-12)
    assert np.allclose(s.radii.value, alpha * spacing, atol=1e-12)
    assert np.allclose(s.rotations[..., 2], s.normal.value)
    assert np.allclose(quat_to_matrix_np(s.quaternions[0])[:, 2], s.normal.value[0], atol=1e-9)
    assert np.allclose(s.colors.value, img.reshape(-1, 3))
    assert np.allclose(s.opacities.value, 1 - 1 / 3.0)


def test_radii_linear_in_alpha_and_gradient_norm():
    depth, f = _fronto_plane()
    img = np.zeros(depth.shape + (3,))
    conf = np.full(depth.shape, 2.0)
    r1 = derive_splats(img, depth, conf, np.eye(3), np.zeros(3), f, f, radius_scale=0.5).radii.value
    r2 = derive_splats(img, depth, conf, np.eye(3), np.zeros(3), f, f, radius_scale=5.0).radii.value
    r3 = derive_splats(img, 2 * depth, conf, np.eye(3), np.zeros(3), f, f, radius_scale=0.5).radii.value
    assert np.allclose(r2, 10 * r1, rtol=1e-12)
    assert np.allclose(r3, 2 * r1, rtol=1e-12)


def test_grazing_surface_shrinks_radii():
    H, W, f = 4, 4, 10.0
    x = np.arange(W)
    tilted = np.tile(3.0 + 0.5 * x, (H, 1))  # strongly slanted along x
    img = np.zeros((H, W, 3))
    conf = np.full((H, W), 2.0)
    s = derive_splats(img, tilted, conf, np.eye(3), np.zeros(3), f, f)
    nz = np.abs(s.normal.value[:, 2])
    assert np.all(nz < 0.9)


def test_splat_frames_are_orthonormal_and_world_posed():
    sc = synth_scene("box", seed=3, n_views=3, resolution=12)
    conf = np.full(sc.depths[1].shape, 5.0)
    s = splats_for_view(sc.images[1], sc.depths[1], conf, sc.poses[1], sc.intrinsics[1])
    Rm = s.rotations
    assert np.max(np.abs(np.swapaxes(Rm, -1, -2) @ Rm - np.eye(3))) < 1e-9
    pts = sc.world_points()[1].reshape(-1, 3)[s.pixels[:, 1] * 12 + s.pixels[:, 2]]
    assert np.max(np.abs(s.centers.value - pts)) < 1e-9
    assert np.allclose(np.linalg.norm(s.quaternions, axis=-1), 1, atol=1e-9)


def test_derive_splats_rejects_bad_confidence_and_shapes():
    depth, f = _fronto_plane()
    img = np.zeros(depth.shape + (3,))
    with pytest.raises(ValueError, match="confidence"):
        derive_splats(img, depth, np.ones(depth.shape), np.eye(3), np.zeros(3), f, f)
    with pytest.raises(ValueError):
        derive_splats(img[:-1], depth, np.full(depth.shape, 2.0), np.eye(3), np.zeros(3), f, f)


def test_degenerate_pixels_skipped():
    depth, f = _fronto_plane()
    mask = np.ones(depth.shape, bool)
    mask[0, :3] = False
    s = derive_splats(np.zeros(depth.shape + (3,)), depth, np.full(depth.shape, 2.0), np.eye(3), np.zeros(3), f, f,
                      mask=mask)
    assert len(s) == mask.sum()


def test_derive_splats_gradients():
    worst = max(gradcases.run_case("derive_splats", s) for s in range(5))
    assert worst < gradcases.TOL


# -- renderer -----------------------------------------------------------------------------

K8 = Intrinsics(8.0, 8.0, 8, 8)


def test_single_splat_compositing():
    # splat centered on the ray through pixel (3, 3) center
    x = (3.5 - 4.0) / 8.0 * 2.0
    s = make_splats([[x, x, 2.0]], [[0.2, 0.6, 0.9]], [0.7], [[0.3, 0.3]])
    out = render(s, Pose.identity(), K8)
    assert np.allclose(out.normalized_color().value[3, 3], [0.2, 0.6, 0.9], atol=1e-12)
    assert abs(out.depth.value[3, 3] - 2.0) < 1e-12
    assert abs(out.alpha.value[3, 3] - 0.7) < 1e-12  # G = 1 at the center
    # off-center pixel: alpha = o * G with the analytic Gaussian
    d = 1.0 / 8.0 * 2.0  # one pixel at depth 2
    assert abs(out.alpha.value[3, 4] - 0.7 * np.exp(-0.5 * (d / 0.3) ** 2)) < 1e-12


def test_occlusion_front_splat_dominates():
    s = make_splats([[0, 0, 2.0], [0, 0, 3.0]], [[1, 0, 0], [0, 0, 1]], [0.99, 0.9], [[2.0, 2.0], [2.0, 2.0]])
    out = render(s, Pose.identity(), K8, RenderConfig(max_alpha=0.999))
    c = out.normalized_color().value[3:5, 3:5]
    assert np.all(c[..., 0] > 0.98) and np.all(c[..., 2] < 0.02)
    assert np.all(np.abs(out.depth.value[3:5, 3:5] - 2.0) < 0.02)


def test_no_splats_gives_empty_output():
    s = make_splats(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2)))
    out = render(s, Pose.identity(), K8)
    assert np.array_equal(out.alpha.value, np.zeros((8, 8)))
    behind = make_splats([[0, 0, -2.0]], [[1, 1, 1]], [0.5], [[1.0, 1.0]])
    assert np.array_equal(render(behind, Pose.identity(), K8).alpha.value, np.zeros((8, 8)))


def _scene_splats(seed=0, res=16, conf=10.0, view=0):
    sc = synth_scene("plane", seed=seed, n_views=3, resolution=res)
    s = splats_for_view(sc.images[view], sc.depths[view], np.full(sc.depths[view].shape, conf),
                        sc.poses[view], sc.intrinsics[view])
    return sc, s


def test_self_reprojection_of_textured_plane():
    sc, s = _scene_splats(res=32)
    out = render(s, sc.poses[0], sc.intrinsics[0])
    m = out.alpha.value > 0.5
    err = np.abs(out.normalized_color().value - sc.images[0])[m]
    assert m.mean() > 0.9
    assert np.all(err.reshape(-1, 3).mean(axis=0) < 0.05)


def test_planar_depth_matches_plane():
    sc, s = _scene_splats(res=24)
    out = render(s, sc.poses[1], sc.intrinsics[1])
    m = out.alpha.value > 0.5
    assert m.any()
    assert np.max(np.abs(out.depth.value[m] - sc.depths[1][m])) < 1e-3


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_weights_bounded_and_order_invariant(seed):
    rng = np.random.default_rng(seed)
    sc, s = _scene_splats(seed=seed % 1000, res=12, conf=rng.uniform(1.5, 50))
    out = render(s, sc.poses[1], sc.intrinsics[1])
    a = out.alpha.value
    assert np.all(a >= 0) and np.all(a <= 1 + 1e-12)
    perm = rng.permutation(len(s))
    shuffled = SplatSet(**{k: ad.take(getattr(s, k), perm) for k in
                           ("centers", "colors", "opacities", "axis_u", "axis_v", "normal", "radii")},
                        pixels=s.pixels[perm])
    out2 = render(shuffled, sc.poses[1], sc.intrinsics[1])
    assert np.max(np.abs(out2.color.value - out.color.value)) < 1e-12
    assert np.max(np.abs(out2.alpha.value - a)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_rigid_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    sc, s = _scene_splats(seed=seed % 1000, res=12)
    G = Pose(random_rotation(rng), rng.normal(size=3) * 2)
    out = render(s, sc.poses[1], sc.intrinsics[1])
    out_g = render(s.transformed(G.R, G.t), G @ sc.poses[1], sc.intrinsics[1])
    for a, b in ((out.color, out_g.color), (out.depth, out_g.depth), (out.alpha, out_g.alpha)):
        assert np.max(np.abs(a.value - b.value)) < 1e-6


def test_occluded_splat_color_gradient_is_zero():
    x = (3.5 - 4.0) / 8.0 * 2.0  # on the ray through pixel (3, 3)
    tape = ad.Tape()
    colors = tape.var([[1.0, 0, 0], [0, 0, 1.0]])
    s = make_splats([[x, x, 2.0], [x * 1.5, x * 1.5, 3.0]], colors.value, [1.0, 0.5], [[0.3, 0.3], [0.3, 0.3]])
    s.colors = colors
    out = render(s, Pose.identity(), K8, RenderConfig(max_alpha=1 - 1e-12))
    g = tape.gradient(ad.sum(out.color[3, 3]), [colors])[0]
    assert np.max(np.abs(g[1])) < 1e-11
    assert np.allclose(g[0], 1 - 1e-12)


@pytest.mark.parametrize("c_splat, target", [(0.8, 0.1), (0.2, 0.9), (0.5, 0.3)])
def test_opacity_gradient_single_splat(c_splat, target):
    x = (3.5 - 4.0) / 8.0 * 2.0
    o0 = 0.6
    tape = ad.Tape()
    o = tape.var([o0])
    s = make_splats([[x, x, 2.0]], [[c_splat] * 3], [o0], [[0.3, 0.3]])
    s.opacities = o
    out = render(s, Pose.identity(), K8)
    loss = ad.sum(ad.abs(out.color[3, 3] - target))
    g = tape.gradient(loss, [o])[0][0]
    # G = 1 at the center, so L = 3 |o c - t| and dL/do = 3 sign(o c - t) c
    assert abs(g - 3 * np.sign(o0 * c_splat - target) * c_splat) < 1e-12


def test_render_gradients():
    worst = max(gradcases.run_case("render_views", s) for s in range(5))
    assert worst < gradcases.TOL_RENDER


def test_frozen_plan_reproduces_render():
    sc, s = _scene_splats(res=12)
    Rs, ts = sc.poses[1].R[None], sc.poses[1].t[None]
    f = np.array([sc.intrinsics[1].fx])
    plan = plan_render(s, Rs, ts, f, f, 12, 12)
    a = render_views(s, Rs, ts, f, f, 12, 12)
    b = render_views(s, Rs, ts, f, f, 12, 12, plan=plan)
    assert np.array_equal(a.color.value, b.color.value)


def test_debug_image_dump(tmp_path):
    p = save_debug_image(np.random.default_rng(0).random((4, 5, 3)), tmp_path / "x.png")
    assert p.exists() and p.stat().st_size > 0
