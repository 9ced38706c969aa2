"""Procedural multiview scenes with exact geometry, and prior perturbation.

Scenes are unions of textured planes ray-cast from cameras on an arc.  All
outputs are expressed in the first camera's frame, so view 0 has the
identity pose.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, axis_angle_matrix, pixel_rays
from .priors import PriorSet

LAYOUTS = ("plane", "box", "two-walls")


@dataclass
class Scene:
    images: np.ndarray  # (N, H, W, 3) in [0, 1], 8-bit quantized
    depths: np.ndarray  # (N, H, W)
    poses: list[Pose]  # camera-to-world, poses[0] is the identity
    intrinsics: list[Intrinsics]
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    def priors(self, kinds=("pose", "intr", "depth")) -> PriorSet:
        kinds = set(kinds)
        return PriorSet(
            poses=list(self.poses) if "pose" in kinds else None,
            intrinsics=list(self.intrinsics) if "intr" in kinds else None,
            depths=self.depths.copy() if "depth" in kinds else None,
        )

    def world_points(self) -> np.ndarray:
        """(N, H, W, 3) ground-truth points in world coordinates."""
        out = []
        for d, pose, K in zip(self.depths, self.poses, self.intrinsics):
            rx, ry = pixel_rays(K.width, K.height)
            cam = np.stack([d * rx / K.fx, d * ry[:, None] / K.fy, d], axis=-1)
            out.append(cam @ pose.R.T + pose.t)
        return np.stack(out)


@dataclass
class _Wall:
    origin: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    # region test on world points, returns a bool mask
    inside: object
    base: np.ndarray
    waves: np.ndarray  # (k, 6): wu, wv, phase, amp_r, amp_g, amp_b


def _frame(normal):
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(ref, n)
    u /= np.linalg.norm(u)
    return n, u, np.cross(n, u)


def _wall(rng, origin, normal, inside=None, n_waves=4):
    n, u, v = _frame(normal)
    base = rng.uniform(0.25, 0.75, size=3)
    # spatial periods between ~0.8 and ~2.5 scene units
    freq = rng.uniform(2 * np.pi / 2.5, 2 * np.pi / 0.8, size=n_waves)
    ang = rng.uniform(0, 2 * np.pi, size=n_waves)
    waves = np.column_stack([
        freq * np.cos(ang), freq * np.sin(ang), rng.uniform(0, 2 * np.pi, n_waves),
        rng.uniform(-0.18, 0.18, size=(n_waves, 3)),
    ])
    return _Wall(np.asarray(origin, float), n, u, v, inside or (lambda p: np.ones(p.shape[:-1], bool)), base, waves)


def _texture(wall: _Wall, pts: np.ndarray) -> np.ndarray:
    rel = pts - wall.origin
    cu, cv = rel @ wall.u, rel @ wall.v
    col = np.broadcast_to(wall.base, pts.shape).copy()
    for wu, wv, ph, ar, ag, ab in wall.waves:
        s = np.sin(wu * cu + wv * cv + ph)[..., None]
        col += s * np.array([ar, ag, ab])
    return np.clip(col, 0.0, 1.0)


def _layout(rng, layout: str, dist: float):
    if layout == "plane":
        tilt = axis_angle_matrix(rng.normal(size=3), np.deg2rad(rng.uniform(0, 20)))
        return [_wall(rng, [0, 0, dist], tilt @ np.array([0, 0, -1.0]))]
    if layout == "two-walls":
        half = np.deg2rad(rng.uniform(30, 50))  # wall angle from the image plane
        depth = dist * rng.uniform(1.1, 1.3)
        left_n = np.array([np.sin(half), 0, -np.cos(half)])
        right_n = np.array([-np.sin(half), 0, -np.cos(half)])
        corner = np.array([rng.uniform(-0.3, 0.3), 0.0, depth])
        return [
            _wall(rng, corner, left_n, lambda p, c=corner: p[..., 0] <= c[0]),
            _wall(rng, corner, right_n, lambda p, c=corner: p[..., 0] >= c[0]),
        ]
    if layout == "box":
        back = dist * rng.uniform(1.0, 1.3)
        side = dist * rng.uniform(0.8, 1.1)
        floor = dist * rng.uniform(0.5, 0.7)
        return [
            _wall(rng, [0, 0, back], [0, 0, -1]),
            _wall(rng, [side, 0, 0], [-1, 0, 0]),
            _wall(rng, [-side, 0, 0], [1, 0, 0]),
            _wall(rng, [0, floor, 0], [0, -1, 0]),
            _wall(rng, [0, -floor, 0], [0, 1, 0]),
        ]
    raise ValueError(f"unknown layout {layout!r}; choose from {LAYOUTS}")


def _look_at(center, target, up=np.array([0.0, -1.0, 0.0])) -> Pose:
    fwd = target - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.column_stack([right, down, fwd]), center)


def _cast(walls, pose: Pose, K: Intrinsics):
    rx, ry = pixel_rays(K.width, K.height)
    d_cam = np.stack(np.broadcast_arrays(rx[None, :] / K.fx, ry[:, None] / K.fy, 1.0), axis=-1)
    d = d_cam @ pose.R.T
    best = np.full(d.shape[:2], np.inf)
    color = np.zeros(d.shape)
    for w in walls:
        den = d @ w.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((w.origin - pose.t) @ w.normal) / den
        hit = pose.t + s[..., None] * d
        ok = np.isfinite(s) & (s > 1e-6) & w.inside(hit) & (s < best)
        best = np.where(ok, s, best)
        color = np.where(ok[..., None], _texture(w, hit), color)
    return best, color  # s is the camera z depth because d_cam has unit z


def synth_scene(layout: str = "plane", seed: int = 0, n_views: int = 6, resolution: int = 32,
                baseline: float = 0.35, distance: float = 3.0, fov_jitter: float = 0.1,
                convergence: float = 1.0) -> Scene:
    """Generate a scene and its exact depth, poses and intrinsics.

    Cameras sit on a horizontal arc of angular span ``baseline`` radians
    around a point ``distance`` ahead, with small random jitter.  A camera at
    arc angle ``a`` turns by ``convergence * a`` toward that point: 1 aims
    every camera at it, 0 keeps all optical axes parallel.
    """
    if n_views < 2:
        raise ValueError("a scene needs at least two views")
    rng = np.random.default_rng(seed)
    walls = _layout(rng, layout, distance)
    target = np.array([0.0, 0.0, distance])
    angles = np.linspace(-baseline / 2, baseline / 2, n_views) + rng.normal(0, baseline * 0.05, n_views)
    rng.shuffle(angles)
    H = W = int(resolution)
    f = W * rng.uniform(0.9 - fov_jitter, 0.9 + fov_jitter)
    poses, images, depths, Ks = [], [], [], []
    for a in angles:
        r = distance * rng.uniform(0.95, 1.05)
        c = target + r * np.array([np.sin(a), rng.normal(0, 0.05), -np.cos(a)])
        k = convergence * a
        aim = c + distance * np.array([-np.sin(k), 0.0, np.cos(k)]) + rng.normal(0, 0.1, 3)
        pose = _look_at(c, aim)
        K = Intrinsics(f, f, W, H)
        depth, col = _cast(walls, pose, K)
        if not np.all(np.isfinite(depth)):
            raise ValueError(f"view at angle {a:.3f} has pixels with no scene coverage")
        poses.append(pose)
        Ks.append(K)
        depths.append(depth)
        images.append(np.round(col * 255.0) / 255.0)
    ref_inv = poses[0].inverse()
    poses = [ref_inv @ p for p in poses]
    poses[0] = Pose.identity()
    return Scene(np.stack(images), np.stack(depths), poses, Ks,
                 meta={"layout": layout, "seed": int(seed), "n_views": int(n_views),
                       "resolution": H, "baseline": float(baseline), "distance": float(distance),
                       "convergence": float(convergence)})


def perturb_priors(priors: PriorSet, rot_deg: float = 0.0, trans_pct: float = 0.0,
                   focal_pct: float = 0.0, seed: int = 0) -> PriorSet:
    """Noisy copy of pose and intrinsic priors.

    Per view: rotate by exactly ``rot_deg`` about a random axis, move the
    translation by ``trans_pct`` percent of its norm in a random direction,
    and scale each focal by ``1 +- focal_pct/100`` with a random sign.
    The first view stays anchored at the identity.
    """
    if min(rot_deg, trans_pct, focal_pct) < 0:
        raise ValueError("perturbation magnitudes must be nonnegative")
    rng = np.random.default_rng(seed)
    out = PriorSet.__new__(PriorSet)
    out.depths, out.depth_masks = priors.depths, priors.depth_masks
    out.poses = out.intrinsics = None
    if priors.poses is not None:
        poses = []
        for k, p in enumerate(priors.poses):
            axis = rng.normal(size=3)
            dirn = rng.normal(size=3)
            dirn /= np.linalg.norm(dirn)
            if k == 0:
                poses.append(p)
                continue
            R = p.R @ axis_angle_matrix(axis, np.deg2rad(rot_deg))
            t = p.t + trans_pct / 100.0 * np.linalg.norm(p.t) * dirn
            poses.append(Pose(R, t))
        out.poses = poses
    if priors.intrinsics is not None:
        Ks = []
        for K in priors.intrinsics:
            sx, sy = rng.choice([-1.0, 1.0], size=2)
            Ks.append(Intrinsics(K.fx * (1 + sx * focal_pct / 100.0), K.fy * (1 + sy * focal_pct / 100.0),
                                 K.width, K.height))
        out.intrinsics = Ks
    return out
