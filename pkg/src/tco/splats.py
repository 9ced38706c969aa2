"""Heuristic 2D Gaussian splat parameters from per-view predictions.

Each valid pixel of a source view becomes one surfel: centered on its world
point, colored by the pixel, opacity ``1 - 1/C`` from the confidence, oriented
by the local point-map tangent frame and sized by the point-map gradient
magnitudes, shrunk where the surface is seen at a grazing angle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import NORMAL_EPS, matrix_to_quat, pointmap_gradients, surface_normals, unproject

FRAME_TOL = 1e-6
DEFAULT_RADIUS_SCALE = 0.5


@dataclass
class SplatSet:
    """A batch of surfels in world coordinates.

    ``axis_u``, ``axis_v`` and ``normal`` are the columns of each splat's
    rotation; ``radii`` are the standard deviations along ``axis_u`` and
    ``axis_v``.  ``pixels`` holds the (view, y, x) each splat came from.
    """

    centers: ad.Var
    colors: ad.Var
    opacities: ad.Var
    axis_u: ad.Var
    axis_v: ad.Var
    normal: ad.Var
    radii: ad.Var
    pixels: np.ndarray

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def rotations(self) -> np.ndarray:
        cols = [ad.value(self.axis_u), ad.value(self.axis_v), ad.value(self.normal)]
        return np.stack(cols, axis=-1)

    @property
    def quaternions(self) -> np.ndarray:
        return matrix_to_quat(self.rotations)

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "SplatSet":
        """The same splats after a rigid world transform ``x -> R x + t``."""
        Rt = np.asarray(R).T
        return SplatSet(
            centers=self.centers @ Rt + t,
            colors=self.colors,
            opacities=self.opacities,
            axis_u=self.axis_u @ Rt,
            axis_v=self.axis_v @ Rt,
            normal=self.normal @ Rt,
            radii=self.radii,
            pixels=self.pixels,
        )

    @classmethod
    def concatenate(cls, sets: list["SplatSet"]) -> "SplatSet":
        def cat(name):
            return ad.concat([getattr(s, name) for s in sets], axis=0)

        return cls(
            centers=cat("centers"), colors=cat("colors"), opacities=cat("opacities"),
            axis_u=cat("axis_u"), axis_v=cat("axis_v"), normal=cat("normal"),
            radii=cat("radii"), pixels=np.concatenate([s.pixels for s in sets]),
        )


def frame_to_quaternion(e1, e2, e3) -> np.ndarray:
    """Quaternion (w, x, y, z), w >= 0, of the rotation with columns e1, e2, e3."""
    M = np.stack([np.asarray(e1, float), np.asarray(e2, float), np.asarray(e3, float)], axis=-1)
    MtM = np.swapaxes(M, -1, -2) @ M
    if np.max(np.abs(MtM - np.eye(3))) > FRAME_TOL or np.any(np.abs(np.linalg.det(M) - 1.0) > FRAME_TOL):
        raise ValueError("frame is not orthonormal and right-handed")
    return matrix_to_quat(M)


def opacity_from_confidence(conf):
    cv = ad.value(conf)
    if np.any(cv <= 1.0):
        raise ValueError("confidence must exceed 1 (exp(x) + 1 activation)")
    return 1.0 - 1.0 / conf


def derive_splats(
    image,
    depth,
    confidence,
    R,
    t,
    fx,
    fy,
    radius_scale: float = DEFAULT_RADIUS_SCALE,
    mask=None,
    view: int = 0,
) -> SplatSet:
    """Surfels for one view.

    ``image`` is (H, W, 3), ``depth`` and ``confidence`` (H, W), ``(R, t)`` the
    camera-to-world pose and ``fx, fy`` scalar focals; each may be a Var.
    Pixels with a degenerate tangent frame or outside ``mask`` are skipped.
    """
    dv = ad.value(depth)
    H, W = dv.shape
    if ad.value(image).shape[:2] != (H, W) or ad.value(confidence).shape != (H, W):
        raise ValueError("image, depth and confidence must share H x W")
    valid = np.ones((H, W), bool) if mask is None else np.asarray(mask, bool)
    if np.any(ad.value(confidence)[valid] <= 1.0):
        raise ValueError("confidence must exceed 1 at valid pixels")

    pts = unproject(depth, fx, fy, valid)
    gx, gy = pointmap_gradients(pts)
    n, ok = surface_normals(gx, gy, NORMAL_EPS)
    keep = np.flatnonzero((ok & valid).ravel())
    ys, xs = np.divmod(keep, W)

    def pick(v, k=3):
        return ad.take(ad.reshape(v, (H * W, k) if k else (H * W,)), keep, axis=0)

    p_sel, gx_sel, gy_sel, n_sel = pick(pts), pick(gx), pick(gy), pick(n)
    # gx is orthogonal to n up to round-off; project it out anyway
    gx_perp = gx_sel - ad.sum(gx_sel * n_sel, axis=-1, keepdims=True) * n_sel
    e1 = ad.normalize(gx_perp)
    e2 = ad.normalize(ad.cross(n_sel, gx_sel))
    nz = ad.abs(n_sel[:, 2])
    radii = radius_scale * ad.expand_dims(nz, -1) * ad.stack([ad.norm(gx_sel), ad.norm(gy_sel)], axis=-1)

    Rt = ad.swapaxes(R, -1, -2) if isinstance(R, ad.Var) else np.asarray(R).T
    centers = ad.matmul(p_sel, Rt) + t
    conf_sel = ad.take(ad.reshape(confidence, (H * W,)), keep)
    colors = ad.take(ad.reshape(image, (H * W, 3)), keep, axis=0)
    return SplatSet(
        centers=centers,
        colors=colors,
        opacities=opacity_from_confidence(conf_sel),
        axis_u=ad.matmul(e1, Rt),
        axis_v=ad.matmul(e2, Rt),
        normal=ad.matmul(n_sel, Rt),
        radii=radii,
        pixels=np.stack([np.full(len(keep), view), ys, xs], axis=1),
    )


def splats_for_view(image, depth, confidence, pose, intrinsics, radius_scale=DEFAULT_RADIUS_SCALE, mask=None):
    """Convenience wrapper taking :class:`Pose` and :class:`Intrinsics`."""
    return derive_splats(image, depth, confidence, pose.R, pose.t, intrinsics.fx, intrinsics.fy,
                         radius_scale=radius_scale, mask=mask)
