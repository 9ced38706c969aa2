"""Penalty terms that tie predictions to known priors.

Every function is batched over views and returns per-view values as a Var
(``g_rot``, ``g_trans``, ``g_K``) or a scalar Var (``g_depth``).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Intrinsics, Pose

SCALE_FLOOR = 1e-8


class DegenerateAlignment(ValueError):
    pass


@dataclass
class PriorSet:
    """Optional per-view priors.  Any prior present covers every view.

    Pose priors are camera-to-world and re-anchored on construction so the
    first view sits at the identity.
    """

    poses: list[Pose] | None = None
    intrinsics: list[Intrinsics] | None = None
    depths: np.ndarray | None = None  # (N, H, W)
    depth_masks: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.poses is not None:
            first_inv = self.poses[0].inverse()
            self.poses = [first_inv @ p for p in self.poses]
        if self.depths is not None:
            self.depths = np.asarray(self.depths, dtype=np.float64)
            if self.depth_masks is None:
                self.depth_masks = np.isfinite(self.depths) & (self.depths > 0)
            self.depth_masks = np.asarray(self.depth_masks, dtype=bool)
        counts = {len(x) for x in (self.poses, self.intrinsics, self.depths) if x is not None}
        if len(counts) > 1:
            raise ValueError("priors cover different numbers of views")

    @property
    def n_views(self) -> int | None:
        for x in (self.poses, self.intrinsics, self.depths):
            if x is not None:
                return len(x)
        return None

    def rotations(self) -> np.ndarray:
        return np.stack([p.R for p in self.poses])

    def translations(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses])

    def focals(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([k.fx for k in self.intrinsics]), np.array([k.fy for k in self.intrinsics]))

    def subset(self, kinds) -> "PriorSet":
        """A copy holding only the prior kinds named in ``kinds``."""
        kinds = set(kinds)
        unknown = kinds - {"pose", "intr", "depth"}
        if unknown:
            raise ValueError(f"unknown prior kinds {sorted(unknown)}")
        out = PriorSet.__new__(PriorSet)
        out.poses = self.poses if "pose" in kinds else None
        out.intrinsics = self.intrinsics if "intr" in kinds else None
        out.depths = self.depths if "depth" in kinds else None
        out.depth_masks = self.depth_masks if "depth" in kinds else None
        return out


def g_rot(R, R_prior) -> ad.Var:
    """Geodesic angle between rotations, radians; (..., 3, 3) -> (...)."""
    rel = ad.matmul(ad.swapaxes(R, -1, -2), R_prior)
    return ad.arccos((ad.trace(rel) - 1.0) * 0.5)


def scene_scale(centers) -> ad.Var:
    """Mean distance of camera centers (N, 3) from the origin, floored."""
    sq = ad.sum(centers * centers, axis=-1)
    pos = ad.value(sq) > 0
    dist = ad.sqrt(ad.where(pos, sq, 1.0)) * pos
    return ad.clamp(ad.mean(dist), lo=SCALE_FLOOR)


def g_trans(t, t_prior, s, s_prior) -> ad.Var:
    """L1 distance between scale-normalized translations; (..., 3) -> (...)."""
    sv, spv = ad.value(s), ad.value(s_prior)
    if np.any(sv <= 0) or np.any(spv <= 0):
        raise ValueError("scene scales must be positive")
    return ad.sum(ad.abs(t / s - t_prior / s_prior), axis=-1)


def g_K(fx, fy, fx_prior, fy_prior) -> ad.Var:
    """Absolute focal length discrepancy in pixels."""
    return ad.abs(fx - fx_prior) + ad.abs(fy - fy_prior)


def global_depth_align(depths, depth_priors, masks=None, detach: bool = True):
    """Least-squares scale and shift mapping predicted depths onto priors.

    Fits ``s * D + t ~ D_prior`` jointly over every valid pixel of every
    view.  With ``detach`` the result is a pair of floats; otherwise Vars that
    carry gradients back to ``depths``.
    """
    dv = ad.value(depths)
    pv = np.asarray(depth_priors, dtype=np.float64)
    m = np.ones(dv.shape, bool) if masks is None else np.asarray(masks, bool)
    if m.sum() < 2:
        raise DegenerateAlignment("degenerate depth prior alignment: fewer than 2 valid pixels")
    if detach:
        d, p = dv[m], pv[m]
        dc = d - d.mean()
        var = np.sum(dc * dc)
        if var <= 1e-12 * max(1.0, np.sum(d * d)):
            raise DegenerateAlignment("degenerate depth prior alignment: zero depth variance")
        s = float(np.sum(dc * (p - p.mean())) / var)
        return s, float(p.mean() - s * d.mean())
    idx = np.flatnonzero(m.ravel())
    d = ad.take(ad.reshape(depths, (-1,)), idx)
    p = pv.ravel()[idx]
    dc = d - ad.mean(d)
    var = ad.sum(dc * dc)
    if ad.value(var) <= 1e-12 * max(1.0, float(np.sum(ad.value(d) ** 2))):
        raise DegenerateAlignment("degenerate depth prior alignment: zero depth variance")
    s = ad.sum(dc * (p - p.mean())) / var
    return s, p.mean() - s * ad.mean(d)


def g_depth(depth, depth_prior, s, t, mask=None) -> ad.Var:
    """Mean absolute residual ``|s * D + t - D_prior|`` over valid pixels."""
    dv = ad.value(depth)
    m = np.ones(dv.shape, bool) if mask is None else np.asarray(mask, bool)
    if not m.any():
        warnings.warn("g_depth: empty mask, returning 0", RuntimeWarning, stacklevel=2)
        return ad.const(0.0)
    resid = ad.abs(s * depth + t - np.asarray(depth_prior, dtype=np.float64))
    return ad.sum(resid * m) / float(m.sum())
