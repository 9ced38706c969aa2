"""Differentiable software rasterizer for 2D Gaussian surfels.

Each (splat, pixel) pair is evaluated by intersecting the pixel ray with the
splat's plane and measuring the hit point in the splat's tangent frame, as in
2D Gaussian splatting.  Contributions are alpha-composited front to back in
the order of splat-center depth in the target camera.

Rendering happens in two stages:

1. :func:`plan_render` works on plain values and decides which pairs
   contribute and in what order.  This is the only non-smooth part.
2. :func:`render_views` evaluates the pairs on the tape.

Passing a precomputed plan to :func:`render_views` freezes the pair set, which
is what finite-difference checks want.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import Intrinsics, Pose, pixel_rays
from .splats import SplatSet


@dataclass(frozen=True)
class RenderConfig:
    sigma_cutoff: float = 3.0  # Gaussian support in standard deviations
    min_alpha: float = 1e-4  # pairs with o*G below this are dropped
    max_alpha: float = 0.99
    near: float = 1e-2
    eps_alpha: float = 1e-8  # floor for the depth normalization
    max_extent: float = 16.0  # cap on the screen-space footprint half-size, px
    min_cos: float = 1e-8  # rays this close to parallel with a splat plane miss it


@dataclass
class RenderPlan:
    """Contributing (splat, pixel) pairs sorted by pixel then depth rank."""

    splat: np.ndarray
    target: np.ndarray
    pixel: np.ndarray  # global pixel id: target * H * W + y * W + x
    seg_first: np.ndarray  # for every pair, index of the first pair of its pixel
    n_targets: int
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.splat)


@dataclass
class RenderOutput:
    color: ad.Var  # (..., H, W, 3), premultiplied by alpha
    depth: ad.Var  # (..., H, W) expected depth of the hit points
    alpha: ad.Var  # (..., H, W)
    eps_alpha: float = 1e-8

    def normalized_color(self) -> ad.Var:
        """Color divided by accumulated alpha, undoing partial-coverage darkening."""
        a = ad.clamp(self.alpha, lo=self.eps_alpha)
        return self.color / ad.expand_dims(a, -1)


def _surfel_hits(mu, u, v, n, radii, Rw, tw, fx, fy, rx, ry):
    """Ray-plane hit of pixel rays with surfels, in Var or numpy arithmetic.

    Returns (depth along the camera z axis, squared Mahalanobis radius,
    cosine-like denominator).  All inputs are per pair.
    """
    ones = np.ones(len(ad.value(rx)))
    d_cam = ad.stack([rx / fx, ry / fy, ones], axis=-1)
    d = ad.sum(Rw * ad.expand_dims(d_cam, -2), axis=-1)
    diff = mu - tw
    denom = ad.sum(n * d, axis=-1)
    s = ad.sum(n * diff, axis=-1) / denom
    local = ad.expand_dims(s, -1) * d - diff
    a = ad.sum(local * u, axis=-1) / radii[:, 0]
    b = ad.sum(local * v, axis=-1) / radii[:, 1]
    return s, a * a + b * b, denom


def plan_render(splats: SplatSet, Rs, ts, fxs, fys, height: int, width: int,
                cfg: RenderConfig = RenderConfig()) -> RenderPlan:
    """Select and order contributing pairs for a stack of target cameras."""
    mu = ad.value(splats.centers)
    U, V, N = ad.value(splats.axis_u), ad.value(splats.axis_v), ad.value(splats.normal)
    r = ad.value(splats.radii)
    op = ad.value(splats.opacities)
    Rs, ts = ad.value(Rs), ad.value(ts)
    fxs, fys = np.atleast_1d(ad.value(fxs)), np.atleast_1d(ad.value(fys))
    n_t = len(Rs)
    M = len(mu)
    rx_all, ry_all = pixel_rays(width, height)
    rmax = r.max(axis=1) if M else np.zeros(0)
    pieces = []
    for j in range(n_t):
        if M == 0:
            break
        mc = (mu - ts[j]) @ Rs[j]
        z = mc[:, 2]
        front = np.flatnonzero(z > cfg.near)
        if len(front) == 0:
            continue
        zf = z[front]
        uc = fxs[j] * mc[front, 0] / zf + width / 2.0
        vc = fys[j] * mc[front, 1] / zf + height / 2.0
        reach = cfg.sigma_cutoff * rmax[front]
        ext = reach * max(fxs[j], fys[j]) / np.maximum(zf - reach, cfg.near) + 1.0
        ext = np.minimum(ext, cfg.max_extent)
        x0 = np.clip(np.ceil(uc - ext - 0.5), 0, width).astype(np.int64)
        x1 = np.clip(np.floor(uc + ext - 0.5), -1, width - 1).astype(np.int64)
        y0 = np.clip(np.ceil(vc - ext - 0.5), 0, height).astype(np.int64)
        y1 = np.clip(np.floor(vc + ext - 0.5), -1, height - 1).astype(np.int64)
        bw = np.maximum(x1 - x0 + 1, 0)
        bh = np.maximum(y1 - y0 + 1, 0)
        counts = bw * bh
        total = int(counts.sum())
        if total == 0:
            continue
        owner = np.repeat(np.arange(len(front)), counts)
        local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        px = x0[owner] + local % bw[owner]
        py = y0[owner] + local // bw[owner]
        sid = front[owner]
        s, q, denom = _surfel_hits(
            mu[sid], U[sid], V[sid], N[sid], r[sid],
            np.broadcast_to(Rs[j], (total, 3, 3)), ts[j], fxs[j], fys[j], rx_all[px], ry_all[py],
        )
        s, q, denom = s.value, q.value, denom.value
        with np.errstate(invalid="ignore", over="ignore"):
            alpha = op[sid] * np.exp(-0.5 * q)
        ok = (np.abs(denom) > cfg.min_cos) & (s > cfg.near) & (q <= cfg.sigma_cutoff ** 2) & (alpha >= cfg.min_alpha)
        ok &= np.isfinite(q)
        rank = np.empty(M, dtype=np.int64)
        order = np.argsort(z, kind="stable")
        rank[order] = np.arange(M)
        sid, px, py = sid[ok], px[ok], py[ok]
        pix = j * height * width + py * width + px
        pieces.append((sid, np.full(len(sid), j), pix, pix * M + rank[sid]))
    if pieces:
        sid, tgt, pix, key = (np.concatenate(p) for p in zip(*pieces))
    else:
        sid = tgt = pix = key = np.zeros(0, dtype=np.int64)
    order = np.argsort(key, kind="stable")
    sid, tgt, pix = sid[order], tgt[order], pix[order]
    starts = np.ones(len(pix), dtype=bool)
    starts[1:] = pix[1:] != pix[:-1]
    first = np.maximum.accumulate(np.where(starts, np.arange(len(pix)), 0)) if len(pix) else pix
    return RenderPlan(sid, tgt, pix, first, n_t, height, width)


def render_views(splats: SplatSet, Rs, ts, fxs, fys, height: int, width: int,
                 cfg: RenderConfig = RenderConfig(), plan: RenderPlan | None = None) -> RenderOutput:
    """Render splats into a stack of targets.

    ``Rs`` (T, 3, 3) and ``ts`` (T, 3) are camera-to-world target poses and
    ``fxs, fys`` (T,) their focals; any of them may be tracked Vars.
    Outputs have a leading target axis.
    """
    if plan is None:
        plan = plan_render(splats, Rs, ts, fxs, fys, height, width, cfg)
    n_t = plan.n_targets
    n_pix = n_t * height * width
    if len(plan) == 0:
        return RenderOutput(ad.const(np.zeros((n_t, height, width, 3))),
                            ad.const(np.zeros((n_t, height, width))),
                            ad.const(np.zeros((n_t, height, width))))
    sid, tgt = plan.splat, plan.target
    local_pix = plan.pixel - tgt * height * width
    py, px = np.divmod(local_pix, width)
    rx_all, ry_all = pixel_rays(width, height)
    fxs = ad.reshape(fxs, (n_t,)) if np.size(ad.value(fxs)) == n_t else fxs
    fys = ad.reshape(fys, (n_t,)) if np.size(ad.value(fys)) == n_t else fys

    s, q, _ = _surfel_hits(
        ad.take(splats.centers, sid), ad.take(splats.axis_u, sid), ad.take(splats.axis_v, sid),
        ad.take(splats.normal, sid), ad.take(splats.radii, sid),
        ad.take(Rs, tgt), ad.take(ts, tgt), ad.take(fxs, tgt), ad.take(fys, tgt),
        rx_all[px], ry_all[py],
    )
    alpha = ad.clamp(ad.take(splats.opacities, sid) * ad.exp(-0.5 * q), hi=cfg.max_alpha)
    log_t = ad.log(1.0 - alpha)
    before = ad.cumsum(log_t) - log_t  # exclusive running sum over all pairs
    trans = ad.exp(before - ad.take(before, plan.seg_first))
    w = alpha * trans
    color = ad.segment_sum(ad.expand_dims(w, -1) * ad.take(splats.colors, sid), plan.pixel, n_pix)
    acc = ad.segment_sum(w, plan.pixel, n_pix)
    zsum = ad.segment_sum(w * s, plan.pixel, n_pix)
    depth = zsum / ad.clamp(acc, lo=cfg.eps_alpha)
    return RenderOutput(
        color=ad.reshape(color, (n_t, height, width, 3)),
        depth=ad.reshape(depth, (n_t, height, width)),
        alpha=ad.reshape(acc, (n_t, height, width)),
        eps_alpha=cfg.eps_alpha,
    )


def render(splats: SplatSet, pose: Pose, K: Intrinsics, cfg: RenderConfig = RenderConfig()) -> RenderOutput:
    """Render into a single target camera; outputs have no target axis."""
    out = render_views(splats, pose.R[None], pose.t[None], np.array([K.fx]), np.array([K.fy]),
                       K.height, K.width, cfg)
    return RenderOutput(out.color[0], out.depth[0], out.alpha[0], out.eps_alpha)


def save_debug_image(rgb, path) -> Path:
    """Dump an (H, W, 3) image in [0, 1] as PNG, or binary PPM for ``.ppm``."""
    path = Path(path)
    arr = np.clip(np.round(ad.value(rgb) * 255.0), 0, 255).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        h, w = arr.shape[:2]
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())
    else:
        from PIL import Image

        Image.fromarray(arr, "RGB").save(path)
    return path
