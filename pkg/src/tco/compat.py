"""Self-supervised cross-view compatibility losses.

Source-view predictions are turned into surfels, rendered into every target
view, and compared with the target's own image (photometric) or its own
predicted depth (geometric).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .render import RenderConfig, RenderPlan, plan_render, render_views
from .splats import DEFAULT_RADIUS_SCALE, SplatSet, derive_splats

ALPHA_MIN = 0.2


@dataclass(frozen=True)
class ViewSplit:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise ValueError("source and target groups must be nonempty")
        if set(self.source) & set(self.target):
            raise ValueError("source and target groups overlap")


def sample_split(n_views: int, rng: np.random.Generator) -> ViewSplit:
    """One uniformly drawn source view; every other view is a target."""
    if n_views < 2:
        raise ValueError("need at least two views to split")
    src = int(rng.integers(n_views))
    return ViewSplit((src,), tuple(i for i in range(n_views) if i != src))


@dataclass(frozen=True)
class CompatConfig:
    radius_scale: float = DEFAULT_RADIUS_SCALE
    alpha_min: float = ALPHA_MIN
    masked: bool = True  # False compares every pixel regardless of coverage
    render: RenderConfig = RenderConfig()


def source_splats(pred, images, views, cfg: CompatConfig) -> SplatSet:
    sets = []
    for i in views:
        sets.append(derive_splats(
            images[i], pred.depth[i], pred.confidence[i], pred.R[i], pred.t[i],
            pred.fx[i], pred.fy[i], radius_scale=cfg.radius_scale, view=i,
        ))
    return sets[0] if len(sets) == 1 else SplatSet.concatenate(sets)


def _targets(pred, images, split, cfg):
    splats = source_splats(pred, images, split.source, cfg)
    tgt = np.asarray(split.target)
    H, W = ad.value(pred.depth).shape[-2:]
    return splats, (ad.take(pred.R, tgt), ad.take(pred.t, tgt), ad.take(pred.fx, tgt), ad.take(pred.fy, tgt), H, W)


def compat_plan(pred, images, split: ViewSplit, cfg: CompatConfig = CompatConfig()) -> RenderPlan:
    """The render plan a compatibility loss would use; pass it back to freeze it."""
    splats, cams = _targets(pred, images, split, cfg)
    return plan_render(splats, *cams, cfg.render)


def _render_targets(pred, images, split, cfg, plan=None):
    splats, cams = _targets(pred, images, split, cfg)
    return render_views(splats, *cams, cfg.render, plan=plan)


def _masked_l1(diff, alpha, cfg: CompatConfig, what: str) -> ad.Var:
    """Per-target mean |diff| over covered pixels, then mean over targets."""
    a = ad.value(alpha)
    per_target = []
    for j in range(a.shape[0]):
        m = a[j] > cfg.alpha_min if cfg.masked else np.ones(a[j].shape, bool)
        if not m.any():
            continue
        d = ad.abs(diff[j])
        if d.ndim == 3:
            w = np.broadcast_to(m[..., None], d.shape)
        else:
            w = m
        per_target.append(ad.sum(d * w) / float(w.sum()))
    if not per_target:
        warnings.warn(f"{what}: no overlap between source and targets, loss is 0", RuntimeWarning, stacklevel=3)
        return ad.const(0.0)
    return ad.sum(ad.stack(per_target)) / float(len(per_target))


def photometric_loss(pred, images, split: ViewSplit, cfg: CompatConfig = CompatConfig(),
                     plan: RenderPlan | None = None) -> ad.Var:
    """Mean L1 between target images and source surfels rendered there.

    Rendered color is normalized by accumulated alpha before comparison, so
    pixels covered by a thin or gappy surfel layer are not biased dark.
    """
    out = _render_targets(pred, images, split, cfg, plan)
    tgt_images = np.asarray(images)[np.asarray(split.target)]
    return _masked_l1(out.normalized_color() - tgt_images, out.alpha, cfg, "photometric_loss")


def geometric_loss(pred, split: ViewSplit, cfg: CompatConfig = CompatConfig(), images=None,
                   plan: RenderPlan | None = None) -> ad.Var:
    """Mean L1 between predicted target depths and rendered source depth."""
    if images is None:
        H, W = ad.value(pred.depth).shape[-2:]
        images = np.zeros((ad.value(pred.depth).shape[0], H, W, 3))
    out = _render_targets(pred, images, split, cfg, plan)
    tgt_depth = ad.take(pred.depth, np.asarray(split.target))
    return _masked_l1(out.depth - tgt_depth, out.alpha, cfg, "geometric_loss")
