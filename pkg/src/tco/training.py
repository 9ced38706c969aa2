"""Supervised pretraining of the toy model on the synthetic scene family.

This gives test-time optimization a sensible starting point; none of it runs
at test time.  Also holds the seeded decoder perturbation used to produce a
degraded base model for benchmarks.
"""
from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from . import autodiff as ad
from .geometry import rotation_angle
from .model import ModelConfig, Predictions, ToyMVT, _adapted_layers
from .optim import AdamState, NonFiniteError, adam_step
from .priors import g_rot
from .scenes import LAYOUTS, Scene, synth_scene

log = logging.getLogger(__name__)

CONF_BETA = 1.0  # confidence regularizer: optimum C = beta / relative error, floored at 1


def scene_family(seed: int = 0, layouts=LAYOUTS, n_views: int = 6, resolution: int = 32,
                 **kw) -> Callable[[int], Scene]:
    """Deterministic generator: index -> scene, layouts cycling with the index."""
    def gen(i: int) -> Scene:
        layout = layouts[i % len(layouts)]
        return synth_scene(layout, seed=seed * 1_000_003 + i, n_views=n_views, resolution=resolution, **kw)
    return gen


def supervised_terms(pred: Predictions, scene: Scene) -> dict[str, ad.Var]:
    """Ground-truth losses: confidence-weighted relative depth, pose, focal."""
    gt_d = scene.depths
    rel = ad.abs(pred.depth - gt_d) / gt_d
    depth = ad.mean(pred.confidence * rel - CONF_BETA * ad.log(pred.confidence))
    Rg = np.stack([p.R for p in scene.poses])
    tg = np.stack([p.t for p in scene.poses])
    rot = ad.mean(g_rot(pred.R[1:], Rg[1:]))
    # squared error: an L1 fit drifts to the per-axis median when the cue is weak
    trans = ad.mean(ad.sum(ad.square(pred.t[1:] - tg[1:]), axis=-1))
    fg = np.array([k.fx for k in scene.intrinsics])
    focal = ad.mean(ad.abs(pred.fx / fg - 1.0) + ad.abs(pred.fy / fg - 1.0))
    return {"depth": depth, "rot": rot, "trans": trans, "focal": focal}


def pretrain_on_scene_family(generator: Callable[[int], Scene], steps: int, model: ToyMVT | None = None,
                             lr: float = 1e-3, seed: int = 0, log_every: int = 0) -> ToyMVT:
    """Train every non-adapter tensor on freshly generated scenes, one per step."""
    if model is None:
        model = ToyMVT(ModelConfig(), seed=seed)
    names = model.frozen_names()
    state = AdamState.zeros({k: model.params[k] for k in names})
    for step in range(steps):
        scene = generator(step)
        tape = ad.Tape()
        leaves = [tape.var(model.params[k]) for k in names]
        pred = model.forward(scene.images, dict(zip(names, leaves)))
        terms = supervised_terms(pred, scene)
        total = ad.sum(ad.stack(list(terms.values())))
        if not np.isfinite(total.item()):
            raise NonFiniteError(f"pretraining diverged at step {step} (seed {seed}): "
                                 f"{ {k: v.item() for k, v in terms.items()} }")
        grads = tape.gradient(total, leaves)
        params, state = adam_step({k: model.params[k] for k in names}, dict(zip(names, grads)), state, lr)
        model.params.update(params)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d: %s", step, {k: round(v.item(), 4) for k, v in terms.items()})
    return model


def base_errors(model: ToyMVT, scenes) -> dict[str, float]:
    """Base-model errors on ground-truth scenes.

    Mean relative depth error, rotation error in degrees, and translation
    error relative to the true translation norm (views other than the first).
    """
    d_err, r_err, t_err = [], [], []
    for sc in scenes:
        pred = model.forward(sc.images)
        d_err.append(np.mean(np.abs(pred.depth.value - sc.depths) / sc.depths))
        for R, t, pose in zip(pred.R.value[1:], pred.t.value[1:], sc.poses[1:]):
            r_err.append(np.rad2deg(rotation_angle(R.T @ pose.R)))
            t_err.append(np.linalg.norm(t - pose.t) / np.linalg.norm(pose.t))
    return {"depth_rel": float(np.mean(d_err)), "rot_deg": float(np.mean(r_err)), "trans_rel": float(np.mean(t_err))}


def perturb_decoder(model: ToyMVT, scale: float, seed: int = 0, rank: int | None = None) -> ToyMVT:
    """Copy of ``model`` with seeded low-rank noise added to adapted decoder weights.

    Each adapted weight W gets ``scale * |W|_rms * U V^T / sqrt(rank)`` with
    Gaussian U, V, so an adapter of at least that rank can undo it exactly.
    """
    out = model.copy()
    rng = np.random.default_rng(seed)
    r = model.cfg.lora_rank if rank is None else rank
    for name in _adapted_layers(model.cfg):
        W = out.params[name + ".w"]
        U = rng.normal(size=(W.shape[0], r))
        V = rng.normal(size=(W.shape[1], r))
        delta = U @ V.T / np.sqrt(r)
        delta *= np.sqrt(np.mean(W * W)) / np.sqrt(np.mean(delta * delta))
        out.params[name + ".w"] = W + scale * delta
    return out
