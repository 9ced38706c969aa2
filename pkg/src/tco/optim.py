"""Test-time constrained optimization over LoRA adapters.

Each step runs a fresh forward pass, draws a new source/target split,
evaluates the penalized objective of the chosen task, and applies one Adam
update to the trainable tensors.  Frozen tensors are never written.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .compat import CompatConfig, ViewSplit, geometric_loss, photometric_loss, sample_split
from .model import Predictions, ToyMVT
from .priors import PriorSet, g_depth, g_K, g_rot, g_trans, global_depth_align, scene_scale
from .render import RenderConfig

TASKS = ("pointmap", "pose")
COMPONENTS = ("compat", "rot", "trans", "K", "depth")


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TcoConfig:
    task: str = "pointmap"
    steps: int = 40
    lr: float = 5e-4
    lambda1: float = 0.2
    mu1: float = 1.0
    mu2: float = 2.0
    mu3: float = 0.01
    priors: tuple[str, ...] = ("pose", "intr")
    radius_scale: float = 0.5
    seed: int = 0
    train_heads: tuple[str, ...] = ()
    masked: bool = True
    detach_align: bool = True  # depth-prior (s, t) fit treated as a constant

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if min(self.lr, self.lambda1, self.mu1, self.mu2, self.mu3) < 0:
            raise ValueError("learning rate and loss weights must be >= 0")
        if self.radius_scale <= 0:
            raise ValueError("radius scale must be positive")
        unknown = set(self.priors) - {"pose", "intr", "depth"}
        if unknown:
            raise ValueError(f"unknown prior kinds {sorted(unknown)}")

    @classmethod
    def for_task(cls, task: str, **kw) -> "TcoConfig":
        """Defaults per task: pose estimation uses depth priors and lr 2e-4."""
        if task == "pose":
            base = dict(task="pose", lr=2e-4, lambda1=1.0, mu1=1.0, priors=("depth",))
        else:
            base = dict(task="pointmap")
        base.update(kw)
        return cls(**base)

    def compat(self) -> CompatConfig:
        return CompatConfig(radius_scale=self.radius_scale, masked=self.masked, render=RenderConfig())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["priors"] = list(self.priors)
        d["train_heads"] = list(self.train_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TcoConfig":
        d = dict(d)
        d["priors"] = tuple(d.get("priors", ()))
        d["train_heads"] = tuple(d.get("train_heads", ()))
        return cls(**d)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for k, g in grads.items():
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = params[k] - lr * mhat / (np.sqrt(vhat) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, replace(state, m=new_m, v=new_v, step=t)


@dataclass
class LossTrace:
    """Weighted loss components per optimization step."""

    records: list[dict] = field(default_factory=list)
    baseline: Predictions | None = None

    def __len__(self) -> int:
        return len(self.records)

    def append(self, step: int, comps: dict[str, float], split: ViewSplit | None) -> None:
        rec = {"step": step, "total": float(sum(comps.values()))}
        rec.update({k: float(comps.get(k, 0.0)) for k in COMPONENTS})
        if split is not None:
            rec["source"] = list(split.source)
        self.records.append(rec)

    def totals(self) -> np.ndarray:
        return np.array([r["total"] for r in self.records])

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @staticmethod
    def read_jsonl(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _prior_terms(pred: Predictions, priors: PriorSet, cfg: TcoConfig) -> dict[str, ad.Var]:
    terms = {}
    if priors.poses is not None and "pose" in cfg.priors:
        Rp, tp = priors.rotations(), priors.translations()
        terms["rot"] = ad.sum(g_rot(pred.R, Rp)) * cfg.mu1
        s, sp = scene_scale(pred.t), scene_scale(tp)
        terms["trans"] = ad.sum(g_trans(pred.t, tp, s, sp)) * cfg.mu2
    if priors.intrinsics is not None and "intr" in cfg.priors:
        fxp, fyp = priors.focals()
        terms["K"] = ad.sum(g_K(pred.fx, pred.fy, fxp, fyp)) * cfg.mu3
    return terms


def compose_loss_task1(pred: Predictions, images, priors: PriorSet, split: ViewSplit,
                       cfg: TcoConfig, plan=None) -> dict[str, ad.Var]:
    """Weighted components of the point-map objective, keyed by name.

    Photometric compatibility plus rotation, translation and focal penalties.
    Components for absent priors are omitted.
    """
    terms = _prior_terms(pred, priors, cfg)
    if not terms and cfg.lambda1 == 0:
        raise ValueError("empty objective: no priors and lambda1 = 0")
    if cfg.lambda1 > 0:
        terms["compat"] = photometric_loss(pred, images, split, cfg.compat(), plan=plan) * cfg.lambda1
    return terms


def compose_loss_task2(pred: Predictions, priors: PriorSet, split: ViewSplit,
                       cfg: TcoConfig, plan=None) -> dict[str, ad.Var]:
    """Weighted components of the pose objective.

    Geometric compatibility plus a depth penalty after one global
    scale/shift fit.  The depth penalty is divided by the mean prior depth so
    the objective does not depend on the units of the depth priors.
    """
    if priors.depths is None:
        raise ValueError("pose task needs depth priors")
    terms = {}
    if cfg.mu1 > 0:
        masks = priors.depth_masks
        s, t = global_depth_align(pred.depth, priors.depths, masks, detach=cfg.detach_align)
        unit = float(np.mean(priors.depths[masks]))
        per_view = [g_depth(pred.depth[i], priors.depths[i], s, t, masks[i]) for i in range(pred.n_views)]
        terms["depth"] = ad.sum(ad.stack(per_view)) * (cfg.mu1 / unit)
    if cfg.lambda1 > 0:
        terms["compat"] = geometric_loss(pred, split, cfg.compat(), plan=plan) * cfg.lambda1
    if not terms:
        raise ValueError("empty objective: lambda1 = 0 and mu1 = 0")
    return terms


def compose_loss(pred, images, priors, split, cfg: TcoConfig) -> dict[str, ad.Var]:
    if cfg.task == "pointmap":
        return compose_loss_task1(pred, images, priors, split, cfg)
    return compose_loss_task2(pred, priors, split, cfg)


def _blame(tape: ad.Tape, terms: dict[str, ad.Var], leaves: list[ad.Var]) -> str:
    """Name the first component whose own gradient is non-finite."""
    for name, term in terms.items():
        if not term.tracked:
            continue
        if not all(np.all(np.isfinite(g)) for g in tape.gradient(term, leaves)):
            return name
    return "unknown"


def run_tco(model: ToyMVT, images, priors: PriorSet, cfg: TcoConfig = TcoConfig(),
            trace_path=None) -> tuple[Predictions, LossTrace]:
    """Adapt ``model`` to one scene and return refined predictions.

    LoRA factors are reset before the first step, so every scene starts from
    the base model.  The model's trainable tensors are updated in place; the
    returned predictions come from one more forward pass after the last
    update.  ``trace.baseline`` holds the step-0 (unadapted) predictions.
    """
    images = np.asarray(images, dtype=np.float64)
    model.reset_lora(cfg.seed)
    names = model.trainable_names(cfg.train_heads)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros({k: model.params[k] for k in names})
    trace = LossTrace()
    trace.baseline = model.forward(images).detached()
    for step in range(cfg.steps):
        tape = ad.Tape()
        leaves = [tape.var(model.params[k]) for k in names]
        pred = model.forward(images, dict(zip(names, leaves)))
        split = sample_split(pred.n_views, rng)
        terms = compose_loss(pred, images, priors, split, cfg)
        comps = {k: v.item() for k, v in terms.items()}
        bad = [k for k, v in comps.items() if not np.isfinite(v)]
        if bad:
            raise NonFiniteError(f"step {step} (seed {cfg.seed}): non-finite loss component {bad[0]!r}; trace {comps}")
        trace.append(step, comps, split)
        total = ad.sum(ad.stack(list(terms.values())))
        if not total.tracked:
            continue
        grads = tape.gradient(total, leaves)
        try:
            params, state = adam_step({k: model.params[k] for k in names}, dict(zip(names, grads)), state, cfg.lr)
        except NonFiniteError as e:
            raise NonFiniteError(f"step {step} (seed {cfg.seed}): {e}; "
                                 f"culprit component {_blame(tape, terms, leaves)!r}; trace {comps}") from None
        model.params.update(params)
    refined = model.forward(images).detached() if cfg.steps else trace.baseline
    if trace_path is not None:
        trace.write_jsonl(trace_path)
    return refined, trace
