"""Synthetic benchmark: degraded base model, test-time optimization, metrics.

Each benchmark scene gets its own copy of the pretrained model with a
seeded low-rank perturbation of the decoder.  Step-0 predictions of that
copy are the baseline; the refined predictions come from optimizing its
adapters on the scene.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .evalkit import evaluate_pointmaps
from .model import ModelConfig, ToyMVT, init_lora
from .optim import TcoConfig, run_tco
from .priors import PriorSet
from .scenes import LAYOUTS, Scene, perturb_priors, synth_scene
from .training import perturb_decoder

DEFAULT_CKPT = Path(__file__).with_name("data") / "base_model.ckpt"
NOISE_TIERS = {"clean": (0.0, 0.0, 0.0), "low": (1.0, 1.0, 1.0), "mid": (3.0, 5.0, 5.0), "high": (5.0, 10.0, 10.0)}
RADIUS_SCALES = (0.05, 0.5, 5.0)
LORA_RANKS = (1, 4, 16)
# test-time settings for the benchmark; lr and lambda1 are benchmark overrides
BENCH_TCO = TcoConfig(task="pointmap", steps=40, lr=5e-4, lambda1=1.0, priors=("pose", "intr"))
BENCH_POSE = TcoConfig.for_task("pose", steps=40)
HEAD_VARIANTS = {"decoder": (), "camera": ("camera",), "depth": ("depth",), "camera+depth": ("camera", "depth")}


@dataclass(frozen=True)
class BenchmarkConfig:
    n_scenes: int = 10
    scene_seed: int = 777
    n_views: int = 6
    resolution: int = 32
    layouts: tuple[str, ...] = LAYOUTS
    convergence: float = 0.0
    decoder_noise: float = 1.0
    noise_rank: int = 4
    noise_seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layouts"] = list(self.layouts)
        return d


def load_base_model(path=None) -> ToyMVT:
    return ToyMVT.load(DEFAULT_CKPT if path is None else path)


def benchmark_scene(cfg: BenchmarkConfig, i: int) -> Scene:
    layout = cfg.layouts[i % len(cfg.layouts)]
    return synth_scene(layout, seed=cfg.scene_seed + i, n_views=cfg.n_views, resolution=cfg.resolution,
                       convergence=cfg.convergence)


def with_lora_rank(model: ToyMVT, rank: int) -> ToyMVT:
    """Same frozen weights, adapters of a different rank."""
    cfg = replace(model.cfg, lora_rank=rank)
    params = {k: v for k, v in model.params.items() if not k.startswith("lora.")}
    params.update(init_lora(cfg))
    return ToyMVT(cfg, params)


def degraded_model(base: ToyMVT, cfg: BenchmarkConfig, i: int) -> ToyMVT:
    if cfg.decoder_noise == 0:
        return base.copy()
    return perturb_decoder(base, cfg.decoder_noise, seed=cfg.noise_seed + i, rank=cfg.noise_rank)


def scene_priors(scene: Scene, kinds, noise=(0.0, 0.0, 0.0), seed: int = 0) -> PriorSet:
    priors = scene.priors(kinds)
    if any(noise):
        priors = perturb_priors(priors, *noise, seed=seed)
    return priors


def run_scene(base: ToyMVT, bcfg: BenchmarkConfig, tcfg: TcoConfig, i: int, noise=(0.0, 0.0, 0.0),
              lora_rank: int | None = None) -> dict:
    """Baseline and refined metrics for benchmark scene ``i``."""
    scene = benchmark_scene(bcfg, i)
    model = degraded_model(base, bcfg, i)
    if lora_rank is not None and lora_rank != model.cfg.lora_rank:
        model = with_lora_rank(model, lora_rank)
    priors = scene_priors(scene, tcfg.priors, noise, seed=1000 + i)
    cfg = replace(tcfg, seed=tcfg.seed + i)
    refined, trace = run_tco(model, scene.images, priors, cfg)
    return {
        "scene": i, "layout": scene.meta["layout"],
        "baseline": _strip(evaluate_pointmaps(trace.baseline, scene)),
        "refined": _strip(evaluate_pointmaps(refined, scene)),
        "loss": [r["total"] for r in trace.records],
    }


def _strip(m: dict) -> dict:
    return {k: v for k, v in m.items() if k != "icp"}


def run_benchmark(base: ToyMVT, bcfg: BenchmarkConfig, tcfg: TcoConfig, **kw) -> list[dict]:
    return [run_scene(base, bcfg, tcfg, i, **kw) for i in range(bcfg.n_scenes)]


def ratios(results: list[dict], key: str) -> np.ndarray:
    """Refined over baseline value of ``key`` per scene."""
    return np.array([r["refined"][key] / r["baseline"][key] for r in results])


def mean_metric(results: list[dict], key: str, which: str = "refined") -> float:
    return float(np.mean([r[which][key] for r in results]))


def ablation(suite: str, base: ToyMVT, bcfg: BenchmarkConfig, tcfg: TcoConfig) -> dict[str, list[dict]]:
    """Benchmark results per variant of one ablation suite."""
    if suite == "radius_scale":
        return {f"alpha={a}": run_benchmark(base, bcfg, replace(tcfg, radius_scale=a)) for a in RADIUS_SCALES}
    if suite == "lora_rank":
        return {f"rank={r}": run_benchmark(base, bcfg, tcfg, lora_rank=r) for r in LORA_RANKS}
    if suite == "finetune_heads":
        return {k: run_benchmark(base, bcfg, replace(tcfg, train_heads=h)) for k, h in HEAD_VARIANTS.items()}
    if suite == "noise":
        return {k: run_benchmark(base, bcfg, tcfg, noise=n) for k, n in NOISE_TIERS.items()}
    raise ValueError(f"unknown ablation suite {suite!r}")


def summarize(variants: dict[str, list[dict]], keys=("acc_mean", "comp_mean", "nc_mean", "ate")) -> list[dict]:
    rows = []
    for name, res in variants.items():
        row = {"variant": name}
        for k in keys:
            row[f"{k}_base"] = mean_metric(res, k, "baseline")
            row[k] = mean_metric(res, k)
        rows.append(row)
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    width = {c: max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(width[c]) for c in cols)]
    lines += ["  ".join(_fmt(r[c]).ljust(width[c]) for c in cols) for r in rows]
    return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)
