"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Benchmark results are computed once per session and shared between criteria.
"""
import time
from dataclasses import replace

import numpy as np

from tco.benchmark import (
    BENCH_POSE, BENCH_TCO, BenchmarkConfig, DEFAULT_CKPT, HEAD_VARIANTS, NOISE_TIERS, load_base_model, run_benchmark,
)
from tco.cli import main
from tco.evalkit import PointCloud, Sim3, pointmap_metrics, umeyama
from tco.geometry import Pose, random_rotation
from tco.model import ToyMVT
from tco.optim import AdamState, TcoConfig, adam_step, run_tco
from tco.priors import g_trans, global_depth_align, scene_scale
from tco.render import render
from tco.scenes import synth_scene
from tco.splats import splats_for_view

import gradcases
from conftest import ACCEPTANCE_LINES
from oracles import adam_reference, brute_force_metrics

BENCH = BenchmarkConfig()
_CACHE: dict = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def base_model() -> ToyMVT:
    if "base" not in _CACHE:
        _CACHE["base"] = load_base_model()
    return _CACHE["base"]


def bench(name: str, tcfg: TcoConfig = BENCH_TCO, **kw) -> list[dict]:
    if name not in _CACHE:
        t = time.time()
        _CACHE[name] = run_benchmark(base_model(), BENCH, tcfg, **kw)
        _CACHE[name + ":time"] = time.time() - t
    return _CACHE[name]


def acc(results, which="refined"):
    return np.array([r[which]["acc_mean"] for r in results])


def comp(results, which="refined"):
    return np.array([r[which]["comp_mean"] for r in results])


# 1 -----------------------------------------------------------------------------------------

def test_criterion_1_gradients():
    t = time.time()
    worst = gradcases.run_all(gradcases.N_SEEDS)
    elapsed = time.time() - t
    fails = {k: v for k, v in worst.items() if v >= gradcases.CASES[k].tol}
    skipped, probes = sum(gradcases.SKIPPED.values()), sum(gradcases.PROBES.values())
    ok = not fails and skipped <= 0.01 * probes and elapsed < 300
    report(1, ok, f"{len(worst)} ops x {gradcases.N_SEEDS} seeds, worst rel err "
                  f"{max(worst.values()):.2e}, failing {sorted(fails)}, "
                  f"{skipped}/{probes} probes skipped at kinks, {elapsed:.0f}s")
    assert ok


# 2 -----------------------------------------------------------------------------------------

def test_criterion_2_error_halving():
    res = bench("main")
    ra = acc(res) / acc(res, "baseline")
    rc = comp(res) / comp(res, "baseline")
    n_acc, n_comp = int(np.sum(ra <= 0.5)), int(np.sum(rc <= 0.6))
    n_both = int(np.sum((ra <= 0.5) & (rc <= 0.6)))
    elapsed = _CACHE["main:time"]
    ok = n_both >= 8 and elapsed < 1200
    report(2, ok, f"scenes with Acc -50% and Comp -40%: {n_both}/10 (Acc {n_acc}, Comp {n_comp}); "
                  f"Acc ratios {np.round(ra, 2).tolist()}; {elapsed:.0f}s")
    assert ok


# 3 -----------------------------------------------------------------------------------------

def test_criterion_3_compat_objective_needed():
    full = bench("main")
    priors_only = bench("lambda0", replace(BENCH_TCO, lambda1=0.0))
    gain_full = acc(full, "baseline") - acc(full)
    gain_p = acc(priors_only, "baseline") - acc(priors_only)
    n = int(np.sum(gain_p < gain_full))
    ok = n >= 7
    report(3, ok, f"priors-only improves Acc less than priors+compat in {n}/10 scenes")
    assert ok


# 4 -----------------------------------------------------------------------------------------

def test_criterion_4_pose_task():
    res = bench("pose", BENCH_POSE)
    r = np.array([x["refined"]["ate"] / x["baseline"]["ate"] for x in res])
    n = int(np.sum(r <= 0.7))
    ok = n >= 8
    report(4, ok, f"ATE reduced >= 30% in {n}/10 scenes; ratios {np.round(r, 2).tolist()}")
    assert ok


# 5 -----------------------------------------------------------------------------------------

def test_criterion_5_freeze_heads():
    dec = bench("main")
    heads = bench("heads", replace(BENCH_TCO, train_heads=HEAD_VARIANTS["camera+depth"]))
    a_dec, a_heads = float(np.mean(acc(dec))), float(np.mean(acc(heads)))
    ok = a_heads > a_dec
    report(5, ok, f"mean Acc decoder-only {a_dec:.4f} vs +camera+depth heads {a_heads:.4f}")
    assert ok


# 6 -----------------------------------------------------------------------------------------

def test_criterion_6_noise_robustness():
    means = {"clean": float(np.mean(acc(bench("main"))))}
    low = None
    for tier in ("low", "mid", "high"):
        res = bench(f"noise:{tier}", noise=NOISE_TIERS[tier])
        means[tier] = float(np.mean(acc(res)))
        if tier == "low":
            low = res
    base_mean = float(np.mean(acc(low, "baseline")))
    improves = means["low"] < base_mean
    order = [means[k] for k in ("clean", "low", "mid", "high")]
    monotone = all(b >= a for a, b in zip(order, order[1:])) and order[-1] > order[0]
    ok = improves and monotone
    report(6, ok, f"baseline Acc {base_mean:.4f}; refined Acc clean/low/mid/high "
                  f"{' / '.join(f'{v:.4f}' for v in order)}")
    assert ok


# 7 -----------------------------------------------------------------------------------------

def test_criterion_7_oracles():
    rng = np.random.default_rng(7)
    worst = {"umeyama": 0.0, "metrics": 0.0, "adam": 0.0, "align": 0.0}
    for _ in range(50):
        P = rng.normal(size=(int(rng.integers(4, 80)), 3))
        G = Sim3(float(rng.uniform(0.2, 5)), random_rotation(rng), rng.normal(size=3))
        T = umeyama(P, G.apply(P))
        worst["umeyama"] = max(worst["umeyama"], abs(T.s - G.s), np.max(np.abs(T.R - G.R)), np.max(np.abs(T.t - G.t)))

        n, m = int(rng.integers(1, 500)), int(rng.integers(1, 500))
        A, B = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        An = rng.normal(size=(n, 3))
        Bn = rng.normal(size=(m, 3))
        An /= np.linalg.norm(An, axis=1, keepdims=True)
        Bn /= np.linalg.norm(Bn, axis=1, keepdims=True)
        got, ref = pointmap_metrics(PointCloud(A, An), PointCloud(B, Bn)), brute_force_metrics(A, B, An, Bn)
        worst["metrics"] = max(worst["metrics"], max(abs(got[k] - ref[k]) for k in ref))

        x0 = rng.normal(size=4)
        grads = [rng.normal(size=4) for _ in range(20)]
        ref_x = adam_reference(grads, 1e-2, x0=x0)
        p, s = {"x": x0.copy()}, AdamState.zeros({"x": x0})
        for k, g in enumerate(grads):
            p, s = adam_step(p, {"x": g}, s, 1e-2)
            worst["adam"] = max(worst["adam"], np.max(np.abs(p["x"] - ref_x[k])))

        D = rng.uniform(0.5, 5, (3, 8, 8))
        Pd = rng.uniform(0.3, 3) * D + rng.normal() + 0.05 * rng.normal(size=D.shape)
        mask = rng.random(D.shape) < 0.8
        sa, ta = global_depth_align(D, Pd, mask)
        M = np.column_stack([D[mask], np.ones(mask.sum())])
        so, to = np.linalg.solve(M.T @ M, M.T @ Pd[mask])  # normal equations
        worst["align"] = max(worst["align"], abs(sa - so), abs(ta - to))
    tol = {"umeyama": 1e-8, "metrics": 0.0, "adam": 1e-12, "align": 1e-10}
    ok = all(worst[k] <= tol[k] for k in tol)
    report(7, ok, ", ".join(f"{k} {worst[k]:.1e} (tol {tol[k]:.0e})" for k in tol))
    assert ok


# 8 -----------------------------------------------------------------------------------------

def test_criterion_8_invariants():
    base = base_model()
    scene = synth_scene("box", seed=BENCH.scene_seed, n_views=BENCH.n_views, resolution=BENCH.resolution)
    keys = ("depth", "confidence", "R", "t", "fx", "fy")
    checks = {}

    m = base.copy()
    stripped = ToyMVT(m.cfg, {k: v for k, v in m.params.items() if not k.startswith("lora.")})
    a, b = m.forward(scene.images), stripped.forward(scene.images)
    checks["zero-LoRA bitwise"] = all(np.array_equal(getattr(a, k).value, getattr(b, k).value) for k in keys)

    out, _ = run_tco(base.copy(), scene.images, scene.priors(), replace(BENCH_TCO, steps=0))
    checks["steps=0 baseline"] = all(np.array_equal(getattr(out, k).value, getattr(a, k).value) for k in keys)

    m = base.copy()
    h = m.frozen_hash()
    run_tco(m, scene.images, scene.priors(), replace(BENCH_TCO, steps=3))
    checks["frozen hash"] = m.frozen_hash() == h

    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        tp = rng.normal(size=(6, 3))
        t = tp + 0.3 * rng.normal(size=(6, 3))
        k = float(np.exp(rng.uniform(-4, 4)))
        g0 = g_trans(t, tp, scene_scale(t), scene_scale(tp)).value
        g1 = g_trans(k * t, tp, scene_scale(k * t), scene_scale(tp)).value
        worst = max(worst, float(np.max(np.abs(g1 - g0))))
    checks["g_trans scale"] = worst < 1e-12

    worst_r = 0.0
    for i in range(10):
        sc = synth_scene(("plane", "box", "two-walls")[i % 3], seed=i, n_views=2, resolution=24)
        s = splats_for_view(sc.images[0], sc.depths[0], np.full(sc.depths[0].shape, 8.0), sc.poses[0], sc.intrinsics[0])
        G = Pose(random_rotation(rng), rng.normal(size=3) * 2)
        r0 = render(s, sc.poses[1], sc.intrinsics[1])
        r1 = render(s.transformed(G.R, G.t), G @ sc.poses[1], sc.intrinsics[1])
        worst_r = max(worst_r, float(np.max(np.abs(r0.color.value - r1.color.value))),
                      float(np.max(np.abs(r0.depth.value - r1.depth.value))))
    checks["render gauge"] = worst_r < 1e-6
    ok = all(checks.values())
    report(8, ok, ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items())
           + f" (g_trans {worst:.1e}, render {worst_r:.1e})")
    assert ok


# 9 -----------------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    scene_dir = tmp_path / "scene"
    assert main(["synth", "--layout", "two-walls", "--seed", "5", "--views", "6", "--res", "32",
                 "--out", str(scene_dir)]) == 0
    rep, trace = tmp_path / "r.json", tmp_path / "t.jsonl"
    argv = ["run", "--scene", str(scene_dir), "--ckpt", str(DEFAULT_CKPT), "--steps", "10",
            "--lr", repr(BENCH_TCO.lr), "--lambda1", repr(BENCH_TCO.lambda1), "--decoder-noise",
            repr(BENCH.decoder_noise), "--seed", "3", "--report", str(rep), "--trace", str(trace)]
    outputs = []
    for _ in range(2):
        assert main(argv) == 0
        outputs.append((rep.read_bytes(), trace.read_bytes()))
    ok = outputs[0] == outputs[1]
    report(9, ok, f"two identical runs: report {'identical' if outputs[0][0] == outputs[1][0] else 'DIFFERENT'}, "
                  f"trace {'identical' if outputs[0][1] == outputs[1][1] else 'DIFFERENT'}")
    assert ok
