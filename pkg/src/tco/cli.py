"""Command-line interface.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors (with a
diagnostic on stderr).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import (BENCH_TCO, BenchmarkConfig, DEFAULT_CKPT, HEAD_VARIANTS, ablation, format_table,
                        summarize, with_lora_rank)
from .evalkit import cloud_from_views, evaluate_pointmaps
from .io import (_read_geometry, _write_geometry, read_depth, read_priors, read_report, read_scene_dir,
                 write_depth, write_ply, write_priors, write_report, write_scene_dir)
from .model import Predictions, ToyMVT
from .optim import TcoConfig, run_tco
from .priors import PriorSet
from .scenes import LAYOUTS, perturb_priors, synth_scene
from .training import base_errors, perturb_decoder, pretrain_on_scene_family, scene_family

log = logging.getLogger("tco")
VERIFY_TOL = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv(kind):
    def parse(s: str):
        return tuple(x for x in s.split(",") if x) if kind is str else tuple(kind(x) for x in s.split(",") if x)
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tco", description="Test-time constrained optimization on synthetic multiview scenes.")
    p.add_argument("--version", action="version", version=f"tco {__version__}")
    p.add_argument("--verify-report", metavar="REPORT", help="re-run the experiment recorded in REPORT and compare")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene directory")
    s.add_argument("--layout", choices=LAYOUTS, default="plane")
    s.add_argument("--views", type=int, default=6)
    s.add_argument("--res", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--baseline", type=float, default=0.35)
    s.add_argument("--convergence", type=float, default=0.0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("pretrain", help="supervised pretraining on the synthetic family")
    s.add_argument("--scenes", type=_csv(str), default=LAYOUTS, help="comma-separated layouts")
    s.add_argument("--steps", type=int, default=40000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--convergence", type=float, default=0.0)
    s.add_argument("--out-ckpt", required=True)

    s = sub.add_parser("run", help="test-time optimization on one scene directory")
    s.add_argument("--scene", required=True)
    s.add_argument("--ckpt", default=str(DEFAULT_CKPT))
    s.add_argument("--task", choices=("pointmap", "pose"), default="pointmap")
    s.add_argument("--priors", type=_csv(str), default=None, help="subset of pose,intr,depth")
    s.add_argument("--prior-file", help="pose/intrinsic priors JSON (e.g. from `perturb`) replacing the scene's")
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--lr", type=float)
    s.add_argument("--lambda1", type=float)
    s.add_argument("--mu1", type=float)
    s.add_argument("--mu2", type=float)
    s.add_argument("--mu3", type=float)
    s.add_argument("--alpha", type=float, default=0.5, help="surfel radius scale")
    s.add_argument("--lora-rank", type=int)
    s.add_argument("--train-heads", type=_csv(str), default=(), help="heads to unfreeze: camera,depth")
    s.add_argument("--decoder-noise", type=float, default=0.0, help="low-rank decoder perturbation scale")
    s.add_argument("--noise-seed", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.add_argument("--ply")
    s.add_argument("--ply-binary", action="store_true")
    s.add_argument("--trace")
    s.add_argument("--save-pred", help="write refined geometry as a scene-style directory")

    s = sub.add_parser("eval", help="score saved predictions against a scene's ground truth")
    s.add_argument("--scene", required=True)
    s.add_argument("--pred", required=True, help="directory with depth/, poses.json, intrinsics.json")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")

    s = sub.add_parser("perturb", help="write noisy pose/intrinsic priors")
    s.add_argument("--scene", required=True)
    s.add_argument("--rot", type=float, default=0.0, help="degrees")
    s.add_argument("--trans", type=float, default=0.0, help="percent of translation norm")
    s.add_argument("--focal", type=float, default=0.0, help="percent")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", help="benchmark sweep, printed as a table")
    s.add_argument("--suite", required=True, choices=("radius_scale", "lora_rank", "finetune_heads", "noise"))
    s.add_argument("--ckpt", default=str(DEFAULT_CKPT))
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--steps", type=int, default=40)
    s.add_argument("--out")
    return p


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tco_config(args) -> TcoConfig:
    kw = {"steps": args.steps, "radius_scale": args.alpha, "seed": args.seed, "train_heads": tuple(args.train_heads)}
    for k in ("lr", "lambda1", "mu1", "mu2", "mu3"):
        if getattr(args, k) is not None:
            kw[k] = getattr(args, k)
    if args.priors is not None:
        kw["priors"] = tuple(args.priors)
    unknown = set(kw["train_heads"]) - set(HEAD_VARIANTS["camera+depth"])
    if unknown:
        raise UsageError(f"unknown heads {sorted(unknown)}")
    return TcoConfig.for_task(args.task, **kw)


def cmd_synth(args) -> int:
    if args.views < 2:
        raise UsageError("--views must be at least 2")
    scene = synth_scene(args.layout, seed=args.seed, n_views=args.views, resolution=args.res,
                        baseline=args.baseline, convergence=args.convergence)
    write_scene_dir(args.out, scene)
    print(f"wrote {scene.n_views} views to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    gen = scene_family(seed=args.seed, layouts=tuple(args.scenes), convergence=args.convergence)
    model = pretrain_on_scene_family(gen, args.steps, lr=args.lr, seed=args.seed, log_every=1000)
    held = [scene_family(seed=args.seed + 10_000, layouts=tuple(args.scenes), convergence=args.convergence)(i)
            for i in range(12)]
    errs = base_errors(model, held)
    model.save(args.out_ckpt, extra={"pretrain": {"steps": args.steps, "lr": args.lr, "seed": args.seed,
                                                  "layouts": list(args.scenes), "convergence": args.convergence},
                                     "held_out": errs})
    print(json.dumps({"checkpoint": args.out_ckpt, "held_out": errs}, indent=2))
    return 0


def _load_model(args) -> ToyMVT:
    model = ToyMVT.load(args.ckpt)
    if args.decoder_noise:
        model = perturb_decoder(model, args.decoder_noise, seed=args.noise_seed, rank=model.cfg.lora_rank)
    if args.lora_rank is not None:
        model = with_lora_rank(model, args.lora_rank)
    return model


def _scene_priors(sd, args, cfg: TcoConfig) -> PriorSet:
    pri = sd.priors
    if args.prior_file:
        fp = read_priors(args.prior_file)
        pri = PriorSet(poses=fp.poses, intrinsics=fp.intrinsics, depths=pri.depths, depth_masks=pri.depth_masks)
    missing = [k for k, v in (("pose", pri.poses), ("intr", pri.intrinsics), ("depth", pri.depths))
               if k in cfg.priors and v is None]
    if missing:
        raise ValueError(f"scene {sd.path} lacks requested priors: {missing}")
    return pri.subset(cfg.priors)


def execute_run(args) -> dict:
    sd = read_scene_dir(args.scene)
    cfg = tco_config(args)
    model = _load_model(args)
    priors = _scene_priors(sd, args, cfg)
    refined, trace = run_tco(model, sd.images, priors, cfg, trace_path=args.trace)
    report = {
        "tool": "tco", "version": __version__, "command": "run", "seed": args.seed,
        "config": {"tco": cfg.to_dict(), "scene": str(args.scene), "ckpt": str(args.ckpt),
                   "ckpt_sha256": _sha256(args.ckpt), "decoder_noise": args.decoder_noise,
                   "noise_seed": args.noise_seed, "lora_rank": args.lora_rank, "prior_file": args.prior_file,
                   "alpha": args.alpha, "task": args.task},
        "trace": args.trace,
        "loss": {"first": trace.records[0]["total"] if trace.records else None,
                 "last": trace.records[-1]["total"] if trace.records else None},
    }
    if sd.gt is not None:
        report["baseline"] = evaluate_pointmaps(trace.baseline, sd.gt, args.seed)
        report["refined"] = evaluate_pointmaps(refined, sd.gt, args.seed)
    if args.ply:
        a = refined.arrays()
        cloud = cloud_from_views(a["depth"], a["R"], a["t"], a["fx"], a["fy"], images=sd.images)
        write_ply(args.ply, cloud.points, cloud.colors, cloud.normals, binary=args.ply_binary)
    if args.save_pred:
        save_predictions(args.save_pred, refined, sd.names)
    return report


def save_predictions(path, pred: Predictions, names) -> None:
    root = Path(path)
    _write_geometry(root, names, pred.depth.value, pred.poses(), pred.intrinsics())
    conf = root / "confidence"
    conf.mkdir(exist_ok=True)
    for n, c in zip(names, pred.confidence.value):
        write_depth(conf / f"{n}.tcod", c)


def load_predictions(path, names) -> Predictions:
    root = Path(path)
    depths, poses, Ks = _read_geometry(root, names)
    if depths is None or poses is None or Ks is None:
        raise FileNotFoundError(f"{root}: needs depth/, poses.json and intrinsics.json")
    conf_dir = root / "confidence"
    conf = (np.stack([read_depth(conf_dir / f"{n}.tcod") for n in names]) if conf_dir.is_dir()
            else np.full(depths.shape, 2.0))
    return Predictions.from_arrays({
        "depth": depths, "confidence": conf, "R": np.stack([p.R for p in poses]), "t": np.stack([p.t for p in poses]),
        "fx": np.array([k.fx for k in Ks]), "fy": np.array([k.fy for k in Ks]),
    })


def cmd_run(args) -> int:
    report = execute_run(args)
    if args.report:
        write_report(args.report, report)
    _print_metrics(report)
    return 0


def _print_metrics(report: dict) -> None:
    keys = ("acc_mean", "comp_mean", "nc_mean", "ate", "rpe_trans", "rpe_rot")
    if "refined" not in report:
        print(json.dumps(report["loss"]))
        return
    for k in keys:
        if k not in report["refined"]:
            continue
        if k in report.get("baseline", {}):
            print(f"{k:10s} baseline {report['baseline'][k]:.5f}  refined {report['refined'][k]:.5f}")
        else:
            print(f"{k:10s} {report['refined'][k]:.5f}")


def cmd_eval(args) -> int:
    sd = read_scene_dir(args.scene)
    if sd.gt is None:
        raise ValueError(f"scene {args.scene} has no gt/ directory")
    pred = load_predictions(args.pred, sd.names)
    report = {"tool": "tco", "version": __version__, "command": "eval", "seed": args.seed,
              "config": {"scene": str(args.scene), "pred": str(args.pred)},
              "refined": evaluate_pointmaps(pred, sd.gt, args.seed)}
    if args.report:
        write_report(args.report, report)
    _print_metrics(report)
    return 0


def cmd_perturb(args) -> int:
    sd = read_scene_dir(args.scene)
    if sd.priors.poses is None and sd.priors.intrinsics is None:
        raise ValueError(f"scene {args.scene} has no pose or intrinsic priors to perturb")
    noisy = perturb_priors(sd.priors, args.rot, args.trans, args.focal, seed=args.seed)
    write_priors(args.out, noisy, sd.names, meta={"rot_deg": args.rot, "trans_pct": args.trans,
                                                  "focal_pct": args.focal, "seed": args.seed})
    print(f"wrote perturbed priors to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    base = ToyMVT.load(args.ckpt)
    bcfg = BenchmarkConfig(n_scenes=args.scenes)
    tcfg = replace(BENCH_TCO, steps=args.steps)
    rows = summarize(ablation(args.suite, base, bcfg, tcfg))
    print(format_table(rows))
    if args.out:
        write_report(args.out, {"tool": "tco", "version": __version__, "command": "ablate", "suite": args.suite,
                                "config": {"benchmark": bcfg.to_dict(), "tco": tcfg.to_dict(),
                                           "ckpt": str(args.ckpt)}, "rows": rows})
    return 0


def verify_report(path) -> int:
    """Re-run a `run` report and compare every metric within VERIFY_TOL."""
    old = read_report(path)
    if old.get("command") != "run":
        raise ValueError(f"{path}: only `run` reports can be verified")
    c = old["config"]
    t = c["tco"]
    argv = ["run", "--scene", c["scene"], "--ckpt", c["ckpt"], "--task", t["task"],
            "--priors", ",".join(t["priors"]), "--steps", str(t["steps"]), "--lr", repr(t["lr"]),
            "--lambda1", repr(t["lambda1"]), "--mu1", repr(t["mu1"]), "--mu2", repr(t["mu2"]),
            "--mu3", repr(t["mu3"]), "--alpha", repr(t["radius_scale"]), "--seed", str(t["seed"]),
            "--decoder-noise", repr(c["decoder_noise"]), "--noise-seed", str(c["noise_seed"])]
    if t["train_heads"]:
        argv += ["--train-heads", ",".join(t["train_heads"])]
    if c.get("lora_rank") is not None:
        argv += ["--lora-rank", str(c["lora_rank"])]
    if c.get("prior_file"):
        argv += ["--prior-file", c["prior_file"]]
    if _sha256(c["ckpt"]) != c["ckpt_sha256"]:
        raise ValueError(f"checkpoint {c['ckpt']} changed since the report was written")
    new = execute_run(build_parser().parse_args(argv))
    worst = 0.0
    for part in ("baseline", "refined"):
        for k, v in old.get(part, {}).items():
            if isinstance(v, (int, float)):
                worst = max(worst, abs(v - new[part][k]))
    ok = worst <= VERIFY_TOL
    print(f"verify {path}: max metric difference {worst:.3e} -> {'OK' if ok else 'MISMATCH'}")
    return 0 if ok else 2


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "run": cmd_run, "eval": cmd_eval,
            "perturb": cmd_perturb, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.verify_report:
            return verify_report(args.verify_report)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures become exit code 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
