"""On-disk formats: scene directories, depth files, priors, PLY and reports.

Scene directory layout::

    images/NAME.png        8-bit RGB, one per view, ordered by filename
    depth/NAME.tcod        optional depth priors
    poses.json             optional camera-to-world 3x4 row-major poses
    intrinsics.json        optional fx, fy, width, height per view
    gt/                    optional mirror of depth/, poses.json, intrinsics.json

TCOD depth file: 16-byte header (``b"TCOD"``, u32 width, u32 height, u32
reserved = 0, all little-endian) followed by width * height little-endian
float32 values in row-major order.  Non-finite or non-positive values mark
invalid pixels.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose
from .priors import PriorSet
from .scenes import Scene

TCOD_MAGIC = b"TCOD"
_PLY_PROPS = [("x", "f4"), ("y", "f4"), ("z", "f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1"),
              ("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
_PLY_TYPES = {"f4": "float", "u1": "uchar"}


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- depth -------------------------------------------------------------------

def write_depth(path, depth) -> Path:
    d = np.asarray(depth)
    if d.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {d.shape}")
    path = Path(path)
    H, W = d.shape
    with open(path, "wb") as fh:
        fh.write(TCOD_MAGIC + struct.pack("<III", W, H, 0))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())
    return path


def read_depth(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != TCOD_MAGIC:
        raise ValueError(f"{path}: not a TCOD depth file")
    W, H, _ = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * W * H:
        raise ValueError(f"{path}: expected {W}x{H} floats, file size {len(data)} does not match")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(H, W).astype(np.float64)


# -- images ----------------------------------------------------------------

def write_image(path, rgb) -> Path:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)
    return Path(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# -- poses and intrinsics ------------------------------------------------------

def poses_to_json(poses: list[Pose], names: list[str]) -> list[dict]:
    return [{"image": n, "pose": p.matrix.tolist()} for n, p in zip(names, poses)]


def poses_from_json(items: list[dict]) -> list[Pose]:
    return [Pose.from_matrix(np.asarray(it["pose"], dtype=np.float64)) for it in items]


def intrinsics_to_json(Ks: list[Intrinsics], names: list[str]) -> list[dict]:
    return [dict(image=n, **K.to_dict()) for n, K in zip(names, Ks)]


def intrinsics_from_json(items: list[dict]) -> list[Intrinsics]:
    return [Intrinsics(float(it["fx"]), float(it["fy"]), int(it["width"]), int(it["height"])) for it in items]


def write_priors(path, priors: PriorSet, names: list[str] | None = None, meta: dict | None = None) -> Path:
    """Pose and intrinsic priors (not depth) as one JSON file."""
    n = priors.n_views or 0
    names = names or [f"{i:03d}" for i in range(n)]
    obj = {"meta": meta or {}}
    if priors.poses is not None:
        obj["poses"] = poses_to_json(priors.poses, names)
    if priors.intrinsics is not None:
        obj["intrinsics"] = intrinsics_to_json(priors.intrinsics, names)
    path = Path(path)
    _dump_json(obj, path)
    return path


def read_priors(path) -> PriorSet:
    obj = json.loads(Path(path).read_text())
    return PriorSet(
        poses=poses_from_json(obj["poses"]) if "poses" in obj else None,
        intrinsics=intrinsics_from_json(obj["intrinsics"]) if "intrinsics" in obj else None,
    )


# -- scene directories ---------------------------------------------------------

@dataclass
class SceneDir:
    path: Path
    names: list[str]
    images: np.ndarray  # (N, H, W, 3)
    priors: PriorSet
    gt: Scene | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.names)


def _write_geometry(root: Path, names, depths, poses, Ks) -> None:
    root.mkdir(parents=True, exist_ok=True)
    if depths is not None:
        (root / "depth").mkdir(exist_ok=True)
        for n, d in zip(names, depths):
            write_depth(root / "depth" / f"{n}.tcod", d)
    if poses is not None:
        _dump_json(poses_to_json(poses, names), root / "poses.json")
    if Ks is not None:
        _dump_json(intrinsics_to_json(Ks, names), root / "intrinsics.json")


def _read_geometry(root: Path, names):
    depths = poses = Ks = None
    if (root / "depth").is_dir():
        depths = np.stack([read_depth(root / "depth" / f"{n}.tcod") for n in names])
    if (root / "poses.json").exists():
        poses = poses_from_json(json.loads((root / "poses.json").read_text()))
        if len(poses) != len(names):
            raise ValueError(f"{root / 'poses.json'}: {len(poses)} poses for {len(names)} images")
    if (root / "intrinsics.json").exists():
        Ks = intrinsics_from_json(json.loads((root / "intrinsics.json").read_text()))
        if len(Ks) != len(names):
            raise ValueError(f"{root / 'intrinsics.json'}: {len(Ks)} entries for {len(names)} images")
    return depths, poses, Ks


def write_scene_dir(path, scene: Scene, priors: PriorSet | None = None, with_gt: bool = True) -> Path:
    """Write ``scene`` as a scene directory.

    Top-level geometry files hold ``priors`` (by default the exact scene
    geometry); ``gt/`` holds the exact geometry when ``with_gt``.
    """
    root = Path(path)
    names = [f"{i:03d}" for i in range(scene.n_views)]
    (root / "images").mkdir(parents=True, exist_ok=True)
    for n, img in zip(names, scene.images):
        write_image(root / "images" / f"{n}.png", img)
    p = priors if priors is not None else scene.priors()
    _write_geometry(root, names, p.depths, p.poses, p.intrinsics)
    if with_gt:
        _write_geometry(root / "gt", names, scene.depths, scene.poses, scene.intrinsics)
    _dump_json(scene.meta, root / "scene.json")
    return root


def read_scene_dir(path) -> SceneDir:
    root = Path(path)
    files = sorted((root / "images").glob("*.png"))
    if not files:
        raise FileNotFoundError(f"{root / 'images'}: no PNG images")
    names = [f.stem for f in files]
    images = np.stack([read_image(f) for f in files])
    if len({im.shape for im in images}) > 1:
        raise ValueError(f"{root}: views differ in resolution")
    depths, poses, Ks = _read_geometry(root, names)
    priors = PriorSet(poses=poses, intrinsics=Ks, depths=depths)
    gt = None
    if (root / "gt").is_dir():
        gd, gp, gk = _read_geometry(root / "gt", names)
        if gd is not None and gp is not None and gk is not None:
            first_inv = gp[0].inverse()
            gt = Scene(images, gd, [first_inv @ p for p in gp], gk)
    meta = json.loads((root / "scene.json").read_text()) if (root / "scene.json").exists() else {}
    if gt is not None:
        gt.meta = meta
    return SceneDir(root, names, images, priors, gt, meta)


# -- point clouds ------------------------------------------------------------

def write_ply(path, points, colors=None, normals=None, binary: bool = False) -> Path:
    """PLY 1.0 with x, y, z, red, green, blue, nx, ny, nz per vertex."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(P)
    C = np.zeros((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    N = np.zeros((n, 3)) if normals is None else np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    rec = np.empty(n, dtype=[(k, "<" + t if t != "u1" else t) for k, t in _PLY_PROPS])
    for i, k in enumerate("xyz"):
        rec[k] = P[:, i]
    for i, k in enumerate(("red", "green", "blue")):
        rec[k] = np.clip(np.round(C[:, i] * 255.0), 0, 255).astype(np.uint8)
    for i, k in enumerate(("nx", "ny", "nz")):
        rec[k] = N[:, i]
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {k}" for k, t in _PLY_PROPS]
    header.append("end_header")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fh.write(rec.tobytes())
            else:
                for r in rec:
                    fh.write((" ".join(_ply_field(r[k], t) for k, t in _PLY_PROPS) + "\n").encode("ascii"))
    except OSError as e:
        raise OSError(f"cannot write point cloud to {path}: {e}") from e
    return path


def _ply_field(v, t: str) -> str:
    return str(int(v)) if t == "u1" else repr(float(np.float32(v)))


def read_ply(path) -> dict[str, np.ndarray]:
    """Parse a PLY written by :func:`write_ply`; returns points, colors, normals."""
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    fmt = next(l.split()[1] for l in lines if l.startswith("format"))
    n = int(next(l.split()[2] for l in lines if l.startswith("element vertex")))
    props = [l.split()[2] for l in lines if l.startswith("property")]
    if props != [k for k, _ in _PLY_PROPS]:
        raise ValueError(f"{path}: unexpected vertex properties {props}")
    body = data[end + len(b"end_header\n"):]
    dt = np.dtype([(k, "<" + t if t != "u1" else t) for k, t in _PLY_PROPS])
    if fmt == "binary_little_endian":
        rec = np.frombuffer(body, dtype=dt, count=n)
    elif fmt == "ascii":
        rows = np.loadtxt(body.decode("ascii").splitlines(), ndmin=2) if n else np.zeros((0, 9))
        rec = np.empty(n, dtype=dt)
        for i, (k, _) in enumerate(_PLY_PROPS):
            rec[k] = rows[:, i]
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    col = lambda ks: np.column_stack([rec[k].astype(np.float64) for k in ks])
    return {"points": col("xyz"), "colors": col(("red", "green", "blue")) / 255.0, "normals": col(("nx", "ny", "nz"))}


# -- reports -------------------------------------------------------------------

def write_report(path, report: dict) -> Path:
    _check_finite(report)
    path = Path(path)
    _dump_json(report, path)
    return path


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def _check_finite(obj, where="report"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")
    elif isinstance(obj, float) and not np.isfinite(obj):
        raise ValueError(f"non-finite number at {where}")
