"""Similarity alignment and reconstruction / trajectory metrics.

Everything here works on plain numpy arrays.  Nearest neighbours use
``scipy.spatial.cKDTree``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, check_rotation, orthonormalize, pointmap_gradients, rotation_angle, surface_normals, to_world, unproject

MAX_EVAL_POINTS = 50_000
ICP_TOL = 1e-6


@dataclass(frozen=True)
class Sim3:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"Sim3 scale must be positive, got {self.s}")
        check_rotation(self.R, 1e-8)

    @classmethod
    def identity(cls) -> "Sim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, pts) -> np.ndarray:
        return self.s * np.asarray(pts) @ self.R.T + self.t

    def apply_pose(self, pose: Pose) -> Pose:
        """Move a camera-to-world pose; its rotation is turned, not scaled."""
        return Pose(self.R @ pose.R, self.apply(pose.t))

    def __matmul__(self, other: "Sim3") -> "Sim3":
        return Sim3(self.s * other.s, self.R @ other.R, self.s * self.R @ other.t + self.t)

    def to_dict(self) -> dict:
        return {"s": float(self.s), "R": self.R.tolist(), "t": self.t.tolist()}


@dataclass
class PointCloud:
    points: np.ndarray  # (M, 3)
    normals: np.ndarray | None = None  # (M, 3) unit
    colors: np.ndarray | None = None  # (M, 3) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in count")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    def subsample(self, max_points: int, seed: int = 0) -> "PointCloud":
        if len(self) <= max_points:
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), max_points, replace=False))
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.points[idx], pick(self.normals), pick(self.colors))

    def transformed(self, T: Sim3) -> "PointCloud":
        n = None if self.normals is None else self.normals @ T.R.T
        return PointCloud(T.apply(self.points), n, self.colors)


def _pts(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def umeyama(source, target, correspondences=None, strict: bool = True) -> Sim3:
    """Least-squares similarity with ``s R p + t ~ q`` over corresponding points.

    ``correspondences`` is an optional (K, 2) index array into source and
    target; by default points correspond by position.  With ``strict`` a
    covariance of rank below 2 (collinear points) is an error; otherwise one
    of the equally good rotations is returned.
    """
    P, Q = _pts(source), _pts(target)
    if correspondences is not None:
        c = np.asarray(correspondences, dtype=np.int64)
        P, Q = P[c[:, 0]], Q[c[:, 1]]
    if len(P) != len(Q):
        raise ValueError("source and target must correspond one to one")
    if len(P) < (3 if strict else 2):
        raise ValueError("too few correspondences for a similarity fit")
    mp, mq = P.mean(0), Q.mean(0)
    Pc, Qc = P - mp, Q - mq
    var_p = np.mean(np.sum(Pc * Pc, axis=1))
    if var_p <= 0:
        raise ValueError("source points are all identical")
    cov = Qc.T @ Pc / len(P)
    U, S, Vt = np.linalg.svd(cov)
    if strict and S[1] <= 1e-12 * max(S[0], 1e-300):
        raise ValueError("rank-deficient covariance: points are collinear")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_p)
    if s <= 0:
        raise ValueError("degenerate similarity fit (non-positive scale)")
    return Sim3(s, R, mq - s * R @ mp)


def median_spacing(points) -> float:
    """Median distance from each point to its nearest other point."""
    P = _pts(points)
    d, _ = cKDTree(P).query(P, k=2)
    return float(np.median(d[:, 1]))


def icp_refine(source, target, init: Sim3, iters: int = 30, inlier_dist: float | None = None,
               history: list | None = None) -> Sim3:
    """Point-to-point similarity ICP with distance-gated correspondences.

    The tracked error is the RMS of nearest-neighbour distances truncated at
    ``inlier_dist``; every accepted update lowers it.  ``history`` (if a list)
    receives that RMS for the initial and each accepted transform.
    """
    P, Q = _pts(source), _pts(target)
    if inlier_dist is None:
        inlier_dist = 5.0 * median_spacing(Q)
    tree = cKDTree(Q)

    def match(T):
        d, j = tree.query(T.apply(P))
        inl = d <= inlier_dist
        return np.sqrt(np.mean(np.minimum(d, inlier_dist) ** 2)), inl, j

    T = init
    err, inl, j = match(T)
    if history is not None:
        history.append(err)
    if inl.sum() < 3:
        warnings.warn("icp_refine: fewer than 3 inliers at init, returning init", RuntimeWarning, stacklevel=2)
        return init
    for _ in range(iters):
        try:
            T_new = umeyama(P[inl], Q[j[inl]])
        except ValueError:
            break
        err_new, inl_new, j_new = match(T_new)
        if err_new > err:
            break
        improvement = err - err_new
        T, err, inl, j = T_new, err_new, inl_new, j_new
        if history is not None:
            history.append(err)
        if improvement < ICP_TOL or inl.sum() < 3:
            break
    return T


def _nn(src, dst):
    d, j = cKDTree(dst).query(src)
    return d, j


def pointmap_metrics(pred: PointCloud, gt: PointCloud) -> dict[str, float]:
    """Accuracy, completion and normal consistency of aligned clouds.

    NC averages the pred->gt and gt->pred absolute cosines of matched normals
    and is omitted when either cloud lacks normals.
    """
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("pointmap_metrics needs nonempty clouds")
    d_acc, j_acc = _nn(pred.points, gt.points)
    d_comp, j_comp = _nn(gt.points, pred.points)
    out = {
        "acc_mean": float(np.mean(d_acc)), "acc_med": float(np.median(d_acc)),
        "comp_mean": float(np.mean(d_comp)), "comp_med": float(np.median(d_comp)),
    }
    if pred.normals is not None and gt.normals is not None:
        c1 = np.abs(np.sum(pred.normals * gt.normals[j_acc], axis=1))
        c2 = np.abs(np.sum(gt.normals * pred.normals[j_comp], axis=1))
        c1, c2 = np.clip(c1, 0, 1), np.clip(c2, 0, 1)
        out["nc_mean"] = float((np.mean(c1) + np.mean(c2)) / 2)
        out["nc_med"] = float((np.median(c1) + np.median(c2)) / 2)
    return out


def trajectory_metrics(pred: list[Pose], gt: list[Pose]) -> dict[str, float]:
    """ATE after Sim(3) alignment of camera centers, and consecutive-pair RPE.

    RPE is computed on the aligned trajectory: translation RMSE of relative
    translations and rotation RMSE of relative-rotation angles in degrees.
    """
    if len(pred) != len(gt):
        raise ValueError(f"pose counts differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ValueError("trajectory metrics need at least two poses")
    cp = np.stack([p.t for p in pred])
    cg = np.stack([p.t for p in gt])
    if np.allclose(cp, cp[0], atol=1e-12) or np.allclose(cg, cg[0], atol=1e-12):
        T = Sim3(1.0, np.eye(3), cg.mean(0) - cp.mean(0))
    else:
        T = umeyama(cp, cg, strict=False)
    aligned = [T.apply_pose(p) for p in pred]
    ate = float(np.sqrt(np.mean(np.sum((np.stack([p.t for p in aligned]) - cg) ** 2, axis=1))))
    dt, dr = [], []
    for i in range(len(gt) - 1):
        rp = aligned[i].inverse() @ aligned[i + 1]
        rg = gt[i].inverse() @ gt[i + 1]
        dt.append(np.sum((rp.t - rg.t) ** 2))
        dr.append(np.rad2deg(rotation_angle(rg.R.T @ rp.R)) ** 2)
    return {"ate": ate, "rpe_trans": float(np.sqrt(np.mean(dt))), "rpe_rot": float(np.sqrt(np.mean(dr)))}


def world_pointmap(depth, R, t, fx, fy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points (N, H, W, 3), unit normals and normal-validity mask."""
    cam = unproject(np.asarray(depth, float), np.asarray(fx, float), np.asarray(fy, float))
    pts = to_world(cam, np.asarray(R, float), np.asarray(t, float)).value
    gx, gy = pointmap_gradients(pts)
    n, ok = surface_normals(gx, gy)
    return pts, n.value, ok


def cloud_from_views(depth, R, t, fx, fy, images=None, mask=None) -> PointCloud:
    pts, n, ok = world_pointmap(depth, R, t, fx, fy)
    m = ok if mask is None else ok & np.asarray(mask, bool)
    col = None if images is None else np.asarray(images)[m]
    return PointCloud(pts[m], n[m], col)


def evaluate_pointmaps(pred, scene, seed: int = 0, icp_iters: int = 30,
                       max_points: int = MAX_EVAL_POINTS) -> dict:
    """Align predicted point maps to ground truth and score them.

    ``pred`` is anything with depth/R/t/fx/fy arrays (or Vars).  Umeyama runs
    on per-pixel correspondences, then ICP refines against the ground-truth
    cloud; Acc/Comp/NC use the refined alignment.
    """
    v = lambda x: np.asarray(getattr(x, "value", x), float)
    R = np.stack([orthonormalize(r) for r in v(pred.R)])
    pts, n, ok = world_pointmap(v(pred.depth), R, v(pred.t), v(pred.fx), v(pred.fy))
    gt_pts = scene.world_points()
    gx, gy = pointmap_gradients(gt_pts)
    gn, gok = surface_normals(gx, gy)
    m = ok & gok
    src = PointCloud(pts[m], n[m])
    tgt = PointCloud(gt_pts[m], gn.value[m])
    init = umeyama(src, tgt)
    src_s = src.subsample(max_points, seed)
    tgt_s = tgt.subsample(max_points, seed + 1)
    spacing = median_spacing(tgt_s)
    T = icp_refine(src_s, tgt_s, init, iters=icp_iters, inlier_dist=5.0 * spacing)
    metrics = pointmap_metrics(src_s.transformed(T), tgt_s)
    metrics.update(trajectory_metrics([Pose(r, tt) for r, tt in zip(R, v(pred.t))], scene.poses))
    metrics["icp"] = {"iters": icp_iters, "inlier_dist": float(5.0 * spacing), "spacing_factor": 5.0,
                      "n_points": len(src_s), "subsample_seed": seed}
    return metrics

