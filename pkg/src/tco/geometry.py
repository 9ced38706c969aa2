"""Camera and scene geometry.

Conventions used across the package:

* Poses are camera-to-world: a camera-frame point ``p`` maps to ``R @ p + t``,
  so the camera center in world coordinates is ``t``.
* The principal point is the image center ``(W/2, H/2)`` and pixel ``(x, y)``
  is sampled at its center ``(x + 0.5, y + 0.5)``.
* Arrays are row-major images: ``depth[y, x]`` and ``points[y, x, :]``.

Every function here accepts numpy arrays or :class:`~tco.autodiff.Var` and
returns ``Var``, so it can sit on a gradient tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

ORTHO_TOL = 1e-9
NORMAL_EPS = 1e-12


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics with the principal point at the image center."""

    fx: float
    fy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image extents must be positive")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "width": int(self.width), "height": int(self.height)}


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform ``x_world = R @ x_cam + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        check_rotation(R)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """3x4 row-major ``[R | t]``."""
        return np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        return self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.R.T + self.t


def check_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R)
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("matrix is not a proper rotation")


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# rotations

def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix, via its quaternion."""
    q = matrix_to_quat(R)
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix_np(q / np.linalg.norm(q))


def quat_to_matrix_np(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_matrix(q) -> ad.Var:
    """Differentiable map from (..., 4) scalar-first quaternions to (..., 3, 3).

    The quaternion is normalized first, so any nonzero 4-vector is valid.
    """
    q = ad.normalize(q, axis=-1)
    w, x, y, z = (q[..., k] for k in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        ad.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        ad.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], axis=-1),
        ad.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def matrix_to_quat(R) -> np.ndarray:
    """Scalar-first unit quaternion of a rotation, with nonnegative scalar.

    Works on (..., 3, 3) stacks.  Uses the largest-pivot (Shepperd) branch for
    numerical stability.
    """
    R = np.asarray(R, dtype=np.float64)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((len(flat), 4))
    for k, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        diag = (tr, m[0, 0], m[1, 1], m[2, 2])
        i = int(np.argmax(diag))
        if i == 0:
            s = np.sqrt(1.0 + tr) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif i == 1:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif i == 2:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[k] = -q if q[0] < 0 else q
    return out.reshape(R.shape[:-2] + (4,))


# ---------------------------------------------------------------------------
# point maps

def pixel_rays(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Offsets of pixel centers from the principal point, per column and row."""
    return np.arange(width) + 0.5 - width / 2.0, np.arange(height) + 0.5 - height / 2.0


def unproject(depth, fx, fy, mask=None) -> ad.Var:
    """Camera-frame point map from depth maps of shape (..., H, W).

    ``fx`` and ``fy`` broadcast against the leading axes of ``depth``.  The
    result has shape (..., H, W, 3) with ``p = ((x-cx)/fx*D, (y-cy)/fy*D, D)``.
    """
    dv = ad.value(depth)
    if dv.ndim < 2:
        raise ValueError("depth must be at least 2-D")
    valid = np.ones(dv.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("depth mask is empty")
    if np.any(dv[valid] <= 0):
        raise ValueError("non-positive depth at a valid pixel")
    H, W = dv.shape[-2:]
    rx, ry = pixel_rays(W, H)
    fx = ad.expand_dims(ad.expand_dims(fx, -1), -1) if np.ndim(ad.value(fx)) else fx
    fy = ad.expand_dims(ad.expand_dims(fy, -1), -1) if np.ndim(ad.value(fy)) else fy
    X = depth * rx / fx
    Y = depth * ry[:, None] / fy
    Z = depth if isinstance(depth, ad.Var) else ad.const(depth)
    return ad.stack([X, Y, Z], axis=-1)


def unproject_intrinsics(depth, K: Intrinsics, mask=None) -> ad.Var:
    dv = ad.value(depth)
    if dv.shape[-2:] != (K.height, K.width):
        raise ValueError(f"depth shape {dv.shape[-2:]} does not match intrinsics {K.height}x{K.width}")
    return unproject(depth, K.fx, K.fy, mask)


def project(points, fx, fy, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous image coordinates of camera-frame points.

    Pixel ``(x, y)`` has its center at ``(x + 0.5, y + 0.5)`` in these
    coordinates.
    """
    P = ad.value(points)
    z = P[..., 2]
    if np.any(z <= 0):
        raise ValueError("points behind the camera")
    return P[..., 0] / z * fx + width / 2.0, P[..., 1] / z * fy + height / 2.0


def to_world(points, R, t) -> ad.Var:
    """Map camera-frame points (..., H, W, 3) by camera-to-world ``(R, t)``.

    ``R`` has shape (..., 3, 3) and ``t`` (..., 3) with the same leading axes
    as ``points`` minus the two image axes.
    """
    pv = ad.value(points)
    lead = pv.shape[:-3]
    H, W = pv.shape[-3:-1]
    flat = ad.reshape(points, lead + (H * W, 3))
    out = ad.matmul(flat, ad.swapaxes(R, -1, -2)) + ad.expand_dims(t, -2)
    return ad.reshape(out, lead + (H, W, 3))


def pose_to_world(points, pose: Pose) -> ad.Var:
    return to_world(points, pose.R, pose.t)


def pointmap_gradients(points) -> tuple[ad.Var, ad.Var]:
    """Forward differences along x (columns) and y (rows).

    The last column/row repeats the previous difference so the output keeps
    the input shape (..., H, W, 3).
    """
    pv = ad.value(points)
    if pv.ndim < 3 or pv.shape[-1] != 3:
        raise ValueError("point map must have shape (..., H, W, 3)")
    H, W = pv.shape[-3:-1]
    if H < 2 or W < 2:
        raise ValueError("point map needs at least 2 pixels along each axis")
    dx = points[..., :, 1:, :] - points[..., :, :-1, :]
    dy = points[..., 1:, :, :] - points[..., :-1, :, :]
    gx = ad.concat([dx, dx[..., :, -1:, :]], axis=-2)
    gy = ad.concat([dy, dy[..., -1:, :, :]], axis=-3)
    return gx, gy


def surface_normals(gx, gy, eps: float = NORMAL_EPS) -> tuple[ad.Var, np.ndarray]:
    """Unit normals ``gx x gy / |gx x gy|`` and a validity mask.

    Pixels whose cross product norm is at most ``eps`` are degenerate: they
    get a zero normal and ``mask == False``.
    """
    c = ad.cross(gx, gy)
    sq = ad.sum(c * c, axis=-1)
    mask = np.sqrt(ad.value(sq)) > eps
    nrm = ad.sqrt(ad.where(mask, sq, 1.0))
    n = c / ad.expand_dims(nrm, -1) * mask[..., None]
    return n, mask
