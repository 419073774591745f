"""Core geometric types and the scale/pose/ray/depth composition algebra.

Conventions: camera frame is x-right, y-down, z-forward; the world frame is
the camera frame of view 0; pixel ``(u, v)`` = (column, row) has its center
at continuous coordinate ``(u + 0.5, v + 0.5)`` relative to the intrinsics,
so ``project`` returns index-space coordinates where pixel centers are
integers. Ray depth is the Euclidean distance along the unit ray.

All arithmetic is float64. Invalid pixels carry NaN, but the boolean mask
is authoritative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, InvalidIntrinsicsError, InvariantViolation

QUAT_TOL = 1e-6


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------


def _check_unit(q: np.ndarray) -> float:
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > QUAT_TOL:
        raise InvariantViolation(f"quaternion norm {n!r} is not 1 within {QUAT_TOL}")
    return n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=np.float64)
    n = _check_unit(q)
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` for a rotation matrix.

    Uses Shepperd's branch selection so the largest component is recovered
    from the diagonal, which keeps the result well conditioned everywhere.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise DimensionError(f"expected a 3x3 matrix, got {R.shape}")
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return canonical_quat(q)


def canonical_quat(q) -> np.ndarray:
    """Representative of ``{q, -q}`` with ``w >= 0``; when ``w == 0`` the first nonzero component is positive."""
    q = np.asarray(q, dtype=np.float64)
    nz = np.flatnonzero(q)
    return -q if nz.size and q[nz[0]] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    half = 0.5 * angle
    return canonical_quat(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


def rotvec_delta(rotvec) -> np.ndarray:
    """``exp([w]x) - I`` via Rodrigues, exactly zero for a zero rotation vector."""
    w = np.asarray(rotvec, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta == 0.0:
        return np.zeros((3, 3))
    k = w / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidIntrinsicsError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidIntrinsicsError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidIntrinsicsError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform, ``x_world = R(q) x_cam + t``.

    The quaternion is normalized and sign-canonicalized (``w >= 0``) on
    construction, so ``Pose(q)`` and ``Pose(-q)`` are the same object.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        n = _check_unit(q)
        object.__setattr__(self, "q", canonical_quat(q / n))
        object.__setattr__(self, "t", t.copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.R.T + self.t

    def rotate(self, vecs) -> np.ndarray:
        return np.asarray(vecs, dtype=np.float64) @ self.R.T

    def inverse(self) -> "Pose":
        return inverse_pose(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose_pose(self, other)

    def is_identity(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.q - [1, 0, 0, 0]) <= tol) and np.all(np.abs(self.t) <= tol))

    def to_list(self) -> list[float]:
        return [float(v) for v in np.concatenate([self.q, self.t])]

    @classmethod
    def from_list(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4], v[4:7])

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


@dataclass
class RayMap:
    dirs: np.ndarray  # H x W x 3

    @property
    def shape(self) -> tuple[int, int]:
        return self.dirs.shape[:2]


@dataclass
class RayDepthMap:
    d: np.ndarray  # H x W
    valid: np.ndarray  # H x W bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


@dataclass
class Pointmap:
    pts: np.ndarray  # H x W x 3
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.pts.shape[:2]


@dataclass
class SceneFlowField:
    flow: np.ndarray  # H x W x 3
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]

    @classmethod
    def zeros(cls, shape) -> "SceneFlowField":
        h, w = shape
        return cls(np.zeros((h, w, 3)), np.ones((h, w), dtype=bool))


@dataclass(frozen=True)
class MetricScale:
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise InvariantViolation(f"metric scale must be positive, got {self.s}")

    def __float__(self):
        return float(self.s)


@dataclass
class OpticalFlowField:
    uv: np.ndarray  # H x W x 2, pixel displacement view 0 -> view t
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.uv.shape[:2]


@dataclass
class ViewBundle:
    """One view's grids plus its camera.

    ``scene_flow``, ``ego_flow``, ``points_after``, ``optical_flow`` and
    ``doppler`` all live on view 0's pixel grid: they describe where view-0
    surface points are at this view's timestamp.
    """

    intrinsics: Intrinsics
    pose: Pose
    rays: RayMap
    ray_depth: RayDepthMap
    scene_flow: Optional[SceneFlowField] = None
    doppler: Optional[np.ndarray] = None
    doppler_valid: Optional[np.ndarray] = None
    motion_mask: Optional[np.ndarray] = None
    confidence: Optional[np.ndarray] = None
    ego_flow: Optional[SceneFlowField] = None
    points_after: Optional[Pointmap] = None
    optical_flow: Optional[OpticalFlowField] = None
    image_ref: Optional[str] = None

    def __post_init__(self):
        shape = self.rays.shape
        if self.ray_depth.shape != shape:
            raise DimensionError(f"ray depth {self.ray_depth.shape} does not match rays {shape}")
        if self.intrinsics.shape != tuple(shape):
            raise DimensionError(f"intrinsics {self.intrinsics.shape} do not match grids {shape}")
        for name in ("scene_flow", "ego_flow", "points_after", "optical_flow"):
            g = getattr(self, name)
            if g is not None and tuple(g.shape) != tuple(shape):
                raise DimensionError(f"{name} grid {g.shape} does not match {shape}")
        for name in ("doppler", "doppler_valid", "motion_mask", "confidence"):
            g = getattr(self, name)
            if g is not None and g.shape != tuple(shape):
                raise DimensionError(f"{name} grid {g.shape} does not match {shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.rays.shape)


@dataclass
class SceneSequence:
    views: list
    scale: float = 1.0
    kind: str = "gt"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.views) < 1:
            raise InvariantViolation("a scene sequence needs at least one view")
        self.scale = float(self.scale)
        MetricScale(self.scale)
        shape = self.views[0].shape
        for i, v in enumerate(self.views):
            if v.shape != shape:
                raise DimensionError(f"view {i} has shape {v.shape}, view 0 has {shape}")

    def __len__(self):
        return len(self.views)

    @property
    def shape(self) -> tuple[int, int]:
        return self.views[0].shape

    def with_scale(self, scale: float) -> "SceneSequence":
        return SceneSequence(list(self.views), scale, self.kind, dict(self.meta))


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def pixel_grid(height: int, width: int) -> np.ndarray:
    """H x W x 2 array of integer pixel coordinates ``(u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def unproject_dirs(K: Intrinsics, uv) -> np.ndarray:
    """Unit camera-frame ray directions through (possibly fractional) pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    x = (uv[..., 0] + 0.5 - K.cx) / K.fx
    y = (uv[..., 1] + 0.5 - K.cy) / K.fy
    d = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def rays_from_intrinsics(K: Intrinsics) -> RayMap:
    if not (K.fx > 0 and K.fy > 0):
        raise InvalidIntrinsicsError("non-positive focal length")
    return RayMap(unproject_dirs(K, pixel_grid(K.height, K.width)))


def unproject(K: Intrinsics, uv, d) -> np.ndarray:
    """Camera-frame points at ray depth ``d`` through pixel coordinates ``uv``."""
    return unproject_dirs(K, uv) * np.asarray(d, dtype=np.float64)[..., None]


def project(K: Intrinsics, P_cam) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of camera-frame points and a front-of-camera mask."""
    P = np.asarray(P_cam, dtype=np.float64)
    z = P[..., 2]
    front = np.isfinite(P).all(axis=-1) & (z > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * P[..., 0] / z + K.cx - 0.5
        v = K.fy * P[..., 1] / z + K.cy - 0.5
    uv = np.stack([u, v], axis=-1)
    uv[~front] = np.nan
    return uv, front


def _same_shape(*grids):
    shapes = {tuple(g.shape[:2]) for g in grids}
    if len(shapes) != 1:
        raise DimensionError(f"grid shapes differ: {sorted(shapes)}")


def compose_pointmap(s, T: Pose, R: RayMap, D: RayDepthMap) -> Pointmap:
    """Metric world-frame pointmap ``s * (rot(q) (R * D) + t)``."""
    _same_shape(R.dirs, D.d)
    s = float(MetricScale(float(s)))
    valid = np.asarray(D.valid, dtype=bool).copy()
    cam = R.dirs * D.d[..., None]
    pts = s * T.apply(cam)
    valid &= np.isfinite(pts).all(axis=-1)
    pts[~valid] = np.nan
    return Pointmap(pts, valid)


def recover_metric_flow(s, F: SceneFlowField) -> SceneFlowField:
    s = float(MetricScale(float(s)))
    flow = s * F.flow
    return SceneFlowField(flow, F.valid.copy())


def apply_motion(G: Pointmap, M: SceneFlowField) -> Pointmap:
    _same_shape(G.pts, M.flow)
    valid = G.valid & M.valid
    pts = G.pts + M.flow
    pts[~valid] = np.nan
    return Pointmap(pts, valid)


def transform_points(T: Pose, P: Pointmap) -> Pointmap:
    pts = T.apply(P.pts)
    pts[~P.valid] = np.nan
    return Pointmap(pts, P.valid.copy())


def inverse_pose(T: Pose) -> Pose:
    q_inv = T.q * np.array([1.0, -1.0, -1.0, -1.0])
    Rt = T.R.T
    return Pose(q_inv, -(Rt @ T.t))


def compose_pose(T1: Pose, T2: Pose) -> Pose:
    """``T1 ∘ T2``: apply ``T2`` first."""
    q = quat_multiply(T1.q, T2.q)
    return Pose(q / np.linalg.norm(q), T1.R @ T2.t + T1.t)


def decompose_pointmap(G: Pointmap, T: Pose) -> tuple[RayMap, RayDepthMap]:
    """Invert ``compose_pointmap`` at unit scale.

    Pixels whose camera-frame point sits at the origin or behind the camera
    come back invalid with NaN rays and depth.
    """
    cam = T.inverse().apply(G.pts)
    d = np.linalg.norm(cam, axis=-1)
    valid = G.valid & np.isfinite(d) & (d > 0) & (cam[..., 2] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dirs = cam / d[..., None]
    dirs[~valid] = np.nan
    d = np.where(valid, d, np.nan)
    return RayMap(dirs), RayDepthMap(d, valid)


def ray_depth_to_z(R: RayMap, D: RayDepthMap) -> np.ndarray:
    """Forward-axis depth from ray depth; NaN where invalid."""
    z = D.d * R.dirs[..., 2]
    return np.where(D.valid, z, np.nan)


def z_to_ray_depth(R: RayMap, z, valid) -> RayDepthMap:
    z = np.asarray(z, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool) & (R.dirs[..., 2] > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(valid, z / R.dirs[..., 2], np.nan)
    return RayDepthMap(d, valid)


def view_pointmap(view: ViewBundle, scale: float = 1.0) -> Pointmap:
    return compose_pointmap(scale, view.pose, view.rays, view.ray_depth)
