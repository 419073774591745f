"""Deterministic synthetic 4D scenes with exact ground truth.

Scenes are built from analytic primitives (spheres, rectangular plane
patches, an optional static background plane z = const) moving with
constant linear and angular velocity, observed by a pinhole camera that is
static, translating linearly, or orbiting a target point. Every quantity is
computed in closed form, so the generated data serves as a test oracle.

Randomness comes from numpy's Philox counter-based generator keyed by the
config seed, which makes scenes reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (
    Intrinsics,
    OpticalFlowField,
    Pointmap,
    Pose,
    RayDepthMap,
    SceneFlowField,
    SceneSequence,
    ViewBundle,
    pixel_grid,
    project,
    quat_from_axis_angle,
    quat_to_matrix,
    rays_from_intrinsics,
    rotvec_delta,
    unproject_dirs,
)
from .losses import scene_scale
from .motion import allo_to_ego, motion_mask_from_flow, simulate_doppler

CAMERA_MODES = ("static", "orbit", "linear")
HIT_EPS = 1e-9
MISS = -1
BACKGROUND = 0


@dataclass
class SceneConfig:
    seed: int = 0
    n_frames: int = 8
    height: int = 48
    width: int = 64
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None
    camera_mode: str = "static"
    camera_velocity: tuple = (0.05, 0.0, 0.0)  # m/frame, linear mode
    orbit_deg_per_frame: float = 1.0
    orbit_target_depth: float = 6.0
    n_objects: int = 3
    shapes: tuple = ("sphere", "plane")
    radius_range: tuple = (0.3, 0.8)  # sphere radius or patch half-extent, m
    depth_range: tuple = (3.0, 6.0)
    speed_range: tuple = (0.02, 0.1)  # m/frame
    angular_speed_range: tuple = (0.0, 0.05)  # rad/frame
    metric_scale: float | None = None  # None: use the ground-truth scene scale
    background_depth: float | None = 10.0
    motion_threshold: float = 1e-3

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("a scene needs at least 2 frames")
        if self.camera_mode not in CAMERA_MODES:
            raise ValueError(f"camera_mode must be one of {CAMERA_MODES}")
        for name in ("radius_range", "depth_range", "speed_range", "angular_speed_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if self.radius_range[0] <= 0:
            raise ValueError("object sizes must be positive")
        if not self.shapes or set(self.shapes) - {"sphere", "plane"}:
            raise ValueError("shapes must be a non-empty subset of ('sphere', 'plane')")
        self.shapes = tuple(self.shapes)
        self.camera_velocity = tuple(float(v) for v in self.camera_velocity)

    def intrinsics(self) -> Intrinsics:
        fx = self.fx if self.fx is not None else 0.9 * self.width
        fy = self.fy if self.fy is not None else fx
        cx = self.cx if self.cx is not None else self.width / 2
        cy = self.cy if self.cy is not None else self.height / 2
        return Intrinsics(fx, fy, cx, cy, self.width, self.height)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RigidBody:
    """Primitive with constant-velocity rigid motion.

    ``pose(t)`` maps object coordinates to world at frame ``t``:
    rotation ``exp(omega t) R0`` and center ``c0 + v t``. A sphere is
    centered at the object origin; a plane patch is the object's z = 0
    rectangle with half extents ``extents``.
    """

    shape: str
    size: tuple  # (radius,) or (half_x, half_y)
    center: np.ndarray
    rotation: np.ndarray  # R0, 3x3
    velocity: np.ndarray
    angular_velocity: np.ndarray

    def delta_rotation(self, t: float) -> np.ndarray:
        return rotvec_delta(self.angular_velocity * t)

    def pose(self, t: float) -> Pose:
        R = (np.eye(3) + self.delta_rotation(t)) @ self.rotation
        return Pose.from_matrix(R, self.center + self.velocity * t)

    def rotation_at(self, t: float) -> np.ndarray:
        return (np.eye(3) + self.delta_rotation(t)) @ self.rotation

    def displacement(self, X: np.ndarray, t: float) -> np.ndarray:
        """``T(t) T(0)^-1 X - X``, exactly zero for a body at rest."""
        return (X - self.center) @ self.delta_rotation(t).T + self.velocity * t

    def is_moving(self) -> bool:
        return bool(np.any(self.velocity != 0) or np.any(self.angular_velocity != 0))


@dataclass
class Scene:
    config: SceneConfig
    intrinsics: Intrinsics
    bodies: list
    camera_poses: list  # camera-to-world, metric
    background_depth: float | None
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.camera_poses)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _camera_trajectory(cfg: SceneConfig) -> list:
    poses = []
    for t in range(cfg.n_frames):
        if cfg.camera_mode == "static":
            poses.append(Pose.identity())
        elif cfg.camera_mode == "linear":
            poses.append(Pose(np.array([1.0, 0, 0, 0]), np.asarray(cfg.camera_velocity) * t))
        else:
            angle = np.deg2rad(cfg.orbit_deg_per_frame) * t
            q = quat_from_axis_angle([0.0, 1.0, 0.0], angle)
            target = np.array([0.0, 0.0, cfg.orbit_target_depth])
            R = quat_to_matrix(q)
            poses.append(Pose(q, target - R @ target))
    return poses


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def _random_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def build_scene(cfg: SceneConfig) -> Scene:
    """Sample a scene from ``cfg``; identical configs give bit-identical scenes."""
    rng = np.random.Generator(np.random.Philox(key=int(cfg.seed)))
    K = cfg.intrinsics()
    bodies = []
    for _ in range(cfg.n_objects):
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        # anchor inside the central 60% of the image so objects are seen at t=0
        u = rng.uniform(0.2, 0.8) * K.width - 0.5
        v = rng.uniform(0.2, 0.8) * K.height - 0.5
        depth = rng.uniform(*cfg.depth_range)
        ray = unproject_dirs(K, np.array([u, v]))
        center = ray * depth
        if shape == "sphere":
            size = (float(rng.uniform(*cfg.radius_range)),)
            R0 = _random_rotation(rng)
        else:
            size = (float(rng.uniform(*cfg.radius_range)), float(rng.uniform(*cfg.radius_range)))
            # patch roughly facing the camera: tilt the optical axis by up to ~30 degrees
            tilt = rng.normal(size=3) * 0.3
            R0 = np.eye(3) + rotvec_delta(tilt)
        speed = rng.uniform(*cfg.speed_range)
        omega = rng.uniform(*cfg.angular_speed_range)
        bodies.append(
            RigidBody(
                shape=shape,
                size=size,
                center=center,
                rotation=R0,
                velocity=_random_direction(rng) * speed,
                angular_velocity=_random_direction(rng) * omega,
            )
        )
    scene = Scene(cfg, K, bodies, _camera_trajectory(cfg), cfg.background_depth)
    if cfg.metric_scale is not None:
        scene.scale = float(cfg.metric_scale)
    else:
        depth, _ = render_view(scene, 0)
        X = rays_from_intrinsics(K).dirs * depth.d[..., None]
        scene.scale = scene_scale([X], [depth.valid])
    return scene


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------


def intersect(body: RigidBody | None, t: float, origin: np.ndarray, dirs: np.ndarray, background_depth=None) -> np.ndarray:
    """Nearest positive hit distance of unit rays; ``inf`` on a miss.

    ``body=None`` intersects the static background plane ``z = background_depth``.
    """
    if body is None:
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (background_depth - origin[2]) / dz
        return np.where((dz != 0) & (lam > HIT_EPS), lam, np.inf)
    if body.shape == "sphere":
        oc = body.center + body.velocity * t - origin
        b = dirs @ oc
        c = oc @ oc - body.size[0] ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        near = b - root
        far = b + root
        lam = np.where(near > HIT_EPS, near, far)
        return np.where((disc >= 0) & (lam > HIT_EPS), lam, np.inf)
    R = body.rotation_at(t)
    c = body.center + body.velocity * t
    o_loc = R.T @ (origin - c)
    d_loc = dirs @ R
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = -o_loc[2] / d_loc[..., 2]
    x = o_loc[0] + lam * d_loc[..., 0]
    y = o_loc[1] + lam * d_loc[..., 1]
    hit = (d_loc[..., 2] != 0) & (lam > HIT_EPS) & (np.abs(x) <= body.size[0]) & (np.abs(y) <= body.size[1])
    return np.where(hit, lam, np.inf)


def cast_rays(scene: Scene, t: int, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hit distance and hit id for rays of camera ``t`` through pixel coordinates ``uv``.

    Ids: -1 miss, 0 background plane, k + 1 for body k.
    """
    cam = scene.camera_poses[t]
    dirs = cam.rotate(unproject_dirs(scene.intrinsics, uv))
    origin = cam.t
    best = np.full(uv.shape[:-1], np.inf)
    ids = np.full(uv.shape[:-1], MISS, dtype=np.int32)
    if scene.background_depth is not None:
        lam = intersect(None, t, origin, dirs, scene.background_depth)
        closer = lam < best
        best[closer] = lam[closer]
        ids[closer] = BACKGROUND
    for k, body in enumerate(scene.bodies):
        lam = intersect(body, t, origin, dirs)
        closer = lam < best
        best[closer] = lam[closer]
        ids[closer] = k + 1
    return best, ids


def render_view(scene: Scene, t: int) -> tuple[RayDepthMap, np.ndarray]:
    """Metric ray depth and hit-id map of view ``t``."""
    K = scene.intrinsics
    lam, ids = cast_rays(scene, t, pixel_grid(K.height, K.width))
    valid = np.isfinite(lam)
    return RayDepthMap(np.where(valid, lam, np.nan), valid), ids


# ---------------------------------------------------------------------------
# ground-truth motion (all on the view-0 pixel grid, metric units)
# ---------------------------------------------------------------------------


def view0_points(scene: Scene) -> tuple[Pointmap, np.ndarray]:
    depth, ids = render_view(scene, 0)
    rays = rays_from_intrinsics(scene.intrinsics).dirs
    pts = rays * depth.d[..., None]
    return Pointmap(pts, depth.valid), ids


def gt_scene_flow(scene: Scene, t: int) -> SceneFlowField:
    """World-frame displacement of view-0 surface points between frame 0 and ``t``."""
    G0, ids = view0_points(scene)
    flow = np.zeros_like(G0.pts)
    for k, body in enumerate(scene.bodies):
        sel = ids == k + 1
        if sel.any():
            flow[sel] = body.displacement(G0.pts[sel], t)
    flow[~G0.valid] = np.nan
    return SceneFlowField(flow, G0.valid.copy())


def gt_points_after_motion(scene: Scene, t: int) -> Pointmap:
    """World positions at frame ``t`` of view-0 surface points, ``T_k(t) T_k(0)^-1 X``."""
    G0, ids = view0_points(scene)
    pts = G0.pts.copy()
    for k, body in enumerate(scene.bodies):
        sel = ids == k + 1
        if sel.any():
            X = G0.pts[sel]
            rel = body.rotation_at(t) @ body.rotation.T
            pts[sel] = (X - body.center) @ rel.T + body.center + body.velocity * t
    return Pointmap(pts, G0.valid.copy())


def gt_ego_flow(scene: Scene, t: int) -> SceneFlowField:
    """Allocentric displacement expressed in camera ``t``'s frame."""
    G0, _ = view0_points(scene)
    return allo_to_ego(gt_scene_flow(scene, t), G0, scene.camera_poses[t])


def gt_doppler(scene: Scene, t: int):
    """Radial velocity seen from camera ``t`` for each view-0 surface point.

    The radial direction is taken at the point's position at frame ``t``.
    """
    G0, _ = view0_points(scene)
    F = gt_scene_flow(scene, t)
    cam = scene.camera_poses[t].inverse().apply(G0.pts + F.flow)
    return simulate_doppler(cam, gt_ego_flow(scene, t))


def gt_optical_flow(scene: Scene, t: int, tol: float = 1e-6) -> OpticalFlowField:
    """Pixel displacement of view-0 points into view ``t`` with a covisibility mask.

    A pixel is covisible if its moved point projects inside image ``t`` and
    the ray through that exact sub-pixel location first hits the scene at the
    moved point's range (within ``tol`` m).
    """
    K = scene.intrinsics
    G0, _ = view0_points(scene)
    F = gt_scene_flow(scene, t)
    moved = G0.pts + F.flow
    cam = scene.camera_poses[t].inverse().apply(moved)
    uv, front = project(K, cam)
    valid = G0.valid & front
    valid &= (uv[..., 0] >= 0) & (uv[..., 0] <= K.width - 1) & (uv[..., 1] >= 0) & (uv[..., 1] <= K.height - 1)
    lam, _ = cast_rays(scene, t, np.where(valid[..., None], uv, 0.0))
    rng = np.linalg.norm(cam, axis=-1)
    valid &= np.abs(lam - rng) <= tol
    flow = uv - pixel_grid(K.height, K.width)
    flow[~valid] = np.nan
    return OpticalFlowField(flow, valid)


def motion_mask(scene: Scene, t: int, theta: float | None = None) -> np.ndarray:
    theta = scene.config.motion_threshold if theta is None else theta
    return motion_mask_from_flow(gt_scene_flow(scene, t), theta)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def scene_to_sequence(scene: Scene) -> SceneSequence:
    """Ground truth in the factored form: normalized depth, translation and flow plus scale."""
    s = scene.scale
    K = scene.intrinsics
    rays = rays_from_intrinsics(K)
    views = []
    for t in range(scene.n_frames):
        depth, _ = render_view(scene, t)
        pose = scene.camera_poses[t]
        F = gt_scene_flow(scene, t)
        ego = gt_ego_flow(scene, t)
        dop = gt_doppler(scene, t)
        after = gt_points_after_motion(scene, t)
        views.append(
            ViewBundle(
                intrinsics=K,
                pose=Pose(pose.q, pose.t / s),
                rays=rays,
                ray_depth=RayDepthMap(depth.d / s, depth.valid),
                scene_flow=SceneFlowField(F.flow / s, F.valid),
                doppler=np.where(dop.valid, dop.vr / s, np.nan),
                doppler_valid=dop.valid,
                motion_mask=motion_mask_from_flow(F, scene.config.motion_threshold),
                ego_flow=SceneFlowField(ego.flow / s, ego.valid),
                points_after=Pointmap(after.pts / s, after.valid),
                optical_flow=gt_optical_flow(scene, t),
            )
        )
    return SceneSequence(views, s, "gt", {"config": scene.config.to_dict()})


def export_bundle(scene: Scene, out) -> SceneSequence:
    from .bundle import write_bundle

    seq = scene_to_sequence(scene)
    write_bundle(seq, out)
    return seq
