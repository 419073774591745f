"""Scene-motion parameterizations and the conversions between them.

Four ways of describing where view-0 surface points go at time t:

* allocentric scene flow -- world-frame displacement vectors,
* egocentric scene flow -- the same displacement expressed in camera t's frame,
* points after motion -- world-frame positions at time t,
* backprojected 2D flow -- optical flow lifted through two pointmaps
  (only defined where the point is covisible).

Also the Doppler (radial velocity) simulator and flow-threshold motion masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    Intrinsics,
    OpticalFlowField,
    Pointmap,
    Pose,
    SceneFlowField,
    apply_motion,
    pixel_grid,
    project,
)

__all__ = [
    "DopplerMap",
    "ego_to_allo",
    "allo_to_ego",
    "points_to_flow",
    "flow_to_points",
    "backproject_2d_flow",
    "allo_to_flow2d",
    "bilinear_sample",
    "simulate_doppler",
    "motion_mask_from_flow",
]


@dataclass
class DopplerMap:
    vr: np.ndarray  # signed radial velocity, positive = receding
    valid: np.ndarray


def _masked_flow(flow: np.ndarray, valid: np.ndarray) -> SceneFlowField:
    flow = flow.copy()
    flow[~valid] = np.nan
    return SceneFlowField(flow, valid)


def ego_to_allo(F_ego: SceneFlowField, G0_world: Pointmap, T_t: Pose) -> SceneFlowField:
    """Rotate camera-t displacement vectors into the world frame.

    With the reference point taken as the view-0 world point, the
    ``T_t(T_t^-1(p) + f) - p`` recovery collapses to ``rot(T_t) f``; that
    closed form is evaluated directly so the map is an exact per-pixel
    isometry. Pixels without geometry come back invalid.
    """
    valid = F_ego.valid & G0_world.valid
    return _masked_flow(T_t.rotate(F_ego.flow), valid)


def allo_to_ego(F_allo: SceneFlowField, G0_world: Pointmap, T_t: Pose) -> SceneFlowField:
    valid = F_allo.valid & G0_world.valid
    return _masked_flow(F_allo.flow @ T_t.R, valid)


def points_to_flow(P0: Pointmap, Pt: Pointmap) -> SceneFlowField:
    valid = P0.valid & Pt.valid
    return _masked_flow(Pt.pts - P0.pts, valid)


def flow_to_points(P0: Pointmap, F: SceneFlowField) -> Pointmap:
    return apply_motion(P0, F)


def bilinear_sample(grid: np.ndarray, valid: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an H x W x C grid at fractional index coordinates ``xy = (x, y)``.

    The footprint is the set of corners carrying nonzero weight; a sample is
    invalid if it leaves the image or any footprint corner is invalid. An
    integer coordinate therefore reads exactly one pixel, bit for bit.
    """
    H, W = valid.shape
    x = xy[..., 0]
    y = xy[..., 1]
    finite = np.isfinite(x) & np.isfinite(y)
    inside = finite & (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    ax = xs - x0
    ay = ys - y0
    x1 = np.where(ax > 0, np.minimum(x0 + 1, W - 1), x0)
    y1 = np.where(ay > 0, np.minimum(y0 + 1, H - 1), y0)

    ok = inside & valid[y0, x0] & valid[y0, x1] & valid[y1, x0] & valid[y1, x1]
    g00, g01 = grid[y0, x0], grid[y0, x1]
    g10, g11 = grid[y1, x0], grid[y1, x1]
    axe = ax[..., None]
    aye = ay[..., None]
    top = (1 - axe) * g00 + axe * g01
    bot = (1 - axe) * g10 + axe * g11
    out = (1 - aye) * top + aye * bot
    out[~ok] = np.nan
    return out, ok


def backproject_2d_flow(of: OpticalFlowField, G0: Pointmap, Gt: Pointmap) -> SceneFlowField:
    """Covisible scene flow from optical flow and two pixel-aligned pointmaps."""
    H, W = G0.shape
    target = pixel_grid(H, W) + of.uv
    sampled, ok = bilinear_sample(Gt.pts, Gt.valid, target)
    valid = ok & of.valid & G0.valid
    return _masked_flow(sampled - G0.pts, valid)


def allo_to_flow2d(
    F: SceneFlowField,
    G0: Pointmap,
    K_t: Intrinsics,
    T_t: Pose,
    Gt: Pointmap | None = None,
    occlusion_tol: float = 1e-2,
) -> OpticalFlowField:
    """Optical flow induced by allocentric scene flow.

    A pixel is valid if its moved point projects in front of camera t and
    inside the image. When view t's pointmap is given, the sampled point
    there must also lie within ``occlusion_tol`` (relative to range) of the
    moved point, which rejects occluded pixels.
    """
    H, W = G0.shape
    moved = G0.pts + F.flow
    cam = T_t.inverse().apply(moved)
    uv, front = project(K_t, cam)
    valid = G0.valid & F.valid & front
    valid &= (uv[..., 0] >= 0) & (uv[..., 0] <= K_t.width - 1)
    valid &= (uv[..., 1] >= 0) & (uv[..., 1] <= K_t.height - 1)
    if Gt is not None:
        sampled, ok = bilinear_sample(Gt.pts, Gt.valid, np.where(valid[..., None], uv, np.nan))
        err = np.linalg.norm(sampled - moved, axis=-1)
        rng = np.linalg.norm(cam, axis=-1)
        valid &= ok & (err <= occlusion_tol * rng)
    flow = uv - pixel_grid(H, W)
    flow[~valid] = np.nan
    return OpticalFlowField(flow, valid)


def simulate_doppler(P_cam, F_ego: SceneFlowField) -> DopplerMap:
    """Radial component of egocentric motion, ``dot(p, v) / |p|``."""
    P = np.asarray(P_cam, dtype=np.float64)
    r = np.sqrt(P[..., 0] ** 2 + P[..., 1] ** 2 + P[..., 2] ** 2)
    valid = F_ego.valid & np.isfinite(r) & (r > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vr = (P[..., 0] * F_ego.flow[..., 0] + P[..., 1] * F_ego.flow[..., 1] + P[..., 2] * F_ego.flow[..., 2]) / r
    vr = np.where(valid, vr, np.nan)
    return DopplerMap(vr, valid)


def motion_mask_from_flow(F: SceneFlowField, theta: float) -> np.ndarray:
    norm = np.linalg.norm(np.where(F.valid[..., None], F.flow, 0.0), axis=-1)
    return (norm > theta) & F.valid


REPRESENTATIONS = ("allo", "ego", "points", "flow2d")
_FIELDS = {"allo": "scene_flow", "ego": "ego_flow", "points": "points_after", "flow2d": "optical_flow"}


def convert_sequence(seq, src: str, dst: str, occlusion_tol: float = 1e-2):
    """Re-express every view's motion from one parameterization in another.

    Works in the bundle's normalized units using its own geometry. The
    source field must be present on every view; the result is a copy of
    ``seq`` with the destination field filled in.
    """
    from dataclasses import replace

    from .geometry import SceneSequence, compose_pointmap

    for r in (src, dst):
        if r not in REPRESENTATIONS:
            raise ValueError(f"unknown motion representation {r!r}; expected one of {REPRESENTATIONS}")
    v0 = seq.views[0]
    G0 = compose_pointmap(1.0, v0.pose, v0.rays, v0.ray_depth)
    views = []
    for t, v in enumerate(seq.views):
        source = getattr(v, _FIELDS[src])
        if source is None:
            raise ValueError(f"view {t} has no {_FIELDS[src]} to convert from")
        Gt = compose_pointmap(1.0, v.pose, v.rays, v.ray_depth)
        if src == "allo":
            F = source
        elif src == "ego":
            F = ego_to_allo(source, G0, v.pose)
        elif src == "points":
            F = points_to_flow(G0, source)
        else:
            F = backproject_2d_flow(source, G0, Gt)

        if dst == "allo":
            out = F
        elif dst == "ego":
            out = allo_to_ego(F, G0, v.pose)
        elif dst == "points":
            out = flow_to_points(G0, F)
        else:
            out = allo_to_flow2d(F, G0, v.intrinsics, v.pose, Gt, occlusion_tol)
        views.append(replace(v, **{_FIELDS[dst]: out}))
    meta = dict(seq.meta)
    meta["converted"] = {"from": src, "to": dst}
    return SceneSequence(views, seq.scale, seq.kind, meta)
