"""Training losses over the factored scene representation, with analytic gradients.

Every loss returns a :class:`LossValue` holding the scalar and a dict of
gradients keyed by the name of the predicted argument. Multi-view inputs
carry a leading view axis ``N``; a missing view axis is treated as ``N = 1``.

Reduction: mean over valid pixels within a view, summed over views.
Scale-dependent quantities are divided by a single cross-view scale (``z``
for ground truth, ``z_hat`` for predictions) before comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DegenerateScaleError, DimensionError
from .geometry import Pointmap, SceneFlowField, SceneSequence, compose_pointmap
from .motion import motion_mask_from_flow

DEFAULT_WEIGHTS = {
    "trans": 1.0,
    "rotation": 1.0,
    "rays": 1.0,
    "depth": 1.0,
    "scene_flow": 1.0,
    "mask": 1.0,
    "pointmap": 0.0,
    "scale": 0.0,
}
TERMS = tuple(DEFAULT_WEIGHTS)
DYNAMIC_WEIGHT = 10.0
BCE_EPS = 1e-12


class LossValue(NamedTuple):
    value: float
    grad: dict


def _real(x) -> np.ndarray:
    """Float array of at least double precision; ``np.longdouble`` input is kept as is.

    The gradient checker evaluates losses in extended precision, so the
    per-loss code must not narrow its inputs.
    """
    a = np.asarray(x)
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def _scalar(x):
    """Python float, unless the computation ran in extended precision."""
    x = np.asarray(x)
    return x[()] if x.dtype == np.longdouble else float(x)


# ---------------------------------------------------------------------------
# scale normalizer and log-space map
# ---------------------------------------------------------------------------


def scene_scale(pointmaps, masks=None) -> float:
    """Mean Euclidean norm of valid points over all views (origin = view-0 camera)."""
    total = 0.0
    count = 0
    for i, pm in enumerate(pointmaps):
        if isinstance(pm, Pointmap):
            pts, valid = pm.pts, pm.valid
            if masks is not None:
                valid = valid & np.asarray(masks[i], dtype=bool)
        else:
            pts = np.asarray(pm, dtype=np.float64)
            valid = np.asarray(masks[i], dtype=bool)
        sel = pts[valid]
        total += float(np.linalg.norm(sel, axis=-1).sum())
        count += int(valid.sum())
    if count == 0:
        raise DegenerateScaleError("no valid points to compute the scene scale")
    return total / count


def _g_and_c(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``g = log1p(rho)/rho`` and ``c = g'(rho)/rho`` so that
    ``f_log(y) = g y`` and ``J_f_log(y) = g I + c y y^T``."""
    small = rho < 1e-3
    r = np.where(small, 1.0, rho)
    g = np.log1p(r) / r
    c = (r / (1.0 + r) - np.log1p(r)) / r**3
    rs = np.where(small, rho, 0.0)
    g_s = 1.0 - rs / 2 + rs**2 / 3 - rs**3 / 4
    with np.errstate(divide="ignore", invalid="ignore"):
        c_s = np.where(rs > 0, (-0.5 + 2 * rs / 3 - 0.75 * rs**2 + 0.8 * rs**3) / rs, 0.0)
    return np.where(small, g_s, g), np.where(small, c_s, c)


def f_log(x) -> np.ndarray:
    """``(x / |x|) * log(1 + |x|)`` along the last axis, with ``f_log(0) = 0``."""
    x = _real(x)
    rho = np.linalg.norm(x, axis=-1, keepdims=True)
    g, _ = _g_and_c(rho)
    return g * x


def _flog_jvp(y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Jacobian of f_log at ``y`` applied to ``v`` (the Jacobian is symmetric)."""
    rho = np.linalg.norm(y, axis=-1, keepdims=True)
    g, c = _g_and_c(rho)
    return g * v + c * y * np.sum(y * v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _as_views(arr, pixel_ndim: int) -> np.ndarray:
    a = _real(arr)
    if a.ndim == pixel_ndim:
        a = a[None]
    return a


def _as_mask(valid, shape) -> np.ndarray:
    v = np.asarray(valid, dtype=bool)
    if v.ndim == len(shape) - 1:
        v = v[None]
    if v.shape != tuple(shape):
        raise DimensionError(f"mask shape {v.shape} does not match {tuple(shape)}")
    return v


def _unit(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.linalg.norm(r, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = np.where(e[..., None] > 0, r / e[..., None], 0.0)
    return e, n


def _per_view_coef(valid: np.ndarray, weights: np.ndarray | None) -> np.ndarray:
    """Per-pixel reduction coefficient ``w / count_valid(view)``; 0 where invalid."""
    cnt = valid.reshape(valid.shape[0], -1).sum(axis=1).astype(np.float64)
    inv = np.where(cnt > 0, 1.0 / np.maximum(cnt, 1.0), 0.0)
    coef = valid * inv.reshape((-1,) + (1,) * (valid.ndim - 1))
    if weights is not None:
        coef = coef * weights
    return coef


def _log_residual_loss(gt, pred, valid, z, z_hat, weights=None) -> LossValue:
    """``sum_i mean_valid w * |f_log(gt/z) - f_log(pred/z_hat)|`` and its gradients."""
    if gt.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and target {gt.shape} differ")
    valid = _as_mask(valid, gt.shape[:-1])
    m = valid[..., None]
    y = np.where(m, gt, 0.0) / z
    yp = np.where(m, pred, 0.0) / z_hat
    r = f_log(y) - f_log(yp)
    e, n = _unit(r)
    coef = _per_view_coef(valid, weights)
    value = _scalar(np.sum(coef * e))
    jn = _flog_jvp(yp, n)
    grad_pred = -coef[..., None] * jn / z_hat
    grad_zhat = _scalar(np.sum(coef[..., None] * jn * yp) / z_hat)
    return LossValue(value, {"pred": grad_pred, "z_hat": grad_zhat})


# ---------------------------------------------------------------------------
# individual losses
# ---------------------------------------------------------------------------


def loss_rays(gt, pred, valid) -> LossValue:
    gt = _as_views(gt, 3)
    pred = _as_views(pred, 3)
    valid = _as_mask(valid, gt.shape[:-1])
    m = valid[..., None]
    r = np.where(m, gt, 0.0) - np.where(m, pred, 0.0)
    e, n = _unit(r)
    coef = _per_view_coef(valid, None)
    return LossValue(_scalar(np.sum(coef * e)), {"pred": -coef[..., None] * n})


def loss_rotation(q, q_pred) -> LossValue:
    """Sign-ambiguity-resolved quaternion distance, summed over views.

    Ties go to the ``q - q_pred`` branch.
    """
    q = np.atleast_2d(_real(q))
    qp = np.atleast_2d(_real(q_pred))
    d_minus = np.linalg.norm(q - qp, axis=-1)
    d_plus = np.linalg.norm(q + qp, axis=-1)
    use_minus = d_minus <= d_plus
    value = _scalar(np.sum(np.where(use_minus, d_minus, d_plus)))
    e_m, n_m = _unit(qp - q)
    e_p, n_p = _unit(qp + q)
    grad = np.where(use_minus[:, None], n_m, n_p)
    return LossValue(value, {"pred": grad})


def loss_translation(t, t_pred, z, z_hat) -> LossValue:
    t = np.atleast_2d(_real(t))
    tp = np.atleast_2d(_real(t_pred))
    r = t / z - tp / z_hat
    e, n = _unit(r)
    grad_pred = -n / z_hat
    grad_zhat = _scalar(np.sum(n * tp) / z_hat**2)
    return LossValue(_scalar(np.sum(e)), {"pred": grad_pred, "z_hat": grad_zhat})


def loss_depth(gt, pred, valid, z, z_hat) -> LossValue:
    gt = _as_views(gt, 2)[..., None]
    pred = _as_views(pred, 2)[..., None]
    out = _log_residual_loss(gt, pred, valid, z, z_hat)
    out.grad["pred"] = out.grad["pred"][..., 0]
    return out


def loss_pointmap(gt, pred, valid, z, z_hat) -> LossValue:
    return _log_residual_loss(_as_views(gt, 3), _as_views(pred, 3), valid, z, z_hat)


def loss_sceneflow(gt, pred, valid, motion_mask, z, z_hat, w_dyn: float = DYNAMIC_WEIGHT) -> LossValue:
    gt = _as_views(gt, 3)
    pred = _as_views(pred, 3)
    dyn = _as_mask(motion_mask, gt.shape[:-1])
    weights = np.where(dyn, float(w_dyn), 1.0)
    return _log_residual_loss(gt, pred, valid, z, z_hat, weights)


def loss_scale(z, z_hat, s_pred) -> LossValue:
    """Log-space metric-scale loss; ``z_hat`` sits behind a stop-gradient."""
    a = math.log1p(z)
    b = math.log1p(s_pred * z_hat)
    d = a - b
    sign = 1.0 if d > 0 else (-1.0 if d < 0 else 0.0)
    grad_s = -sign * z_hat / (1.0 + s_pred * z_hat)
    return LossValue(abs(d), {"s_pred": grad_s, "z_hat": 0.0})


def loss_mask(conf, valid_gt) -> LossValue:
    """Binary cross-entropy of predicted confidence against ground-truth validity."""
    c = _as_views(conf, 2)
    y = _as_mask(valid_gt, c.shape).astype(np.float64)
    lo = np.maximum(c, BCE_EPS)
    hi = np.maximum(1.0 - c, BCE_EPS)
    bce = -(y * np.log(lo) + (1.0 - y) * np.log(hi))
    coef = _per_view_coef(np.ones(c.shape, dtype=bool), None)
    d_lo = np.where(c > BCE_EPS, -y / lo, 0.0)
    d_hi = np.where(1.0 - c > BCE_EPS, (1.0 - y) / hi, 0.0)
    return LossValue(_scalar(np.sum(coef * bce)), {"pred": coef * (d_lo + d_hi)})


# ---------------------------------------------------------------------------
# total loss over scene sequences
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: float
    z: float
    z_hat: float
    available: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "terms": {k: float(v) for k, v in self.terms.items()},
            "weights": {k: float(v) for k, v in self.weights.items()},
            "total": float(self.total),
            "z": float(self.z),
            "z_hat": float(self.z_hat),
            "available": dict(self.available),
        }


def _stack_geometry(seq: SceneSequence, scale: float):
    pts, valid, rays, depth, quats, trans = [], [], [], [], [], []
    for v in seq.views:
        pm = compose_pointmap(scale, v.pose, v.rays, v.ray_depth)
        pts.append(pm.pts)
        valid.append(pm.valid)
        rays.append(v.rays.dirs)
        depth.append(v.ray_depth.d)
        quats.append(v.pose.q)
        trans.append(v.pose.t)
    return (
        np.stack(pts),
        np.stack(valid),
        np.stack(rays),
        np.stack(depth),
        np.stack(quats),
        np.stack(trans),
    )


def total_loss(
    pred: SceneSequence,
    gt: SceneSequence,
    weights: dict | None = None,
    w_dyn: float = DYNAMIC_WEIGHT,
    mask_theta: float = 1e-3,
) -> LossReport:
    """Evaluate every loss term between a prediction and ground truth.

    Ground truth is taken in metric units (its stored quantities times its
    scale); the prediction is taken in its own normalized units, so the
    prediction's scale only enters through the scale term. Terms that need
    data absent from either side (scene flow, confidence) evaluate to 0 and
    are flagged in ``available``.
    """
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        unknown = set(weights) - set(w)
        if unknown:
            raise KeyError(f"unknown loss terms: {sorted(unknown)}")
        w.update({k: float(v) for k, v in weights.items()})
    if len(pred) != len(gt) or pred.shape != gt.shape:
        raise DimensionError("prediction and ground truth differ in view count or resolution")

    s = gt.scale
    X, V, R, D, Q, T = _stack_geometry(gt, s)
    Xp, Vp, Rp, Dp, Qp, Tp = _stack_geometry(pred, 1.0)
    joint = V & Vp

    z = scene_scale(X, V)
    z_hat = scene_scale(Xp, joint)

    terms = {k: 0.0 for k in TERMS}
    available = {k: True for k in TERMS}
    terms["rays"] = loss_rays(R, Rp, joint).value
    terms["rotation"] = loss_rotation(Q, Qp).value
    terms["trans"] = loss_translation(s * T, Tp, z, z_hat).value
    terms["depth"] = loss_depth(s * D, Dp, joint, z, z_hat).value
    terms["pointmap"] = loss_pointmap(X, Xp, joint, z, z_hat).value
    terms["scale"] = loss_scale(z, z_hat, pred.scale).value

    flow_views = [
        i for i, (a, b) in enumerate(zip(gt.views, pred.views)) if a.scene_flow is not None and b.scene_flow is not None
    ]
    if flow_views:
        F = np.stack([s * gt.views[i].scene_flow.flow for i in flow_views])
        Fp = np.stack([pred.views[i].scene_flow.flow for i in flow_views])
        fvalid = np.stack(
            [gt.views[i].scene_flow.valid & pred.views[i].scene_flow.valid & joint[0] for i in flow_views]
        )
        dyn = []
        for i in flow_views:
            gv = gt.views[i]
            if gv.motion_mask is not None:
                dyn.append(gv.motion_mask)
            else:
                metric = SceneFlowField(s * gv.scene_flow.flow, gv.scene_flow.valid)
                dyn.append(motion_mask_from_flow(metric, mask_theta))
        terms["scene_flow"] = loss_sceneflow(F, Fp, fvalid, np.stack(dyn), z, z_hat, w_dyn).value
    else:
        available["scene_flow"] = False

    if all(v.confidence is not None for v in pred.views):
        terms["mask"] = loss_mask(np.stack([v.confidence for v in pred.views]), V).value
    else:
        available["mask"] = False

    total = sum(w[k] * terms[k] for k in TERMS)
    return LossReport(terms, w, float(total), z, z_hat, available)
