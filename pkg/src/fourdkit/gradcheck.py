"""Central finite-difference verification of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses

# loss id -> (function, differentiable argument -> gradient key)
LOSSES: dict[str, tuple[Callable, dict]] = {
    "rays": (losses.loss_rays, {"pred": "pred"}),
    "rotation": (losses.loss_rotation, {"q_pred": "pred"}),
    "translation": (losses.loss_translation, {"t_pred": "pred", "z_hat": "z_hat"}),
    "depth": (losses.loss_depth, {"pred": "pred", "z_hat": "z_hat"}),
    "pointmap": (losses.loss_pointmap, {"pred": "pred", "z_hat": "z_hat"}),
    "scene_flow": (losses.loss_sceneflow, {"pred": "pred", "z_hat": "z_hat"}),
    "scale": (losses.loss_scale, {"s_pred": "s_pred"}),
    "mask": (losses.loss_mask, {"conf": "pred"}),
}
# arguments whose analytic gradient is defined to be zero and is not compared
STOP_GRADIENT = {"scale": {"z_hat": "z_hat"}}


@dataclass
class GradCheckResult:
    loss_id: str
    max_rel_error: float
    n_points: int
    n_coords: int
    h: float
    tol: float
    passed: bool
    stop_gradient: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss_id,
            "max_rel_error": float(self.max_rel_error),
            "n_points": self.n_points,
            "n_coords": self.n_coords,
            "h": self.h,
            "tol": self.tol,
            "passed": self.passed,
            "stop_gradient": {k: float(v) for k, v in self.stop_gradient.items()},
        }


@dataclass
class GradCheckReport:
    results: list
    h: float
    tol: float
    seed: int | None = None
    fd_precision: str = "extended"

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "tol": self.tol,
            "seed": self.seed,
            "fd_precision": self.fd_precision,
            "passed": self.passed,
            "losses": [r.to_dict() for r in self.results],
        }


def relative_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def _resolve(loss_id, wrt):
    if callable(loss_id):
        if wrt is None:
            raise ValueError("a callable loss needs an explicit `wrt` mapping")
        return getattr(loss_id, "__name__", "custom"), loss_id, wrt
    fn, default_wrt = LOSSES[loss_id]
    return loss_id, fn, wrt or default_wrt


FD_PRECISION = {"extended": np.longdouble, "double": np.float64}


def grad_check(
    loss_id, inputs: dict, h: float = 1e-6, tol: float = 1e-5, wrt: dict | None = None, fd_dtype=np.longdouble
) -> GradCheckResult:
    """Compare analytic and central-difference gradients at one input point.

    ``loss_id`` is a registered name or a callable returning ``(value, grad)``;
    ``wrt`` maps argument names to keys of the returned gradient dict.

    The analytic gradient is computed in double precision. By default the
    central difference is evaluated on ``np.longdouble`` copies of the
    differentiated arguments, so rounding in the loss value (about
    ``eps * |f| / h``) stays far below the smallest gradient coordinates being
    compared. Pass ``fd_dtype=np.float64`` for an all-double check; there,
    coordinates below roughly 1e-6 sit at the rounding floor and can fail
    the relative test even though the gradient is right. Where ``long
    double`` is plain double the two settings coincide.
    """
    name, fn, wrt = _resolve(loss_id, wrt)
    base = {k: (np.array(v, dtype=np.float64) if k in wrt else v) for k, v in inputs.items()}
    analytic = fn(**base).grad
    wide = {k: (np.array(v, dtype=fd_dtype) if k in wrt else v) for k, v in base.items()}
    step = fd_dtype(h)
    worst = 0.0
    n_coords = 0
    for arg, key in wrt.items():
        x = wide[arg]
        g = np.asarray(analytic[key], dtype=np.float64)
        scalar = x.ndim == 0
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = fn(**{**wide, arg: flat[0] if scalar else flat.reshape(x.shape)}).value
            flat[j] = orig - step
            fm = fn(**{**wide, arg: flat[0] if scalar else flat.reshape(x.shape)}).value
            flat[j] = orig
            num = float((fd_dtype(fp) - fd_dtype(fm)) / (2 * step))
            worst = max(worst, float(relative_error(gflat[j], num)))
            n_coords += 1
    stop = {}
    for arg, key in STOP_GRADIENT.get(name, {}).items():
        stop[arg] = float(analytic[key])
    ok = worst < tol and all(v == 0.0 for v in stop.values())
    return GradCheckResult(name, worst, 1, n_coords, h, tol, ok, stop)


# ---------------------------------------------------------------------------
# random inputs away from non-smooth points
# ---------------------------------------------------------------------------


def _mask(rng, shape):
    m = rng.random(shape) < 0.75
    m.reshape(shape[0], -1)[:, 0] = True
    return m


def _offset(rng, shape, scale, floor):
    """Gaussian offsets whose every component has magnitude at least ``floor``.

    Gradients of the norm-based losses point along the residual, so a
    residual component near zero makes a gradient coordinate near zero, and
    there the central difference is dominated by rounding in ``f`` rather
    than by the derivative. Keeping components off zero avoids that regime.
    """
    x = rng.normal(size=shape) * scale
    return np.where(x < 0, -1.0, 1.0) * np.maximum(np.abs(x), floor)


def random_inputs(loss_id: str, rng: np.random.Generator, n_views: int = 2, height: int = 3, width: int = 3) -> dict:
    """Random arguments for a registered loss.

    Every component of every residual is kept away from zero (which also
    keeps residuals clear of the f_log origin), depth ratios stay at least
    10% from one, and quaternion pairs stay clear of the sign tie, so every
    sample sits where the loss is smooth and its gradient well resolved.
    """
    N, H, W = n_views, height, width
    z = float(rng.uniform(0.5, 3.0))
    z_hat = float(rng.uniform(0.5, 3.0))
    if loss_id == "rays":
        gt = _offset(rng, (N, H, W, 3), 1.0, 0.1)
        gt /= np.linalg.norm(gt, axis=-1, keepdims=True)
        pred = gt + _offset(rng, (N, H, W, 3), 0.1, 0.02)
        return {"gt": gt, "pred": pred, "valid": _mask(rng, (N, H, W))}
    if loss_id == "rotation":
        q = rng.normal(size=(N, 4))
        q /= np.linalg.norm(q, axis=-1, keepdims=True)
        qp = q + _offset(rng, (N, 4), 0.3, 0.02)
        for i in range(N):
            # the q - q_pred branch must win the min by a clear margin
            while np.linalg.norm(q[i] + qp[i]) < np.linalg.norm(q[i] - qp[i]) + 0.05:
                qp[i] = q[i] + _offset(rng, 4, 0.3, 0.02)
        return {"q": q, "q_pred": qp}
    if loss_id == "translation":
        t = rng.normal(size=(N, 3))
        tp = t * z_hat / z + _offset(rng, (N, 3), 0.3, 0.02)
        return {"t": t, "t_pred": tp, "z": z, "z_hat": z_hat}
    if loss_id == "depth":
        gt = rng.uniform(0.5, 5.0, size=(N, H, W))
        pred = gt * z_hat / z * rng.uniform(1.1, 1.6, size=(N, H, W)) ** rng.choice([-1, 1], size=(N, H, W))
        return {"gt": gt, "pred": pred, "valid": _mask(rng, (N, H, W)), "z": z, "z_hat": z_hat}
    if loss_id in ("pointmap", "scene_flow"):
        gt = _offset(rng, (N, H, W, 3), 2.0, 0.05)
        pred = gt * z_hat / z + _offset(rng, (N, H, W, 3), 0.1 * z_hat / z, 0.02 * z_hat / z)
        out = {"gt": gt, "pred": pred, "valid": _mask(rng, (N, H, W)), "z": z, "z_hat": z_hat}
        if loss_id == "scene_flow":
            out["motion_mask"] = rng.random((N, H, W)) < 0.4
        return out
    if loss_id == "scale":
        return {"z": z, "z_hat": z_hat, "s_pred": float(z / z_hat * rng.choice([0.5, 0.7, 1.4, 2.0]))}
    if loss_id == "mask":
        return {"conf": rng.uniform(0.05, 0.95, size=(N, H, W)), "valid_gt": rng.random((N, H, W)) < 0.6}
    raise KeyError(f"unknown loss {loss_id!r}")


def grad_check_suite(
    loss_ids=None, n_points: int = 100, seed: int = 0, h: float = 1e-6, tol: float = 1e-5, fd_precision: str = "extended"
) -> GradCheckReport:
    fd_dtype = FD_PRECISION[fd_precision]
    loss_ids = list(LOSSES) if loss_ids in (None, "all") else list(loss_ids)
    results = []
    for k, loss_id in enumerate(loss_ids):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        coords = 0
        stop: dict = {}
        for _ in range(n_points):
            r = grad_check(loss_id, random_inputs(loss_id, rng), h=h, tol=tol, fd_dtype=fd_dtype)
            worst = max(worst, r.max_rel_error)
            coords += r.n_coords
            for arg, v in r.stop_gradient.items():
                stop[arg] = max(stop.get(arg, 0.0), abs(v))
        ok = worst < tol and all(v == 0.0 for v in stop.values())
        results.append(GradCheckResult(loss_id, worst, n_points, coords, h, tol, ok, stop))
    return GradCheckReport(results, h, tol, seed, fd_precision)
