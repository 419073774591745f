"""Benchmark metrics: EPE, APD, tau, video-depth metrics and median-scale alignment.

Inlier tests use strict ``<``. Percent-valued metrics live in [0, 100].
Metrics over an empty selection are NaN (serialized as null).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AlignmentDegenerateError
from .geometry import SceneFlowField, SceneSequence, compose_pointmap, ray_depth_to_z
from .motion import motion_mask_from_flow

APD_THRESHOLDS = (0.1, 0.3, 0.5, 1.0)
TAU_DELTA = 0.1
DELTA_DEPTH = 1.25
ALIGN_MODES = ("median", "median_depth", "per_frame", "none")


@dataclass
class AlignmentResult:
    scale: float
    statistic: str
    count: int


def _errors(pred, gt, mask) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    return np.linalg.norm(pred[mask] - gt[mask], axis=-1)


def epe(pred, gt, mask) -> float:
    """Mean Euclidean error over masked elements."""
    e = _errors(pred, gt, mask)
    return float(e.mean()) if e.size else math.nan


def apd_from_errors(e: np.ndarray, thresholds=APD_THRESHOLDS) -> float:
    if e.size == 0:
        return math.nan
    fracs = [np.mean(e < d) for d in thresholds]
    return 100.0 * float(np.mean(fracs))


def apd(pred, gt, mask, thresholds=APD_THRESHOLDS) -> float:
    """Average over thresholds of the percentage of points closer than the threshold."""
    return apd_from_errors(_errors(pred, gt, mask), thresholds)


def tau_inlier(pred_flow, gt_flow, mask, delta: float = TAU_DELTA) -> float:
    e = _errors(pred_flow, gt_flow, mask)
    return 100.0 * float(np.mean(e < delta)) if e.size else math.nan


def depth_metrics(pred_z, gt_z, valid, align: bool = True) -> tuple[float, float]:
    """``(abs_rel, delta_125)`` on z-depth, optionally after median scaling."""
    pred_z = np.asarray(pred_z, dtype=np.float64)
    gt_z = np.asarray(gt_z, dtype=np.float64)
    sel = np.asarray(valid, dtype=bool) & np.isfinite(gt_z) & np.isfinite(pred_z) & (gt_z > 0) & (pred_z > 0)
    g = gt_z[sel]
    p = pred_z[sel]
    if g.size == 0:
        return math.nan, math.nan
    if align:
        p = p * np.median(g / p)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    ratio = np.maximum(p / g, g / p)
    return abs_rel, 100.0 * float(np.mean(ratio < DELTA_DEPTH))


def median_scale_align(pred: SceneSequence, gt: SceneSequence, mode: str = "median"):
    """Scale the prediction so its view-0 geometry matches ground truth in the median.

    ``median`` uses per-pixel ratios of point norms, ``median_depth`` ratios of
    z-depth; ``none`` returns the prediction unchanged. ``per_frame`` aligns
    view 0 like ``median`` here and :func:`evaluate_sequence` then refines
    each frame. The factor multiplies the prediction's metric scale, which
    rescales every pointmap, translation and flow derived from it.
    """
    if mode == "none":
        return AlignmentResult(1.0, "none", 0), pred
    if mode not in ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}")
    g0, p0 = gt.views[0], pred.views[0]
    if mode in ("median", "per_frame"):
        Xg = compose_pointmap(gt.scale, g0.pose, g0.rays, g0.ray_depth)
        Xp = compose_pointmap(pred.scale, p0.pose, p0.rays, p0.ray_depth)
        num = np.linalg.norm(Xg.pts, axis=-1)
        den = np.linalg.norm(Xp.pts, axis=-1)
        joint = Xg.valid & Xp.valid
    else:
        num = gt.scale * ray_depth_to_z(g0.rays, g0.ray_depth)
        den = pred.scale * ray_depth_to_z(p0.rays, p0.ray_depth)
        joint = g0.ray_depth.valid & p0.ray_depth.valid & (num > 0)
    k, count = _median_ratio(num, den, joint, "view 0")
    return AlignmentResult(k, mode, count), pred.with_scale(pred.scale * k)


def _median_ratio(num, den, joint, where: str) -> tuple[float, int]:
    """Median of ``num / den`` over ``joint`` pixels whose denominator is usable."""
    ok = joint & np.isfinite(den) & (np.abs(den) >= 1e-9)
    if not ok.any():
        raise AlignmentDegenerateError(f"no jointly valid pixel to align on in {where}")
    k = float(np.median(num[ok] / den[ok]))
    if not k > 0:
        raise AlignmentDegenerateError(f"median ratio {k} in {where} is not positive")
    return k, int(ok.sum())


# ---------------------------------------------------------------------------
# sequence evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    align: str = "median"
    thresholds: tuple = APD_THRESHOLDS
    tau_delta: float = TAU_DELTA
    mask_theta: float = 1e-3
    depth_align: bool = True

    def __post_init__(self):
        if self.align not in ALIGN_MODES:
            raise ValueError(f"unknown alignment mode {self.align!r}")
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds or min(self.thresholds) <= 0 or self.tau_delta <= 0 or self.mask_theta < 0:
            raise ValueError("thresholds must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d


@dataclass
class SequenceRecord:
    name: str
    epe_points: float
    apd: float
    epe_flow: float
    tau: float
    abs_rel: float
    delta_125: float
    counts: dict
    alignment: dict
    per_frame: dict = field(default_factory=dict)

    METRICS = ("epe_points", "apd", "epe_flow", "tau", "abs_rel", "delta_125")

    def to_dict(self) -> dict:
        d = {"name": self.name}
        for k in self.METRICS:
            d[k] = _nan_to_none(getattr(self, k))
        d["counts"] = dict(self.counts)
        d["alignment"] = dict(self.alignment)
        d["per_frame"] = {k: [_nan_to_none(x) for x in v] for k, v in self.per_frame.items()}
        return d


def _nan_to_none(x):
    x = float(x)
    return None if math.isnan(x) else x


def evaluate_sequence(pred: SceneSequence, gt: SceneSequence, config: EvalConfig | None = None, name: str = "") -> SequenceRecord:
    """Align, then score dynamic points after motion, scene flow and depth.

    Points-after-motion metrics use only pixels that ground-truth flow marks
    dynamic at that frame; flow metrics use every jointly valid pixel of
    frames 1..N-1; depth metrics use z-depth of every view.

    With ``align="per_frame"`` each frame's prediction gets an extra factor,
    the median ratio of ground-truth to predicted point-after-motion norms
    over that frame's jointly valid pixels. Depth keeps its own per-sequence
    median alignment.
    """
    config = config or EvalConfig()
    if len(pred) != len(gt) or pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in view count or resolution")
    alignment, pred = median_scale_align(pred, gt, config.align)

    g0, p0 = gt.views[0], pred.views[0]
    G0 = compose_pointmap(gt.scale, g0.pose, g0.rays, g0.ray_depth)
    P0 = compose_pointmap(pred.scale, p0.pose, p0.rays, p0.ray_depth)

    point_err, flow_err = [], []
    frame_epe_points, frame_epe_flow = [], []
    frame_scales = [1.0]
    for t in range(1, len(gt)):
        gv, pv = gt.views[t], pred.views[t]
        if gv.scene_flow is None or pv.scene_flow is None:
            frame_epe_points.append(math.nan)
            frame_epe_flow.append(math.nan)
            frame_scales.append(math.nan)
            continue
        M = SceneFlowField(gt.scale * gv.scene_flow.flow, gv.scene_flow.valid & G0.valid)
        Mp = pred.scale * pv.scene_flow.flow
        joint = M.valid & pv.scene_flow.valid & P0.valid
        r = 1.0
        if config.align == "per_frame":
            num = np.linalg.norm(G0.pts + M.flow, axis=-1)
            den = np.linalg.norm(P0.pts + Mp, axis=-1)
            r, _ = _median_ratio(num, den, joint, f"frame {t}")
        frame_scales.append(r)
        dyn = motion_mask_from_flow(M, config.mask_theta) & joint
        ep = _errors(r * (P0.pts + Mp), G0.pts + M.flow, dyn)
        ef = _errors(r * Mp, M.flow, joint)
        point_err.append(ep)
        flow_err.append(ef)
        frame_epe_points.append(float(ep.mean()) if ep.size else math.nan)
        frame_epe_flow.append(float(ef.mean()) if ef.size else math.nan)

    ep = np.concatenate(point_err) if point_err else np.zeros(0)
    ef = np.concatenate(flow_err) if flow_err else np.zeros(0)

    gz, pz, vz = [], [], []
    for gv, pv in zip(gt.views, pred.views):
        gz.append(gt.scale * ray_depth_to_z(gv.rays, gv.ray_depth))
        pz.append(pred.scale * ray_depth_to_z(pv.rays, pv.ray_depth))
        vz.append(gv.ray_depth.valid & pv.ray_depth.valid)
    gz, pz, vz = np.stack(gz), np.stack(pz), np.stack(vz)
    depth_align = config.depth_align and config.align != "none"
    abs_rel, d125 = depth_metrics(pz, gz, vz, align=depth_align)
    depth_count = int((vz & (gz > 0) & (pz > 0)).sum())

    align_info = {"mode": alignment.statistic, "scale": alignment.scale, "count": alignment.count}
    if config.align == "per_frame":
        align_info["frame_scales"] = [_nan_to_none(alignment.scale * r) for r in frame_scales]
    return SequenceRecord(
        name=name,
        epe_points=float(ep.mean()) if ep.size else math.nan,
        apd=apd_from_errors(ep, config.thresholds),
        epe_flow=float(ef.mean()) if ef.size else math.nan,
        tau=100.0 * float(np.mean(ef < config.tau_delta)) if ef.size else math.nan,
        abs_rel=abs_rel,
        delta_125=d125,
        counts={"dynamic_points": int(ep.size), "flow_vectors": int(ef.size), "depth_pixels": depth_count},
        alignment=align_info,
        per_frame={"epe_points": frame_epe_points, "epe_flow": frame_epe_flow},
    )


@dataclass
class EvalReport:
    records: list
    config: EvalConfig

    SCHEMA = "fourdkit.eval/1"

    def aggregate(self) -> dict:
        """Unweighted mean over sequences, skipping NaN, with exact summation."""
        out = {}
        for k in SequenceRecord.METRICS:
            vals = [getattr(r, k) for r in self.records if not math.isnan(getattr(r, k))]
            out[k] = math.fsum(vals) / len(vals) if vals else math.nan
        return out

    def to_dict(self) -> dict:
        return {
            "schema": self.SCHEMA,
            "config": self.config.to_dict(),
            "sequences": [r.to_dict() for r in sorted(self.records, key=lambda r: r.name)],
            "aggregate": {k: _nan_to_none(v) for k, v in self.aggregate().items()},
        }
