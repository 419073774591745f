import json
import math
from dataclasses import replace

import numpy as np
import pytest

from fourdkit.errors import AlignmentDegenerateError
from fourdkit.geometry import RayDepthMap, SceneFlowField, SceneSequence
from fourdkit.metrics import (
    APD_THRESHOLDS,
    EvalConfig,
    EvalReport,
    apd,
    depth_metrics,
    epe,
    evaluate_sequence,
    median_scale_align,
    tau_inlier,
)
from fourdkit.synth import SceneConfig, build_scene, scene_to_sequence


def _loop_errors(pred, gt, mask):
    out = []
    H, W = mask.shape
    for i in range(H):
        for j in range(W):
            if mask[i, j]:
                out.append(math.sqrt(sum((pred[i, j, k] - gt[i, j, k]) ** 2 for k in range(3))))
    return out


def _loop_apd(pred, gt, mask, thresholds=(0.1, 0.3, 0.5, 1.0)):
    e = _loop_errors(pred, gt, mask)
    fr = []
    for d in thresholds:
        fr.append(sum(1 for x in e if x < d) / len(e))
    return 100.0 * sum(fr) / len(fr)


def _loop_depth(pz, gz, valid):
    ratios, pairs = [], []
    for i in range(gz.shape[0]):
        for j in range(gz.shape[1]):
            if valid[i, j]:
                ratios.append(gz[i, j] / pz[i, j])
                pairs.append((pz[i, j], gz[i, j]))
    k = float(np.median(ratios))
    rel = sum(abs(k * p - g) / g for p, g in pairs) / len(pairs)
    d = sum(1 for p, g in pairs if max(k * p / g, g / (k * p)) < 1.25) / len(pairs)
    return rel, 100.0 * d


class TestOracleEquivalence:
    @pytest.mark.parametrize("shape", [(1, 1), (3, 5), (8, 8)])
    def test_point_metrics(self, rng, shape):
        for _ in range(10):
            gt = rng.normal(size=shape + (3,))
            pred = gt + rng.normal(size=shape + (3,)) * rng.choice([0.05, 0.3, 1.0])
            mask = rng.random(shape) < 0.7
            mask.flat[0] = True
            e = _loop_errors(pred, gt, mask)
            assert abs(epe(pred, gt, mask) - sum(e) / len(e)) <= 1e-12
            assert abs(apd(pred, gt, mask) - _loop_apd(pred, gt, mask)) <= 1e-12
            ref_tau = 100.0 * sum(1 for x in e if x < 0.1) / len(e)
            assert abs(tau_inlier(pred, gt, mask) - ref_tau) <= 1e-12

    def test_depth_metrics(self, rng):
        for _ in range(10):
            gz = rng.uniform(1, 10, size=(8, 8))
            pz = gz * rng.uniform(0.7, 1.4, size=(8, 8)) * 0.5
            valid = rng.random((8, 8)) < 0.8
            rel, d = depth_metrics(pz, gz, valid)
            ref_rel, ref_d = _loop_depth(pz, gz, valid)
            assert abs(rel - ref_rel) <= 1e-12
            assert abs(d - ref_d) <= 1e-12


class TestThresholds:
    def test_apd_thresholds(self):
        assert APD_THRESHOLDS == (0.1, 0.3, 0.5, 1.0)

    def test_strict_inequality(self):
        gt = np.zeros((1, 4, 3))
        pred = np.zeros((1, 4, 3))
        pred[0, :, 0] = [0.1, 0.3, 0.5, 1.0]  # each error sits exactly on a threshold
        mask = np.ones((1, 4), bool)
        # 0.1 counts for none; 0.3 for {0.5, 1.0}; 0.5 for {1.0}; 1.0 for none
        assert apd(pred, gt, mask) == pytest.approx(100 * (0 + 1 / 4 + 2 / 4 + 3 / 4) / 4)
        assert tau_inlier(pred, gt, mask) == 0.0

    def test_perfect_and_empty(self):
        gt = np.ones((2, 2, 3))
        m = np.ones((2, 2), bool)
        assert epe(gt, gt, m) == 0.0 and apd(gt, gt, m) == 100.0
        assert math.isnan(epe(gt, gt, ~m)) and math.isnan(apd(gt, gt, ~m))


class TestNoiseResponse:
    def test_epe_matches_maxwell_mean(self):
        rng = np.random.default_rng(0)
        gt = rng.normal(size=(100, 200, 3))
        m = np.ones((100, 200), bool)
        sigma = 0.05
        got = epe(gt + rng.normal(size=gt.shape) * sigma, gt, m)
        assert abs(got - sigma * math.sqrt(8 / math.pi)) < 0.05 * sigma * math.sqrt(8 / math.pi)

    def test_monotone_in_sigma(self):
        rng = np.random.default_rng(1)
        gt = rng.normal(size=(100, 100, 3))
        m = np.ones((100, 100), bool)
        noise = rng.normal(size=gt.shape)
        e, a = [], []
        for s in (0.01, 0.05, 0.1, 0.5):
            e.append(epe(gt + s * noise, gt, m))
            a.append(apd(gt + s * noise, gt, m))
        assert all(x < y for x, y in zip(e, e[1:]))
        assert all(x > y for x, y in zip(a, a[1:]))


def _gt(seed=3, **kw):
    cfg = dict(seed=seed, n_frames=4, height=16, width=20, camera_mode="orbit", n_objects=3)
    cfg.update(kw)
    return scene_to_sequence(build_scene(SceneConfig(**cfg)))


def _rescaled(seq, alpha):
    """The same geometry expressed with normalized quantities scaled by ``alpha``."""
    views = [
        replace(
            v,
            pose=type(v.pose)(v.pose.q, v.pose.t * alpha),
            ray_depth=RayDepthMap(v.ray_depth.d * alpha, v.ray_depth.valid),
            scene_flow=SceneFlowField(v.scene_flow.flow * alpha, v.scene_flow.valid),
        )
        for v in seq.views
    ]
    return SceneSequence(views, 1.0, "pred", {})


class TestAlignment:
    def test_recovers_metric_scale(self):
        gt = _gt()
        pred = _rescaled(gt, 0.37)
        for mode in ("median", "median_depth"):
            res, aligned = median_scale_align(pred, gt, mode)
            assert aligned.scale == pytest.approx(gt.scale / 0.37, rel=1e-12)
            assert res.count > 0

    def test_none_is_identity(self):
        gt = _gt()
        res, out = median_scale_align(gt, gt, "none")
        assert res.scale == 1.0 and out is gt

    def test_degenerate(self):
        gt = _gt()
        v0 = gt.views[0]
        empty = replace(v0, ray_depth=RayDepthMap(np.full(v0.ray_depth.d.shape, np.nan), np.zeros(v0.ray_depth.d.shape, bool)))
        pred = SceneSequence([empty] + gt.views[1:], 1.0)
        with pytest.raises(AlignmentDegenerateError):
            median_scale_align(pred, gt)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            EvalConfig(align="per_pixel")


def _per_frame_scaled(gt, factors):
    """Prediction whose points after motion at frame t are off by ``factors[t]``."""
    views = [gt.views[0]]
    G0 = gt.views[0].rays.dirs * gt.views[0].ray_depth.d[..., None]
    for v, c in zip(gt.views[1:], factors[1:]):
        moved = c * (G0 + v.scene_flow.flow) - G0
        views.append(replace(v, scene_flow=SceneFlowField(moved, v.scene_flow.valid)))
    return SceneSequence(views, gt.scale, "pred", {})


class TestPerFrameAlignment:
    def test_removes_per_frame_scale_drift(self):
        gt = _gt(seed=6)
        pred = _per_frame_scaled(gt, [1.0, 1.3, 0.7, 2.0])
        rec = evaluate_sequence(pred, gt, EvalConfig(align="per_frame"))
        assert rec.epe_points < 1e-9 and rec.apd == 100.0
        np.testing.assert_allclose(rec.alignment["frame_scales"], [1.0, 1 / 1.3, 1 / 0.7, 1 / 2.0], rtol=1e-12)
        assert evaluate_sequence(pred, gt, EvalConfig(align="median")).epe_points > 0.01

    def test_global_rescale_gives_constant_frame_scales(self):
        gt = _gt(seed=6)
        rec = evaluate_sequence(_rescaled(gt, 0.25), gt, EvalConfig(align="per_frame"))
        assert rec.epe_points < 1e-9 and rec.epe_flow < 1e-9
        np.testing.assert_allclose(rec.alignment["frame_scales"], gt.scale / 0.25, rtol=1e-12)

    def test_median_mode_has_no_frame_scales(self):
        gt = _gt(seed=6)
        assert "frame_scales" not in evaluate_sequence(gt, gt).alignment


class TestEvaluateSequence:
    def test_perfect_prediction(self):
        gt = _gt()
        rec = evaluate_sequence(gt, gt)
        assert rec.epe_points < 1e-9 and rec.epe_flow < 1e-9 and rec.abs_rel < 1e-9
        assert rec.apd == 100.0 and rec.tau == 100.0 and rec.delta_125 == 100.0
        assert rec.counts["dynamic_points"] > 0

    def test_scale_free_prediction_is_perfect_after_alignment(self):
        gt = _gt(seed=8)
        rec = evaluate_sequence(_rescaled(gt, 2.5), gt)
        assert rec.epe_points < 1e-9 and rec.epe_flow < 1e-9
        assert rec.alignment["scale"] == pytest.approx(gt.scale / 2.5)

    def test_without_alignment_scale_matters(self):
        gt = _gt(seed=8)
        rec = evaluate_sequence(_rescaled(gt, 2.5), gt, EvalConfig(align="none"))
        assert rec.abs_rel > 0.1

    def test_static_scene_has_no_dynamic_points(self):
        gt = _gt(speed_range=(0.0, 0.0), angular_speed_range=(0.0, 0.0))
        rec = evaluate_sequence(gt, gt)
        assert rec.counts["dynamic_points"] == 0
        assert math.isnan(rec.epe_points) and math.isnan(rec.apd)
        assert rec.epe_flow == 0.0
        assert rec.to_dict()["epe_points"] is None

    def test_points_use_only_dynamic_pixels(self):
        gt = _gt(seed=5)
        pred = _rescaled(gt, 1.0).with_scale(gt.scale)
        # corrupt flow on static pixels only: point metrics must not notice
        views = [pred.views[0]]
        for v in pred.views[1:]:
            f = v.scene_flow.flow.copy()
            static = v.scene_flow.valid & ~v.motion_mask
            f[static] += 5.0
            views.append(replace(v, scene_flow=SceneFlowField(f, v.scene_flow.valid)))
        rec = evaluate_sequence(SceneSequence(views, gt.scale), gt, EvalConfig(align="none"))
        assert rec.epe_points < 1e-9
        assert rec.epe_flow > 1.0

    def test_shape_mismatch(self):
        a, b = _gt(), _gt(height=12)
        with pytest.raises(ValueError):
            evaluate_sequence(a, b)


class TestReport:
    def test_aggregate_skips_nan_and_serializes(self):
        gt = _gt()
        static = _gt(speed_range=(0.0, 0.0), angular_speed_range=(0.0, 0.0))
        recs = [evaluate_sequence(gt, gt, name="b"), evaluate_sequence(static, static, name="a")]
        rep = EvalReport(recs, EvalConfig())
        agg = rep.aggregate()
        assert agg["apd"] == 100.0
        d = rep.to_dict()
        assert [s["name"] for s in d["sequences"]] == ["a", "b"]
        json.dumps(d, allow_nan=False)
        assert d["schema"] == "fourdkit.eval/1"
