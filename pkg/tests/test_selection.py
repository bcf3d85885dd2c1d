"""Two-stage anchor selection tests: scoring, quantile cut, consensus.

Constructed consensus cases pin exact numbers:
    points on m = s                  -> model (1, 0) and every point kept
    m = 1.2 s + 0.1 plus 5 gross
    outliers displaced by +3 m       -> (1.2, 0.1) back, outliers dropped
    two points (1,1.5), (2,2.5)      -> the line through both, a=1, b=0.5
    anti-correlated triple           -> no positive-gain hypothesis at all

The scene-based check renders a strongly and a weakly textured plane
side by side and requires edge candidates to outscore weak-texture
candidates by 10x in median, the contrast the quantile cut relies on.
"""

from __future__ import annotations

import numpy as np
import pytest

from smvfuse.geometry import CameraIntrinsics, PixelCoord, RigidPose, inverse_depth_sensitivity
from smvfuse.maps import DenseDepthMap
from smvfuse.metrics import gradient_magnitude
from smvfuse.multiview import InverseDepthHypothesisGrid, estimate_inverse_depth
from smvfuse.selection import (
    CandidatePoint,
    ConsensusError,
    LinearDepthModel,
    candidates_from_result,
    geometric_score,
    photometric_score,
    ransac_linear_consensus,
    select_anchors,
    select_top_fraction,
)
from smvfuse.synth import PatchSpec, PlanarScene, lateral_trajectory, render

INTR = CameraIntrinsics(fx=200.0, fy=200.0, cx=160.0, cy=120.0, width=320, height=240)


def _cand(u, v, depth=2.0, best=0.01, second=0.05, slope=0.3, sens=10.0):
    return CandidatePoint(
        u=u,
        v=v,
        depth_multiview=depth,
        best_cost=best,
        second_best_cost=second,
        cost_slope=slope,
        sensitivity=sens,
    )


class TestCandidatePoint:
    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError, match="depth"):
            _cand(0, 0, depth=0.0)

    def test_second_best_below_best_rejected(self):
        with pytest.raises(ValueError, match="second-best"):
            _cand(0, 0, best=0.05, second=0.01)

    def test_negative_slope_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            _cand(0, 0, slope=-0.1)


class TestLinearDepthModel:
    def test_nonpositive_gain_rejected(self):
        with pytest.raises(ValueError, match="gain"):
            LinearDepthModel(0.0, 1.0)
        with pytest.raises(ValueError, match="gain"):
            LinearDepthModel(-0.5, 1.0)

    def test_predict_is_affine(self):
        model = LinearDepthModel(1.2, 0.1)
        assert model.predict(np.array([1.0, 2.0])) == pytest.approx([1.3, 2.5])


class TestPhotometricScore:
    def test_ambiguous_match_scores_zero(self):
        assert photometric_score(_cand(0, 0, best=0.02, second=0.02, slope=5.0)) == 0.0

    def test_flat_curve_scores_zero(self):
        assert photometric_score(_cand(0, 0, best=0.0, second=0.5, slope=0.0)) == 0.0

    def test_hand_value(self):
        c = _cand(0, 0, best=0.01, second=0.03, slope=0.5)
        # (0.03 - 0.01) / (0.01 + 1e-6) * 0.5
        assert photometric_score(c) == pytest.approx(0.99990001, rel=1e-8)

    def test_edge_pixels_outscore_weak_texture_10x(self):
        strong = PatchSpec(
            origin=np.array([-2.6, -1.5, 2.0]),
            edge_a=np.array([2.6, 0.0, 0.0]),
            edge_b=np.array([0.0, 3.0, 0.0]),
            texture="noise:130",
            amplitude=0.9,
            segment_id=0,
        )
        weak = PatchSpec(
            origin=np.array([0.0, -1.5, 2.0]),
            edge_a=np.array([2.6, 0.0, 0.0]),
            edge_b=np.array([0.0, 3.0, 0.0]),
            texture="noise:60",
            amplitude=0.05,
            segment_id=1,
        )
        scene = PlanarScene((strong, weak), background_depth=12.0)
        frames = []
        for i, pose in enumerate(lateral_trajectory(3, 0.1).poses):
            frame, _, _ = render(scene, INTR, pose, f"w{i}")
            frames.append(frame)
        _, _, segments = render(scene, INTR, frames[0].pose)
        grad = gradient_magnitude(frames[0].image)
        mask = np.zeros(grad.shape, dtype=bool)
        mask[10:230, 10:310] = True
        res = estimate_inverse_depth(
            frames[0], frames[1:], INTR, InverseDepthHypothesisGrid(n_samples=128), mask
        )
        cands = candidates_from_result(res, INTR)
        edge = [photometric_score(c) for c in cands if segments[c.v, c.u] == 0 and grad[c.v, c.u] > 0.35]
        flat = [photometric_score(c) for c in cands if segments[c.v, c.u] == 1 and grad[c.v, c.u] < 0.1]
        assert len(edge) > 100 and len(flat) > 100
        assert np.median(edge) >= 10.0 * np.median(flat)


class TestGeometricScore:
    def test_equals_sensitivity(self):
        assert geometric_score(_cand(0, 0, sens=7.5)) == 7.5

    def test_zero_baseline_zero_score(self):
        sens = inverse_depth_sensitivity(INTR, RigidPose.identity(), PixelCoord(160, 120), 0.5)
        assert sens == 0.0
        assert geometric_score(_cand(0, 0, sens=sens)) == 0.0

    def test_worked_20_pixel_example(self):
        # 0.1 m lateral baseline at the principal point: fx * baseline
        pose = RigidPose(np.eye(3), np.array([0.1, 0.0, 0.0]))
        sens = inverse_depth_sensitivity(INTR, pose, PixelCoord(160, 120), 0.5)
        assert geometric_score(_cand(0, 0, sens=sens)) == pytest.approx(20.0, rel=1e-9)

    def test_doubling_baseline_doubles_score(self):
        p1 = RigidPose(np.eye(3), np.array([0.1, 0.0, 0.0]))
        p2 = RigidPose(np.eye(3), np.array([0.2, 0.0, 0.0]))
        s1 = inverse_depth_sensitivity(INTR, p1, PixelCoord(200, 100), 0.5)
        s2 = inverse_depth_sensitivity(INTR, p2, PixelCoord(200, 100), 0.5)
        assert s2 == pytest.approx(2.0 * s1, rel=1e-6)


class TestSelectTopFraction:
    def test_fraction_one_keeps_everything(self):
        cands = [_cand(i, 0, second=0.01 * (i + 2)) for i in range(7)]
        out = select_top_fraction(cands, 1.0)
        assert sorted((c.u, c.v) for c in out) == sorted((c.u, c.v) for c in cands)

    def test_100_candidates_quarter_keeps_25(self):
        cands = [_cand(i % 20, i // 20, second=0.01 + 0.001 * i) for i in range(100)]
        assert len(select_top_fraction(cands, 0.25)) == 25

    def test_count_is_ceiling(self):
        cands = [_cand(i, 0) for i in range(10)]
        assert len(select_top_fraction(cands, 0.21)) == 3

    def test_keeps_highest_scores(self):
        low = [_cand(i, 0, second=0.011) for i in range(6)]
        high = [_cand(i, 1, second=0.5, slope=1.0) for i in range(2)]
        out = select_top_fraction(low + high, 0.25)
        assert {(c.u, c.v) for c in out} == {(0, 1), (1, 1)}

    def test_all_equal_scores_tie_break_row_major(self):
        cands = [_cand(u, v) for v in (1, 0) for u in (3, 1, 2)]
        out = select_top_fraction(cands, 0.5)
        assert [(c.u, c.v) for c in out] == [(1, 0), (2, 0), (3, 0)]

    def test_empty_input_empty_output(self):
        assert select_top_fraction([], 0.25) == []

    def test_output_subset_of_input(self):
        rng = np.random.default_rng(0)
        cands = [
            _cand(int(u), int(v), second=0.01 + float(x))
            for u, v, x in zip(rng.integers(0, 50, 40), rng.integers(0, 50, 40), rng.random(40))
        ]
        out = select_top_fraction(cands, 0.3)
        assert all(c in cands for c in out)

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError, match="fraction"):
            select_top_fraction([_cand(0, 0)], 0.0)
        with pytest.raises(ValueError, match="fraction"):
            select_top_fraction([_cand(0, 0)], 1.5)


def _s_map(h=40, w=40, base=2.0):
    return DenseDepthMap(np.full((h, w), base))


def _points_on_line(a, b, s_values, start_pixel=0):
    """Candidates whose s lookup hits the given values on a 40x40 map.

    Returns (points, s_map); point i sits at pixel (i mod 40, i // 40 + start).
    """
    s = np.full((40, 40), 2.0)
    pts = []
    for i, sv in enumerate(s_values):
        u, v = i % 40, i // 40 + start_pixel
        s[v, u] = sv
        pts.append(_cand(u, v, depth=a * sv + b))
    return pts, DenseDepthMap(s)


class TestRansacLinearConsensus:
    def test_identity_relation_recovered(self):
        s_values = np.linspace(1.0, 3.0, 12)
        pts, s = _points_on_line(1.0, 0.0, s_values)
        model, omega = ransac_linear_consensus(pts, s, seed=0)
        assert model.a == pytest.approx(1.0, abs=1e-9)
        assert model.b == pytest.approx(0.0, abs=1e-9)
        assert len(omega) == len(pts)

    def test_constructed_outliers_rejected_exactly(self):
        s_values = np.linspace(1.0, 3.0, 20)
        pts, s = _points_on_line(1.2, 0.1, s_values)
        bad = []
        for i, sv in enumerate((1.1, 1.6, 2.1, 2.6, 2.9)):
            u, v = i, 30
            arr = s.values.copy()
            arr[v, u] = sv
            s = DenseDepthMap(arr)
            bad.append(_cand(u, v, depth=1.2 * sv + 0.1 + 3.0))
        model, omega = ransac_linear_consensus(pts + bad, s, seed=3)
        assert model.a == pytest.approx(1.2, abs=1e-6)
        assert model.b == pytest.approx(0.1, abs=1e-6)
        kept = {(int(u), int(v)) for u, v in omega.pixels}
        assert kept == {(p.u, p.v) for p in pts}

    def test_two_points_exact_line(self):
        s = np.full((40, 40), 2.0)
        s[0, 0], s[0, 1] = 1.0, 2.0
        pts = [_cand(0, 0, depth=1.5), _cand(1, 0, depth=2.5)]
        model, omega = ransac_linear_consensus(pts, DenseDepthMap(s), seed=0)
        assert model.a == pytest.approx(1.0, abs=1e-12)
        assert model.b == pytest.approx(0.5, abs=1e-12)
        assert len(omega) == 2

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        s_values = 1.0 + 2.0 * rng.random(30)
        pts, s = _points_on_line(0.9, 0.3, s_values)
        jitter = [
            CandidatePoint(
                u=p.u, v=p.v,
                depth_multiview=p.depth_multiview + dz,
                best_cost=p.best_cost, second_best_cost=p.second_best_cost,
                cost_slope=p.cost_slope, sensitivity=p.sensitivity,
            )
            for p, dz in zip(pts, 0.04 * rng.standard_normal(30))
        ]
        shuffled = list(jitter)
        rng.shuffle(shuffled)
        m1, o1 = ransac_linear_consensus(jitter, s, seed=11)
        m2, o2 = ransac_linear_consensus(shuffled, s, seed=11)
        assert (m1.a, m1.b) == (m2.a, m2.b)
        assert np.array_equal(o1.pixels, o2.pixels)
        assert np.array_equal(o1.depths, o2.depths)

    def test_single_point_rejected(self):
        with pytest.raises(ConsensusError, match="at least 2"):
            ransac_linear_consensus([_cand(0, 0)], _s_map())

    def test_constant_s_has_no_hypothesis(self):
        # every draw has ds = 0, so no line can be proposed
        pts = [_cand(i, 0, depth=1.0 + 0.1 * i) for i in range(8)]
        with pytest.raises(ConsensusError, match="no hypothesis"):
            ransac_linear_consensus(pts, _s_map(), seed=0)

    def test_anticorrelated_points_have_no_positive_gain(self):
        s = np.full((40, 40), 2.0)
        for i, (sv, m) in enumerate(((1.0, 3.0), (2.0, 2.0), (3.0, 1.0))):
            s[0, i] = sv
        pts = [_cand(0, 0, depth=3.0), _cand(1, 0, depth=2.0), _cand(2, 0, depth=1.0)]
        with pytest.raises(ConsensusError, match="no hypothesis"):
            ransac_linear_consensus(pts, DenseDepthMap(s), seed=0)

    def test_nonpositive_single_view_rejected(self):
        # zero marks an invalid single-view pixel; it cannot anchor a fit
        s = np.full((40, 40), 2.0)
        s[0, 0] = 0.0
        pts = [_cand(0, 0), _cand(1, 0)]
        with pytest.raises(ValueError, match="positive"):
            ransac_linear_consensus(pts, DenseDepthMap(s))

    def test_bad_params_rejected(self):
        pts = [_cand(0, 0), _cand(1, 0)]
        with pytest.raises(ValueError, match="draw"):
            ransac_linear_consensus(pts, _s_map(), iters=0)
        with pytest.raises(ValueError, match="tolerance"):
            ransac_linear_consensus(pts, _s_map(), inlier_tol=0.0)

    def test_seeded_rerun_identical(self):
        rng = np.random.default_rng(9)
        s_values = 1.0 + 2.0 * rng.random(25)
        pts, s = _points_on_line(1.1, -0.2, s_values)
        m1, o1 = ransac_linear_consensus(pts, s, seed=4)
        m2, o2 = ransac_linear_consensus(pts, s, seed=4)
        assert (m1.a, m1.b) == (m2.a, m2.b)
        assert np.array_equal(o1.pixels, o2.pixels)

    def test_30_percent_gross_outliers_all_removed(self):
        rng = np.random.default_rng(17)
        s_values = 1.0 + 2.0 * rng.random(28)
        noise = 0.04 * (2.0 * rng.random(28) - 1.0)
        s = np.full((40, 40), 2.0)
        pts = []
        for i, (sv, dz) in enumerate(zip(s_values, noise)):
            u, v = i % 40, i // 40
            s[v, u] = sv
            pts.append(_cand(u, v, depth=1.2 * sv + 0.1 + dz))
        bad = []
        for i in range(12):
            u, v = i, 30
            sv = 1.0 + 0.15 * i
            s[v, u] = sv
            bad.append(_cand(u, v, depth=1.2 * sv + 0.1 + 3.0))
        _, omega = ransac_linear_consensus(pts + bad, DenseDepthMap(s), seed=2)
        kept = {(int(u), int(v)) for u, v in omega.pixels}
        assert kept.isdisjoint({(p.u, p.v) for p in bad})
        assert len(kept & {(p.u, p.v) for p in pts}) >= 0.8 * len(pts)


class TestSelectAnchors:
    def test_pipeline_recovers_global_offset(self):
        # two depth clusters so 2-point draws span a usable s range; a
        # single fronto plane would make every draw degenerate (ds = 0)
        left = PatchSpec(
            origin=np.array([-2.4, -1.4, 2.0]),
            edge_a=np.array([3.0, 0.0, 0.0]),
            edge_b=np.array([0.0, 2.8, 0.0]),
            texture="noise:140",
            amplitude=0.9,
            segment_id=0,
        )
        right = PatchSpec(
            origin=np.array([0.0, -2.7, 4.0]),
            edge_a=np.array([4.2, 0.0, 0.0]),
            edge_b=np.array([0.0, 5.4, 0.0]),
            texture="noise:100",
            amplitude=0.9,
            segment_id=1,
        )
        scene = PlanarScene((left, right), background_depth=12.0)
        frames, depth0 = [], None
        for i, pose in enumerate(lateral_trajectory(5, 0.1).poses):
            frame, depth, _ = render(scene, INTR, pose, f"p{i}")
            frames.append(frame)
            if i == 0:
                depth0 = depth
        mask = gradient_magnitude(frames[0].image) > 0.35
        res = estimate_inverse_depth(
            frames[0], frames[1:], INTR, InverseDepthHypothesisGrid(n_samples=256), mask
        )
        s = DenseDepthMap(depth0.values + 0.2)
        model, omega = select_anchors(res, s, INTR, seed=0)
        # m = s - 0.2 up to estimation error
        assert model.a == pytest.approx(1.0, abs=0.06)
        assert model.b == pytest.approx(-0.2, abs=0.08)
        assert len(omega) >= 100
        err = np.abs(omega.depths - depth0.values[omega.pixels[:, 1], omega.pixels[:, 0]])
        assert np.median(err) < 0.05

    def test_omega_subset_of_top_fraction(self):
        rng = np.random.default_rng(23)
        h = w = 40
        valid = np.zeros((h, w), dtype=bool)
        valid[rng.random((h, w)) < 0.2] = True
        inv = np.full((h, w), np.nan)
        inv[valid] = 0.4 + 0.2 * rng.random(valid.sum())
        res = None
        from smvfuse.multiview import SemiDenseDepthResult

        res = SemiDenseDepthResult(
            inv_depth=inv,
            best_cost=np.where(valid, 0.01, np.nan),
            second_best_cost=np.where(valid, 0.01 + 0.2 * rng.random((h, w)), np.nan),
            cost_slope=np.where(valid, rng.random((h, w)), np.nan),
            sensitivity=np.where(valid, 5.0 + 20.0 * rng.random((h, w)), np.nan),
            n_views=valid.astype(np.int32),
            grid=InverseDepthHypothesisGrid(),
        )
        small_intr = CameraIntrinsics(fx=50.0, fy=50.0, cx=20.0, cy=20.0, width=w, height=h)
        cands = candidates_from_result(res, small_intr)
        top = select_top_fraction(cands, 0.25)
        s = DenseDepthMap(2.0 + 0.5 * rng.random((h, w)))
        model, omega = select_anchors(res, s, small_intr, fraction=0.25, seed=1)
        top_pixels = {(c.u, c.v) for c in top}
        omega_pixels = {(int(u), int(v)) for u, v in omega.pixels}
        assert omega_pixels <= top_pixels
        assert model.a > 0
