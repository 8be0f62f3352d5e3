"""Sliding window, covariance, scoring paths, upsampling, latency."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynodetect.cloud import Cloud, TimedPoint
from dynodetect.core import (
    Params,
    SlidingMap,
    classify_cloud,
    dynamic_score,
    latency,
    push_cloud,
    score_cloud,
    spatiotemporal_covariance,
    upsample_labels,
)
from dynodetect.errors import FrameOrderError, WindowNotFullError
from dynodetect.spatial import downsample


def flat_cloud(frame, stamp, n=120, extent=2.0, seed=None, z=0.0):
    """Points on the z = const plane, deterministic grid unless seeded."""
    if seed is None:
        side = int(np.sqrt(n))
        g = np.linspace(-extent, extent, side)
        xx, yy = np.meshgrid(g, g)
        xyz = np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)])
    else:
        rng = np.random.default_rng(seed)
        xyz = rng.uniform(-extent, extent, size=(n, 3))
        xyz[:, 2] = z
    return Cloud(xyz, np.full(len(xyz), float(stamp)), frame_index=frame, stamp=stamp)


def small_params(**kw):
    defaults = dict(radius=0.5, threshold=0.25, half_window=1,
                    voxel_size=1e-6, voxel_divisor=None)
    defaults.update(kw)
    return Params(**defaults)


class TestParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            Params(radius=0.0)
        with pytest.raises(ValueError):
            Params(threshold=1.5)
        with pytest.raises(ValueError):
            Params(half_window=0)
        with pytest.raises(ValueError):
            Params(min_neighbors=3)
        with pytest.raises(ValueError):
            Params(min_distinct_frames=1)
        with pytest.raises(ValueError):
            Params(voxel_size=0.1)  # both voxel modes set (divisor defaults)
        with pytest.raises(ValueError):
            Params(voxel_size=None, voxel_divisor=None)

    def test_window_length(self):
        assert Params(half_window=10).window_length == 21

    def test_resolve_voxel(self):
        c = Cloud(np.array([[0.0, 0, 0], [60.0, 0, 0]]), np.zeros(2))
        assert Params(voxel_divisor=600.0).resolve_voxel_size(c) == pytest.approx(0.1)
        assert Params(voxel_size=0.2, voxel_divisor=None).resolve_voxel_size(c) == 0.2


class TestSlidingWindow:
    def test_fifo_n1(self):
        m = SlidingMap(1)
        assert m.push(flat_cloud(0, 0.0)) is None
        assert m.push(flat_cloud(1, 0.1)) is None
        target = m.push(flat_cloud(2, 0.2))
        assert target.frame_index == 1
        target = m.push(flat_cloud(3, 0.3))
        assert target.frame_index == 2
        assert [c.frame_index for c in m.window] == [1, 2, 3]

    def test_n10_needs_21_frames(self):
        m = SlidingMap(10)
        for k in range(20):
            assert m.push(flat_cloud(k, k * 0.1)) is None
        assert m.push(flat_cloud(20, 2.0)).frame_index == 10

    def test_frame_regression(self):
        m = SlidingMap(1)
        m.push(flat_cloud(5, 0.5))
        with pytest.raises(FrameOrderError):
            m.push(flat_cloud(4, 0.4))
        with pytest.raises(FrameOrderError):
            push_cloud(m, flat_cloud(5, 0.5))

    def test_flat_points_reflect_window(self):
        m = SlidingMap(1)
        for k in range(3):
            m.push(flat_cloud(k, k * 0.1, n=16))
        assert m.flat_points.shape == (3 * 16, 4)
        m.push(flat_cloud(3, 0.3, n=16))
        assert m.flat_points.shape == (3 * 16, 4)
        assert set(np.unique(m.flat_frame_index)) == {1, 2, 3}

    def test_target_requires_full_window(self):
        m = SlidingMap(2)
        m.push(flat_cloud(0, 0.0))
        with pytest.raises(WindowNotFullError):
            _ = m.target


class TestCovariance:
    def test_single_point(self):
        mean, cov = spatiotemporal_covariance(np.array([[1.0, 2.0, 3.0, 4.0]]))
        assert np.array_equal(mean, [1, 2, 3, 4])
        assert np.array_equal(cov, np.zeros((4, 4)))

    def test_two_point_hand_case(self):
        # (0,0,0,t=0) and (2,0,0,t=1): mean (1,0,0,0.5),
        # cov_xx = 1, cov_xt = 0.5, cov_tt = 0.25, everything else 0
        mean, cov = spatiotemporal_covariance(np.array([[0, 0, 0, 0], [2, 0, 0, 1.0]]))
        assert np.allclose(mean, [1, 0, 0, 0.5])
        expect = np.zeros((4, 4))
        expect[0, 0] = 1.0
        expect[0, 3] = expect[3, 0] = 0.5
        expect[3, 3] = 0.25
        assert np.allclose(cov, expect, atol=1e-15)

    def test_population_normalization(self):
        pts = np.random.default_rng(0).normal(size=(10, 4))
        _, cov = spatiotemporal_covariance(pts)
        np_cov = np.cov(pts.T, bias=True)
        assert np.allclose(cov, np_cov, atol=1e-12)
        assert np.abs(cov - cov.T).max() <= 1e-12

    def test_accepts_timed_points(self):
        pts = [TimedPoint(0, 0, 0, 0), TimedPoint(2, 0, 0, 1)]
        mean, _ = spatiotemporal_covariance(pts)
        assert np.allclose(mean, [1, 0, 0, 0.5])

    def test_empty_neighborhood(self):
        with pytest.raises(ValueError, match="empty"):
            spatiotemporal_covariance(np.empty((0, 4)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=2, max_value=40), st.integers(min_value=0, max_value=2**31))
    def test_translation_invariance(self, n, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(n, 4))
        shift = rng.normal(size=4) * 100
        _, cov_a = spatiotemporal_covariance(pts)
        _, cov_b = spatiotemporal_covariance(pts + shift)
        assert np.allclose(cov_a, cov_b, atol=1e-10)

    def test_matches_naive_two_pass(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(100, 4)) * 5
        _, cov = spatiotemporal_covariance(pts)
        mean = pts.mean(axis=0)
        naive = np.zeros((4, 4))
        for row in pts:
            d = row - mean
            naive += np.outer(d, d)
        naive /= len(pts)
        assert np.abs(cov - naive).max() < 1e-12


def build_static_plane_map(half_window=2, n=400, extent=2.0):
    """Identical plane resampled every frame; returns (map, target)."""
    m = SlidingMap(half_window)
    target = None
    for k in range(2 * half_window + 1):
        cloud = flat_cloud(k, k * 0.1, n=n, extent=extent)
        got = m.push(cloud)
        target = got or target
    return m, target


class TestScoring:
    def test_static_plane_scores_zero(self):
        m, target = build_static_plane_map()
        params = small_params(half_window=2)
        scored = score_cloud(target, m, params)
        assert scored.valid.all()
        assert scored.score.max() <= 1e-9
        assert not scored.dynamic.any()

    def test_single_frame_neighborhood_guarded(self):
        # all neighbors at one timestamp: without the guard the time axis
        # itself would be the flattest direction and score 1
        m = SlidingMap(1)
        m.push(flat_cloud(0, 0.0, n=100, extent=0.2, z=0.0))
        m.push(flat_cloud(1, 0.1, n=100, extent=0.2, z=50.0))  # far away
        m.push(flat_cloud(2, 0.2, n=100, extent=0.2, z=100.0))
        params = small_params()
        point = m.target.point(0)
        result = dynamic_score(point, m, params)
        assert not result.valid
        assert result.score == 0.0
        assert result.label == "static"

    def test_min_neighbors_guard(self):
        m, target = build_static_plane_map()
        params = small_params(half_window=2, min_neighbors=10_000)
        scored = score_cloud(target, m, params)
        assert not scored.valid.any()
        assert not scored.dynamic.any()

    def test_window_not_full(self):
        m = SlidingMap(2)
        cloud = flat_cloud(0, 0.0)
        m.push(cloud)
        with pytest.raises(WindowNotFullError):
            score_cloud(cloud, m, small_params(half_window=2))
        with pytest.raises(WindowNotFullError):
            dynamic_score(cloud.point(0), m, small_params(half_window=2))

    def test_moving_plane_closed_form(self):
        # plane z = v t: unit normal (0,0,1), n.v = 0.5
        # expected score 0.5 / sqrt(1.25)
        v = 0.5
        m = SlidingMap(2)
        target = None
        for k in range(5):
            stamp = k * 0.1
            c = flat_cloud(k, stamp, n=900, extent=1.5, z=v * stamp)
            got = m.push(c)
            target = got or target
        params = small_params(half_window=2)
        scored = score_cloud(target, m, params)
        interior = (np.abs(scored.xyz[:, 0]) < 1.0) & (np.abs(scored.xyz[:, 1]) < 1.0)
        expect = v / np.sqrt(1 + v * v)
        assert scored.valid[interior].all()
        got = scored.score[interior]
        assert np.abs(got - expect).max() < 1e-9  # noiseless, exact-plane samples

    def test_batch_matches_pointwise(self):
        rng = np.random.default_rng(8)
        m = SlidingMap(2)
        target = None
        for k in range(5):
            stamp = k * 0.1
            xyz = rng.uniform(-1, 1, size=(150, 3))
            c = Cloud(xyz, np.full(150, stamp) + rng.uniform(-0.05, 0.05, 150),
                      frame_index=k, stamp=stamp)
            got = m.push(c)
            target = got or target
        params = small_params(half_window=2, min_neighbors=4)
        scored = score_cloud(target, m, params)
        for i in range(0, len(target), 13):
            ref = dynamic_score(target.point(i), m, params)
            assert scored.valid[i] == ref.valid
            assert scored.score[i] == pytest.approx(ref.score, abs=1e-9)

    def test_score_range_and_thresholds(self):
        m, target = build_static_plane_map()
        for thr in (0.0, 0.5, 1.0):
            params = small_params(half_window=2, threshold=thr)
            scored = score_cloud(target, m, params)
            assert np.all((scored.score >= 0.0) & (scored.score <= 1.0))
        # thr = 1.0 can never be strictly exceeded
        params = small_params(half_window=2, threshold=1.0)
        scored = score_cloud(target, m, params)
        assert not scored.dynamic.any()

    def test_threshold_monotone(self):
        m, target = build_static_plane_map()
        counts = []
        for thr in np.linspace(0, 1, 11):
            params = small_params(half_window=2, threshold=float(thr))
            scored = score_cloud(target, m, params)
            counts.append(int(scored.dynamic.sum()))
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_classify_partitions_in_order(self):
        m, target = build_static_plane_map()
        params = small_params(half_window=2)
        dyn, sta = classify_cloud(target, m, params)
        assert len(dyn) + len(sta) == len(target)
        assert len(dyn) == 0
        assert np.array_equal(sta.xyz, target.xyz)

    def test_rerun_bit_identical(self):
        m, target = build_static_plane_map()
        params = small_params(half_window=2)
        a = score_cloud(target, m, params)
        b = score_cloud(target, m, params)
        assert np.array_equal(a.score, b.score)
        assert np.array_equal(a.valid, b.valid)


class TestRigidInvariance:
    def test_global_rigid_transform_preserves_scores(self):
        from scipy.spatial.transform import Rotation

        rot = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
        shift = np.array([5.0, -3.0, 2.0])

        def run(transform):
            rng = np.random.default_rng(9)
            m = SlidingMap(2)
            target = None
            for k in range(5):
                stamp = k * 0.1
                xyz = rng.uniform(-1, 1, size=(200, 3))
                xyz[:, 2] = 0.25 * stamp  # rising plane
                if transform:
                    xyz = xyz @ rot.T + shift
                c = Cloud(xyz, np.full(200, stamp), frame_index=k, stamp=stamp)
                got = m.push(c)
                target = got or target
            return score_cloud(target, m, small_params(half_window=2))

        plain = run(False)
        moved = run(True)
        assert np.array_equal(plain.valid, moved.valid)
        assert np.abs(plain.score - moved.score).max() < 1e-9
        assert np.array_equal(plain.dynamic, moved.dynamic)


class TestUpsample:
    def test_no_dynamic_points(self):
        full = flat_cloud(0, 0.0, n=100)
        labels = upsample_labels(full, np.empty((0, 3)), 0.5)
        assert not labels.any()

    def test_boundary(self):
        full = Cloud(np.array([[0.4, 0, 0], [0.6, 0, 0]]), np.zeros(2))
        labels = upsample_labels(full, np.array([[0.0, 0.0, 0.0]]), 0.5)
        assert list(labels) == [True, False]

    def test_accepts_scored_cloud(self):
        m, target = build_static_plane_map()
        scored = score_cloud(target, m, small_params(half_window=2))
        full = flat_cloud(2, 0.2, n=100)
        labels = upsample_labels(full, scored.select(scored.dynamic), 0.5)
        assert labels.shape == (len(full),)

    def test_invalid_radius(self):
        full = flat_cloud(0, 0.0)
        with pytest.raises(ValueError, match="radius"):
            upsample_labels(full, np.array([[0.0, 0, 0]]), 0.0)


class TestLatency:
    def test_doals_rate(self):
        assert latency(Params(half_window=10), 10.0) == pytest.approx(1.0)

    def test_camera_rate(self):
        assert latency(Params(half_window=4), 30.0) == pytest.approx(4 / 30)

    def test_invalid_rate(self):
        with pytest.raises(ValueError, match="rate"):
            latency(Params(half_window=10), 0.0)

    def test_n_zero_unrepresentable(self):
        with pytest.raises(ValueError):
            Params(half_window=0)


class TestDownsampleIntegration:
    def test_pipeline_respects_first_point_rule(self):
        rng = np.random.default_rng(10)
        xyz = rng.uniform(0, 1, size=(500, 3))
        t = rng.uniform(0, 0.05, 500)
        cloud = Cloud(xyz, t, frame_index=0, stamp=0.0)
        down = downsample(cloud, 0.2)
        # timestamps of retained points appear unchanged in the original
        for i in range(len(down)):
            j = np.flatnonzero((cloud.xyz == down.xyz[i]).all(axis=1))[0]
            assert cloud.t[j] == down.t[i]
