import numpy as np
import pytest

from catpose.errors import DegenerateGeometryError, NoConsensusError, ValidationError
from catpose.geometry import (SimilarityTransform, random_rotation,
                              rotation_angle_stable_deg, rot_z)
from catpose.solver import RansacConfig, ransac_umeyama, umeyama


def random_transform(rng, scale=(0.5, 2.0)):
    return SimilarityTransform(random_rotation(rng), rng.normal(size=3),
                               float(rng.uniform(*scale)))


class TestUmeyama:
    def test_identity(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        tf = umeyama(pts, pts)
        np.testing.assert_allclose(tf.r, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(tf.t, 0.0, atol=1e-12)
        assert tf.s == pytest.approx(1.0)

    def test_pure_translation(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        tf = umeyama(pts, pts + np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(tf.r, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(tf.t, [1, 2, 3], atol=1e-12)
        assert tf.s == pytest.approx(1.0)

    def test_constructed_similarity_recovered(self):
        rng = np.random.default_rng(0)
        src = rng.normal(size=(50, 3))
        gt = SimilarityTransform(rot_z(90.0), [0.1, 0.0, -0.2], 2.0)
        tf = umeyama(src, gt.apply(src))
        np.testing.assert_allclose(tf.r, gt.r, atol=1e-9)
        np.testing.assert_allclose(tf.t, gt.t, atol=1e-9)
        assert tf.s == pytest.approx(2.0, abs=1e-9)

    def test_too_few_points(self):
        with pytest.raises(ValidationError):
            umeyama(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 0.0, 0.0])
        with pytest.raises(DegenerateGeometryError):
            umeyama(line, line)

    def test_left_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            src = rng.normal(size=(30, 3))
            base = random_transform(rng)
            g = random_transform(rng)
            est = umeyama(src, base.apply(src))
            est_g = umeyama(src, g.apply(base.apply(src)))
            composed = g.compose(est)
            np.testing.assert_allclose(est_g.r, composed.r, atol=1e-8)
            np.testing.assert_allclose(est_g.t, composed.t, atol=1e-8)
            assert est_g.s == pytest.approx(composed.s, rel=1e-8)

    def test_local_optimality_spot_check(self):
        rng = np.random.default_rng(2)
        src = rng.normal(size=(40, 3))
        dst = random_transform(rng).apply(src) + rng.normal(scale=0.01, size=(40, 3))
        tf = umeyama(src, dst)

        def objective(r, t, s):
            return 0.5 * np.sum((dst - (s * (src @ r.T) + t)) ** 2)

        best = objective(tf.r, tf.t, tf.s)
        from catpose.geometry import axis_angle_to_matrix

        for _ in range(1000):
            dr = axis_angle_to_matrix(rng.normal(scale=0.02, size=3))
            val = objective(dr @ tf.r, tf.t + rng.normal(scale=0.003, size=3),
                            tf.s * float(np.exp(rng.normal(scale=0.01))))
            assert val >= best - 1e-12


class TestRansac:
    def make_instance(self, rng, n=100, outlier_rate=0.4, noise=0.001):
        src = rng.uniform(-0.2, 0.2, size=(n, 3))
        gt = random_transform(rng, scale=(0.8, 1.5))
        dst = gt.apply(src) + rng.normal(scale=noise, size=(n, 3))
        n_out = int(outlier_rate * n)
        out_idx = rng.choice(n, size=n_out, replace=False)
        lo = dst.min(axis=0)
        hi = dst.max(axis=0)
        dst[out_idx] = lo + rng.random((n_out, 3)) * (hi - lo)
        return src, dst, gt, out_idx

    def test_zero_outliers_recovers_exactly(self):
        rng = np.random.default_rng(3)
        src = rng.normal(size=(60, 3))
        gt = random_transform(rng)
        res = ransac_umeyama(src, gt.apply(src), RansacConfig(seed=1))
        assert res.inliers.all()
        np.testing.assert_allclose(res.transform.r, gt.r, atol=1e-9)
        np.testing.assert_allclose(res.transform.t, gt.t, atol=1e-9)

    def test_forty_percent_outliers(self):
        rng = np.random.default_rng(4)
        hits = 0
        for trial in range(100):
            src, dst, gt, _ = self.make_instance(rng)
            res = ransac_umeyama(src, dst, RansacConfig(seed=trial))
            rot_err = rotation_angle_stable_deg(res.transform.r, gt.r)
            trans_err = np.linalg.norm(res.transform.t - gt.t)
            if rot_err < 1.0 and trans_err < 0.005:
                hits += 1
        assert hits >= 95

    def test_deterministic_per_seed(self):
        rng = np.random.default_rng(5)
        src, dst, _, _ = self.make_instance(rng)
        a = ransac_umeyama(src, dst, RansacConfig(seed=42))
        b = ransac_umeyama(src, dst, RansacConfig(seed=42))
        assert a.transform.r.tobytes() == b.transform.r.tobytes()
        assert a.transform.t.tobytes() == b.transform.t.tobytes()
        assert a.transform.s == b.transform.s
        assert np.array_equal(a.inliers, b.inliers)

    def test_fewer_points_than_sample_size(self):
        with pytest.raises(ValidationError):
            ransac_umeyama(np.zeros((3, 3)), np.zeros((3, 3)),
                           RansacConfig(sample_size=4))

    def test_no_consensus(self):
        rng = np.random.default_rng(6)
        src = rng.normal(size=(30, 3))
        dst = rng.normal(size=(30, 3)) * 5.0
        cfg = RansacConfig(seed=0, max_iters=50, inlier_threshold_rel=1e-6)
        with pytest.raises(NoConsensusError):
            ransac_umeyama(src, dst, cfg)

    def test_inlier_count_at_least_sample_size(self):
        rng = np.random.default_rng(7)
        src, dst, _, _ = self.make_instance(rng, outlier_rate=0.5)
        res = ransac_umeyama(src, dst, RansacConfig(seed=0))
        assert res.inlier_count >= 4
