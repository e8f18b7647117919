import math

import numpy as np
import pytest

from catpose.errors import ValidationError
from catpose.matching import (CorrespondenceSet, cyclical_distances,
                              foreground_patches, score_matrix,
                              select_correspondences, view_confidence)
from catpose.tensorio import FeatureMap


def make_map(values, patch=1):
    values = np.asarray(values, dtype=np.float32)
    return FeatureMap(values=values, patch_size_px=patch,
                      image_w_px=values.shape[1] * patch,
                      image_h_px=values.shape[0] * patch)


def score_oracle(ft, fr):
    """Per-entry cosine with plain python arithmetic."""
    a = ft.flat().astype(np.float64)
    b = fr.flat().astype(np.float64)
    out = np.zeros((a.shape[0], b.shape[0]))
    for p in range(a.shape[0]):
        na = math.sqrt(sum(x * x for x in a[p]))
        for q in range(b.shape[0]):
            nb = math.sqrt(sum(x * x for x in b[q]))
            if na == 0.0 or nb == 0.0:
                out[p, q] = 0.0
            else:
                out[p, q] = sum(x * y for x, y in zip(a[p], b[q])) / (na * nb)
    return out


def cyc_oracle(values, grid_w):
    n_t, n_r = values.shape
    d = np.zeros(n_t)
    for p in range(n_t):
        q_star = 0
        for q in range(n_r):
            if values[p, q] > values[p, q_star]:
                q_star = q
        p_prime = 0
        for pp in range(n_t):
            if values[pp, q_star] > values[p_prime, q_star]:
                p_prime = pp
        dr = p // grid_w - p_prime // grid_w
        dc = p % grid_w - p_prime % grid_w
        d[p] = math.sqrt(dr * dr + dc * dc)
    return d


def select_oracle(values, d, m, valid=None):
    n_t = values.shape[0]
    rows = []
    for p in range(n_t):
        if valid is not None and not valid[p]:
            continue
        q = int(np.argmax(values[p]))
        rows.append((float(d[p]), -float(values[p, q]), p, q))
    rows.sort()
    rows = rows[:m]
    return ([r[2] for r in rows], [r[3] for r in rows],
            [-r[1] for r in rows], [r[0] for r in rows])


class TestScoreMatrix:
    def test_orthonormal_basis_identity(self):
        basis = np.eye(4, dtype=np.float32).reshape(2, 2, 4)
        s = score_matrix(make_map(basis), make_map(basis))
        np.testing.assert_allclose(s.values, np.eye(4), atol=1e-7)

    def test_hand_cosine(self):
        ft = make_map(np.array([[[1.0, 0.0]]]))
        fr = make_map(np.array([[[1.0, 1.0]]]) / np.sqrt(2))
        s = score_matrix(ft, fr)
        assert s.values[0, 0] == pytest.approx(np.sqrt(2) / 2, abs=1e-7)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        ft = make_map(rng.normal(size=(4, 5, 7)))
        fr = make_map(rng.normal(size=(4, 6, 7)))
        s = score_matrix(ft, fr)
        np.testing.assert_allclose(s.values, score_oracle(ft, fr), atol=1e-6)

    def test_zero_vector_scores_zero(self):
        ft = make_map(np.array([[[0.0, 0.0], [1.0, 0.0]]]))
        fr = make_map(np.array([[[1.0, 1.0]]]))
        s = score_matrix(ft, fr)
        assert s.values[0, 0] == 0.0

    def test_channel_mismatch(self):
        with pytest.raises(ValidationError):
            score_matrix(make_map(np.ones((1, 1, 2))), make_map(np.ones((1, 1, 3))))


class TestCyclicalDistances:
    def test_identity_scores_zero(self):
        basis = np.eye(4, dtype=np.float32).reshape(2, 2, 4)
        s = score_matrix(make_map(basis), make_map(basis))
        np.testing.assert_array_equal(cyclical_distances(s), np.zeros(4))

    def test_hand_trace(self):
        # 1x2 target grid; p=1 -> q*=0 -> p'=0 -> distance 1
        from catpose.matching import ScoreMatrix

        s = ScoreMatrix(np.array([[0.9, 0.1], [0.8, 0.2]]), (1, 2), (1, 2))
        d = cyclical_distances(s)
        assert d[0] == 0.0
        assert d[1] == 1.0

    def test_matches_double_argmax_oracle_exactly(self):
        rng = np.random.default_rng(1)
        from catpose.matching import ScoreMatrix

        for _ in range(50):
            gh, gw = rng.integers(1, 7, size=2)
            rh, rw = rng.integers(1, 7, size=2)
            vals = np.clip(rng.normal(size=(gh * gw, rh * rw)), -1, 1)
            s = ScoreMatrix(vals, (int(gh), int(gw)), (int(rh), int(rw)))
            np.testing.assert_array_equal(cyclical_distances(s),
                                          cyc_oracle(vals, int(gw)))

    def test_reference_relabel_invariance(self):
        rng = np.random.default_rng(2)
        from catpose.matching import ScoreMatrix

        vals = rng.random((12, 10))
        s = ScoreMatrix(vals, (3, 4), (2, 5))
        d1 = cyclical_distances(s)
        perm = rng.permutation(10)
        s2 = ScoreMatrix(vals[:, perm], (3, 4), (2, 5))
        d2 = cyclical_distances(s2)
        np.testing.assert_array_equal(d1, d2)


class TestSelectCorrespondences:
    def test_identity_all_patches(self):
        basis = np.eye(4, dtype=np.float32).reshape(2, 2, 4)
        s = score_matrix(make_map(basis), make_map(basis))
        d = cyclical_distances(s)
        c = select_correspondences(s, d, 4)
        assert len(c) == 4
        np.testing.assert_array_equal(c.cyc, 0.0)
        np.testing.assert_array_equal(c.p, c.q)

    def test_m_one_takes_best_cycle(self):
        from catpose.matching import ScoreMatrix

        s = ScoreMatrix(np.array([[0.9, 0.1], [0.8, 0.2]]), (1, 2), (1, 2))
        d = cyclical_distances(s)
        c = select_correspondences(s, d, 1)
        assert c.p.tolist() == [0]
        assert c.q.tolist() == [0]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(3)
        from catpose.matching import ScoreMatrix

        for _ in range(50):
            gh, gw = rng.integers(1, 6, size=2)
            n_r = int(rng.integers(1, 30))
            vals = rng.random((gh * gw, n_r))
            s = ScoreMatrix(vals, (int(gh), int(gw)), (1, n_r))
            d = cyclical_distances(s)
            m = int(rng.integers(1, gh * gw + 1))
            valid = rng.random(gh * gw) > 0.3
            c = select_correspondences(s, d, m, valid_target=valid)
            op, oq, osim, ocyc = select_oracle(vals, d, m, valid)
            assert c.p.tolist() == op
            assert c.q.tolist() == oq
            np.testing.assert_array_equal(c.sim, osim)
            np.testing.assert_array_equal(c.cyc, ocyc)

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        from catpose.matching import ScoreMatrix

        vals = np.round(rng.random((16, 16)), 2)  # force sim/cyc ties
        s = ScoreMatrix(vals, (4, 4), (4, 4))
        d = cyclical_distances(s)
        a = select_correspondences(s, d, 8)
        b = select_correspondences(s, d, 8)
        assert a.p.tolist() == b.p.tolist()
        assert a.q.tolist() == b.q.tolist()

    def test_invalid_m(self):
        from catpose.matching import ScoreMatrix

        s = ScoreMatrix(np.ones((2, 2)) * 0.5, (1, 2), (1, 2))
        with pytest.raises(ValidationError):
            select_correspondences(s, np.zeros(2), 0)


class TestViewConfidence:
    def test_perfect(self):
        c = CorrespondenceSet(p=[0], q=[0], sim=[1.0], cyc=[0.0])
        assert view_confidence(c) == 1.0

    def test_mean(self):
        c = CorrespondenceSet(p=[0, 1], q=[0, 1], sim=[0.8, 0.6], cyc=[0, 0])
        assert view_confidence(c) == pytest.approx(0.7)

    def test_empty_is_worst(self):
        c = CorrespondenceSet(p=[], q=[], sim=[], cyc=[])
        assert view_confidence(c) == -1.0

    def test_random_mean_oracle(self):
        rng = np.random.default_rng(5)
        sims = rng.uniform(-1, 1, size=17)
        c = CorrespondenceSet(p=np.arange(17), q=np.arange(17), sim=sims,
                              cyc=np.zeros(17))
        assert view_confidence(c) == pytest.approx(float(sims.mean()))


class TestForegroundPatches:
    def test_half_coverage_threshold(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[:, :4] = True  # left half
        fm = make_map(np.zeros((2, 2, 1)), patch=4)
        keep = foreground_patches(mask, fm, min_frac=0.5)
        assert keep.tolist() == [True, False, True, False]

    def test_self_match_confidence_one(self):
        rng = np.random.default_rng(6)
        fm = make_map(rng.normal(size=(3, 3, 8)))
        s = score_matrix(fm, fm)
        d = cyclical_distances(s)
        c = select_correspondences(s, d, 9)
        np.testing.assert_array_equal(c.cyc, 0.0)
        assert view_confidence(c) == pytest.approx(1.0, abs=1e-6)
