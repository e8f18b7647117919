import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from catpose.errors import FormatError, ValidationError
from catpose.tensorio import (CombineWeights, FeatureMap, combine_features,
                              joint_pca, normalize_rows, pca_reduce_pair,
                              read_feature_map, read_tensor, write_feature_map,
                              write_tensor)


def make_map(values, patch=1, tag="t"):
    values = np.asarray(values, dtype=np.float32)
    return FeatureMap(values=values, patch_size_px=patch,
                      image_w_px=values.shape[1] * patch,
                      image_h_px=values.shape[0] * patch, source_tag=tag)


class TestTensorFile:
    def test_known_payload_roundtrip(self, tmp_path):
        path = tmp_path / "t.uftn"
        write_tensor(np.array([[1, 2], [3, 4]], dtype=np.float32), path)
        back = read_tensor(path)
        assert back.shape == (2, 2)
        assert back.tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad.uftn"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        with pytest.raises(FormatError) as e:
            read_tensor(path)
        assert e.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.uftn"
        write_tensor(np.ones((3, 3), dtype=np.float32), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError):
            read_tensor(path)

    def test_dimension_overflow(self, tmp_path):
        import struct

        path = tmp_path / "t.uftn"
        path.write_bytes(b"UFTN" + struct.pack("<II", 1, 3)
                         + struct.pack("<3I", 70000, 70000, 70000))
        with pytest.raises(FormatError, match="overflow"):
            read_tensor(path)

    def test_non_finite_rejected_on_write(self, tmp_path):
        with pytest.raises(ValidationError):
            write_tensor(np.array([np.inf], dtype=np.float32), tmp_path / "x.uftn")

    def test_random_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(1000):
            ndim = rng.integers(1, 5)
            shape = tuple(int(d) for d in rng.integers(1, 5, size=ndim))
            arr = rng.normal(size=shape).astype(np.float32)
            path = tmp_path / "r.uftn"
            write_tensor(arr, path)
            back = read_tensor(path)
            assert back.shape == arr.shape
            assert back.tobytes() == arr.tobytes()

    @settings(max_examples=50, deadline=None)
    @given(data=st.lists(st.floats(-1e6, 1e6, width=32), min_size=1, max_size=64))
    def test_roundtrip_property(self, data):
        import tempfile

        with tempfile.TemporaryDirectory() as d:
            path = f"{d}/p.uftn"
            arr = np.array(data, dtype=np.float32)
            write_tensor(arr, path)
            assert read_tensor(path).tobytes() == arr.tobytes()


class TestFeatureMapFile:
    def test_roundtrip_with_sidecar(self, tmp_path):
        fm = make_map(np.arange(24).reshape(2, 3, 4), patch=14, tag="dinov2")
        path = tmp_path / "f.uftn"
        write_feature_map(fm, path)
        back = read_feature_map(path)
        assert back.source_tag == "dinov2"
        assert back.patch_size_px == 14
        assert np.array_equal(back.values, fm.values)

    def test_missing_sidecar(self, tmp_path):
        fm = make_map(np.ones((2, 2, 3)))
        path = tmp_path / "f.uftn"
        write_feature_map(fm, path)
        (tmp_path / "f.json").unlink()
        with pytest.raises(ValidationError, match="sidecar"):
            read_feature_map(path)

    def test_grid_overflow_invariant(self):
        with pytest.raises(ValidationError):
            FeatureMap(values=np.ones((10, 2, 3), dtype=np.float32),
                       patch_size_px=14, image_w_px=28, image_h_px=28).validate()


class TestCombineFeatures:
    def test_hand_normalized_concat(self):
        a = make_map(np.array([[[3.0, 4.0]]]), tag="a")
        b = make_map(np.array([[[0.0, 5.0]]]), tag="b")
        out = combine_features([(a, 1.0), (b, 1.0)])
        assert out.channels == 4
        np.testing.assert_allclose(out.values[0, 0], [0.6, 0.8, 0.0, 1.0], atol=1e-7)

    def test_zero_weight_drops_source(self):
        rng = np.random.default_rng(0)
        maps = [make_map(rng.normal(size=(2, 2, c)), tag=t)
                for c, t in [(5, "dinov1"), (7, "dinov2"), (4, "sd")]]
        w = CombineWeights()  # 0, 0.7, 0.3
        out = combine_features([(m, w.weight_for(m.source_tag)) for m in maps])
        assert out.channels == 7 + 4
        assert "dinov1" not in out.source_tag

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        maps = [(make_map(rng.normal(size=(3, 4, 5)), tag="x"), 0.7),
                (make_map(rng.normal(size=(3, 4, 2)), tag="y"), 0.3)]
        out = combine_features(maps)
        for p in range(12):
            expected = []
            for fm, w in maps:
                v = fm.flat()[p].astype(np.float64)
                n = np.sqrt(sum(float(x) * float(x) for x in v))
                expected.extend((w * x / n if n > 0 else 0.0) for x in v)
            got = out.flat()[p]
            assert np.abs(got - np.array(expected)).max() < 1e-6

    def test_zero_vector_stays_zero(self):
        a = make_map(np.zeros((1, 1, 3)))
        out = combine_features([(a, 2.0)])
        assert np.all(out.values == 0)

    def test_patch_norm_bounded_by_weight_sum(self):
        rng = np.random.default_rng(2)
        maps = [(make_map(rng.normal(size=(4, 4, 3)) + 0.5, tag="a"), 0.6),
                (make_map(rng.normal(size=(4, 4, 6)) + 0.5, tag="b"), 0.4)]
        out = combine_features(maps)
        norms = np.linalg.norm(out.flat(), axis=1)
        assert np.all(norms <= 1.0 + 1e-6)

    def test_grid_mismatch_rejected(self):
        a = make_map(np.ones((2, 2, 3)))
        b = make_map(np.ones((2, 3, 3)))
        with pytest.raises(ValidationError, match="grid"):
            combine_features([(a, 1.0), (b, 1.0)])

    def test_empty_retained_set_rejected(self):
        a = make_map(np.ones((2, 2, 3)))
        with pytest.raises(ValidationError):
            combine_features([(a, 0.0)])


class TestJointPca:
    def test_planar_data_exact(self):
        rng = np.random.default_rng(3)
        basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]  # 2-D subspace of R^6
        coeff_a = rng.normal(size=(30, 2))
        coeff_b = rng.normal(size=(20, 2))
        a = coeff_a @ basis.T
        b = coeff_b @ basis.T
        pa, pb, w = joint_pca(a, b, dims=2)
        recon = pa @ w
        assert np.abs(recon - a).max() < 1e-5

    def test_projected_variance_matches_eigen_oracle(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(40, 6))
        b = rng.normal(size=(25, 6))
        pa, pb, _ = joint_pca(a, b, dims=3)
        stacked = np.vstack([pa, pb])
        var = ((stacked - stacked.mean(0)) ** 2).sum() / stacked.shape[0]
        full = np.vstack([a, b])
        cov = np.cov(full.T, bias=True)
        eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
        assert abs(var - eig[:3].sum()) < 1e-6

    def test_full_dims_is_isometry_and_keeps_cosines(self):
        rng = np.random.default_rng(5)
        a = make_map(rng.normal(size=(3, 3, 5)))
        b = make_map(rng.normal(size=(2, 3, 5)))
        ra, rb = pca_reduce_pair(a, b, dims=5)
        fa, ga = a.flat().astype(np.float64), ra.flat().astype(np.float64)
        d_before = np.linalg.norm(fa[:, None] - fa[None], axis=2)
        d_after = np.linalg.norm(ga[:, None] - ga[None], axis=2)
        np.testing.assert_allclose(d_after, d_before, rtol=1e-5, atol=1e-6)
        ca = normalize_rows(fa) @ normalize_rows(fa).T
        cb = normalize_rows(ga) @ normalize_rows(ga).T
        np.testing.assert_allclose(cb, ca, atol=1e-5)

    def test_rank_deficient_shrinks_output(self):
        rng = np.random.default_rng(6)
        line = rng.normal(size=(20, 1)) @ rng.normal(size=(1, 8))
        a = make_map(line[:10].reshape(2, 5, 8))
        b = make_map(line[10:].reshape(2, 5, 8))
        ra, rb = pca_reduce_pair(a, b, dims=4)
        assert ra.channels < 4
        assert ra.channels == rb.channels

    def test_dims_exceeding_channels_rejected(self):
        a = make_map(np.random.default_rng(0).normal(size=(2, 2, 3)))
        with pytest.raises(ValidationError):
            pca_reduce_pair(a, a, dims=4)

    def test_reduction_to_64(self):
        rng = np.random.default_rng(7)
        a = make_map(rng.normal(size=(12, 12, 128)))
        b = make_map(rng.normal(size=(12, 12, 128)))
        ra, rb = pca_reduce_pair(a, b, dims=64)
        assert ra.channels == 64 and rb.channels == 64
