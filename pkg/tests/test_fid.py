import numpy as np
import pytest

from mraug import fid as F
from mraug.errors import FeatureError, MatrixError
from mraug.nncore import save_checkpoint


def scalar(m, c, n=100, tap=64):
    return F.FeatureStats(np.array([float(m)]), np.array([[float(c)]]), n, tap)


def random_psd(rng, d, rank=None):
    a = rng.standard_normal((d, rank or d))
    return a @ a.T


@pytest.fixture(scope="module")
def extractor():
    return F.FeatureExtractor(seed=0)


class TestMatrixSqrt:
    def test_identity(self):
        assert np.allclose(F.matrix_sqrt(np.eye(5)), np.eye(5), atol=1e-12)

    def test_diag(self):
        assert np.allclose(F.matrix_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)

    def test_reconstruction(self, rng):
        for _ in range(20):
            a = random_psd(rng, 16)
            s = F.matrix_sqrt(a)
            assert np.linalg.norm(s @ s - a) < 1e-6
            assert np.allclose(s, s.T)

    def test_rank_deficient(self, rng):
        a = random_psd(rng, 10, rank=3)
        s = F.matrix_sqrt(a)
        assert np.linalg.norm(s @ s - a) < 1e-6

    def test_asymmetric(self):
        with pytest.raises(MatrixError):
            F.matrix_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_not_psd(self):
        with pytest.raises(MatrixError):
            F.matrix_sqrt(np.diag([1.0, -1.0]))

    def test_non_square(self):
        with pytest.raises(MatrixError):
            F.matrix_sqrt(np.zeros((2, 3)))


class TestFid:
    def test_mean_gap(self):
        assert F.fid(scalar(0, 1), scalar(3, 1)) == pytest.approx(9.0, abs=1e-9)

    def test_variance_pair(self):
        assert F.fid(scalar(0, 4), scalar(0, 1)) == pytest.approx(1.0, abs=1e-9)

    def test_self_zero(self, rng):
        c = random_psd(rng, 8)
        a = F.FeatureStats(rng.standard_normal(8), c, 100, 64)
        assert abs(F.fid(a, a)) < 1e-6

    def test_symmetric_and_positive(self, rng):
        a = F.FeatureStats(rng.standard_normal(6), random_psd(rng, 6), 50, 64)
        b = F.FeatureStats(rng.standard_normal(6), random_psd(rng, 6), 50, 64)
        assert F.fid(a, b) == pytest.approx(F.fid(b, a), rel=1e-8)
        assert F.fid(a, b) > 0

    def test_commuting_closed_form(self, rng):
        # diagonal covariances: sum (sqrt(a)-sqrt(b))^2 plus the mean gap
        da, db = rng.random(5) + 0.1, rng.random(5) + 0.1
        ma, mb = rng.standard_normal(5), rng.standard_normal(5)
        a = F.FeatureStats(ma, np.diag(da), 100, 64)
        b = F.FeatureStats(mb, np.diag(db), 100, 64)
        expected = np.sum((ma - mb) ** 2) + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)
        assert F.fid(a, b) == pytest.approx(expected, rel=1e-9)

    def test_tap_mismatch(self):
        with pytest.raises(FeatureError):
            F.fid(scalar(0, 1, tap=64), scalar(0, 1, tap=2048))

    def test_shrinkage_small_sample(self, rng):
        x = rng.standard_normal((3, 10))
        a = F.stats_from_features(x, 64)
        assert F.fid(a, a) == pytest.approx(0.0, abs=1e-6)


class TestFeatureStats:
    def test_two_pass_oracle(self, rng):
        x = rng.standard_normal((30, 7))
        st = F.stats_from_features(x, 64)
        mean = [sum(x[:, j]) / 30 for j in range(7)]
        cov = np.zeros((7, 7))
        for i in range(7):
            for j in range(7):
                cov[i, j] = sum((x[k, i] - mean[i]) * (x[k, j] - mean[j]) for k in range(30)) / 29
        assert np.abs(st.mean - mean).max() < 1e-10
        assert np.abs(st.cov - cov).max() < 1e-10

    def test_tap_lengths(self, extractor, rng):
        imgs = rng.random((3, 64, 64))
        feats = extractor.features(imgs)
        for t in F.TAPS:
            assert feats[t].shape == (3, t)

    def test_identical_images_zero_cov(self, extractor, rng):
        img = rng.random((64, 64))
        st = F.feature_stats(np.stack([img] * 4), extractor, tap=64)
        assert np.abs(st.cov).max() < 1e-10

    def test_too_few(self, extractor, rng):
        with pytest.raises(FeatureError):
            F.feature_stats(rng.random((1, 32, 32)), extractor, tap=64)

    def test_bad_tap(self, extractor, rng):
        with pytest.raises(FeatureError):
            F.feature_stats(rng.random((2, 32, 32)), extractor, tap=128)

    def test_deterministic_extractor(self, rng):
        imgs = rng.random((2, 32, 32))
        a = F.FeatureExtractor(seed=3).features(imgs)[2048]
        b = F.FeatureExtractor(seed=3).features(imgs)[2048]
        assert np.array_equal(a, b)

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        ex = F.FeatureExtractor(seed=5)
        path = save_checkpoint(tmp_path / "ex.ckpt", {"extractor": ex.params}, {})
        loaded = F.FeatureExtractor.from_checkpoint(path)
        imgs = rng.random((2, 32, 32))
        assert np.allclose(ex.features(imgs)[64], loaded.features(imgs)[64])

    def test_checkpoint_missing_set(self, tmp_path):
        ex = F.FeatureExtractor(seed=5)
        path = save_checkpoint(tmp_path / "x.ckpt", {"other": ex.params}, {})
        with pytest.raises(FeatureError):
            F.FeatureExtractor.from_checkpoint(path)

    def test_fid_table(self, extractor, rng):
        ref = rng.random((4, 32, 32))
        table = F.fid_table({"same": ref, "dark": ref * 0.2}, ref, extractor)
        assert set(table["same"]) == set(F.TAPS)
        assert all(abs(v) < 1e-6 for v in table["same"].values())
        assert all(v > 0 for v in table["dark"].values())
