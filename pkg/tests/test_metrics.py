"""RID, IS, FID, RMSE and the probe classifier."""

import numpy as np
import pytest
from scipy import linalg

from pagan.data import shapes_dataset
from pagan.metrics import (LinearAutoencoder, MetricReport, ProbeClassifier, ProbeConfig,
                           derangement, evaluate, fid,
                           inception_score_from_posteriors, rid, rid_from_posteriors, rmse,
                           sequential_splits, train_probe_classifier)


def one_hot(labels, k):
    return np.eye(k)[labels]


class TestSplits:
    def test_remainder_joins_last(self):
        assert sequential_splits(10, 3) == [(0, 3), (3, 6), (6, 10)]

    def test_too_many(self):
        with pytest.raises(ValueError):
            sequential_splits(3, 4)


class TestRID:
    def test_identical(self, rng):
        p = rng.dirichlet(np.ones(10), size=200)
        assert abs(rid_from_posteriors(p, p)[0] - 1.0) < 1e-9

    def test_identical_below_clamp(self):
        p = np.array([[1 - 2e-9, 1e-9, 1e-9]] * 10)
        assert abs(rid_from_posteriors(p, p)[0] - 1.0) < 1e-12

    def test_half_split(self):
        # KL([1, 0] || [.5, .5]) = ln 2, so RID = 2 up to the probability clamp
        p = np.tile([1.0, 0.0], (20, 1))
        q = np.full((20, 2), 0.5)
        mean, std = rid_from_posteriors(p, q, splits=2)
        assert abs(mean - 2.0) < 1e-5 and std < 1e-12

    def test_exp_taken_per_split(self):
        p = np.tile([1.0, 0.0], (4, 1))
        q = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
        mean, std = rid_from_posteriors(p, q, splits=2)
        assert abs(mean - 1.5) < 1e-5 and abs(std - 0.5) < 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rid_from_posteriors(np.ones((3, 2)) / 2, np.ones((4, 2)) / 2)

    def test_classifier_wrapper(self):
        class Echo:
            def predict_proba(self, x):
                return np.asarray(x)

        p = np.tile([0.2, 0.8], (10, 1))
        assert abs(rid(Echo(), p, p)[0] - 1.0) < 1e-12
        with pytest.raises(ValueError):
            rid(Echo(), p, p[:5])


class TestInceptionScore:
    def test_uniform(self):
        assert abs(inception_score_from_posteriors(np.full((1000, 10), 0.1))[0] - 1.0) < 1e-9

    @pytest.mark.parametrize("k", [2, 5, 10])
    def test_one_hot_classes(self, k):
        labels = np.tile(np.arange(k), 100)
        assert abs(inception_score_from_posteriors(one_hot(labels, k))[0] - k) < 1e-6

    def test_between_bounds(self, rng):
        v = inception_score_from_posteriors(rng.dirichlet(np.ones(4), size=400))[0]
        assert 1.0 <= v <= 4.0

    def test_empty(self):
        with pytest.raises(ValueError):
            inception_score_from_posteriors(np.zeros((0, 3)))


class TestFID:
    def test_self(self, rng):
        a = rng.standard_normal((2000, 8))
        assert abs(fid(a, a)) < 1e-6

    def test_shift(self, rng):
        a = rng.standard_normal((10_000, 4))
        d = np.array([0.3, -1.2, 0.0, 2.0])
        assert abs(fid(a, a + d) - d @ d) < 1e-3

    def test_against_scipy(self, rng):
        a = rng.standard_normal((500, 5)) @ rng.standard_normal((5, 5))
        b = rng.standard_normal((600, 5)) @ rng.standard_normal((5, 5)) + 0.5
        ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
        ref = (np.sum((a.mean(0) - b.mean(0)) ** 2)
               + np.trace(ca + cb - 2 * linalg.sqrtm(ca @ cb).real))
        assert abs(fid(a, b) - ref) < 1e-4 * max(1.0, ref)

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            fid(rng.standard_normal((3, 4)), rng.standard_normal((10, 4)))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            fid(rng.standard_normal((10, 3)), rng.standard_normal((10, 4)))


class TestRMSE:
    def test_value(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5))

    def test_shape(self):
        with pytest.raises(ValueError):
            rmse(np.zeros(2), np.zeros(3))


class TestProbe:
    def test_outputs(self, rng):
        probe = ProbeClassifier((1, 16, 16), 4, rng)
        x = rng.uniform(-1, 1, (7, 1, 16, 16))
        p = probe.predict_proba(x)
        assert p.shape == (7, 4) and np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)
        assert probe.features(x).shape == (7, 64)

    def test_needs_two_classes(self, rng):
        with pytest.raises(ValueError):
            ProbeClassifier((1, 8, 8), 1, rng)

    def test_learns_shapes(self):
        ds = shapes_dataset(3000, 16, np.random.default_rng(0))
        probe = train_probe_classifier(ds.items, ds.labels, ProbeConfig(epochs=4))
        assert probe.heldout_accuracy > 0.8

    def test_evaluate_and_report(self, tmp_path):
        ds = shapes_dataset(400, 16, np.random.default_rng(1))
        probe = train_probe_classifier(ds.items, ds.labels, ProbeConfig(epochs=1))
        report = evaluate(probe, ds.items[:100], ds.items[:100], ds.items[100:200])
        assert abs(report.rid_mean - 1.0) < 1e-9 and report.rmse == 0.0
        report.write(tmp_path / "m.txt")
        assert MetricReport.read(tmp_path / "m.txt") == report


class TestBaselines:
    def test_linear_autoencoder_exact_in_span(self, rng):
        basis = rng.standard_normal((2, 12))
        images = (rng.standard_normal((50, 2)) @ basis).reshape(50, 1, 3, 4)
        ae = LinearAutoencoder(images, 2)
        np.testing.assert_allclose(ae.reconstruct(images), images, atol=1e-10)

    def test_linear_autoencoder_rank(self, rng):
        with pytest.raises(ValueError):
            LinearAutoencoder(rng.standard_normal((5, 1, 2, 2)), 6)

    def test_derangement(self, rng):
        for n in (2, 3, 50):
            perm = derangement(n, rng)
            assert sorted(perm) == list(range(n)) and np.all(perm != np.arange(n))
        with pytest.raises(ValueError):
            derangement(1, rng)
