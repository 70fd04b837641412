import numpy as np
import pytest

from boxprompt.aggregation import (
    FeatureAggregator,
    ct_loss,
    ct_posteriors,
    nearest_prototype_distance,
)
from boxprompt.exceptions import ValidationError

E = np.e


def orthonormal_pair(dim=4):
    protos = np.zeros((2, dim))
    protos[0, 0] = 1.0
    protos[1, 1] = 1.0
    return protos


class TestPosteriors:
    def test_single_pixel_on_prototype(self):
        protos = orthonormal_pair()
        feats = np.zeros((1, 1, 4))
        feats[0, 0, 0] = 1.0
        p2c, c2p = ct_posteriors(feats, protos, kappa=1.0)
        assert p2c[0, 0] == pytest.approx([E / (E + 1), 1 / (E + 1)], abs=1e-4)
        # One pixel in total: each class's softmax over pixels is exactly 1.
        assert np.all(c2p == 1.0)

    def test_large_temperature_flattens(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(2, 5, 4))
        protos = rng.normal(size=(3, 4))
        p2c, c2p = ct_posteriors(feats, protos, kappa=1e6)
        assert np.allclose(p2c, 1 / 3, atol=1e-4)
        assert np.allclose(c2p, 1 / 10, atol=1e-4)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            feats = rng.normal(size=(2, 8, 6))
            protos = rng.normal(size=(4, 6))
            p2c, c2p = ct_posteriors(feats, protos, kappa=0.7)
            assert np.allclose(p2c.sum(axis=2), 1.0, atol=1e-5)
            assert np.allclose(c2p.sum(axis=1), 1.0, atol=1e-5)

    def test_bad_temperature(self):
        with pytest.raises(ValidationError):
            ct_posteriors(np.ones((1, 1, 2)), np.eye(2), kappa=0.0)

    def test_dim_mismatch(self):
        with pytest.raises(ValidationError):
            ct_posteriors(np.ones((1, 1, 3)), np.eye(2), kappa=1.0)


class TestLoss:
    def test_single_pixel_hand_value(self):
        protos = orthonormal_pair()
        feats = np.zeros((1, 1, 4))
        feats[0, 0, 0] = 1.0
        loss, _ = ct_loss(feats, protos, kappa=1.0)
        first_term = 0.0 * (E / (E + 1)) + 1.0 * (1 / (E + 1))
        second_term = (0.0 + 1.0) / 2
        assert loss == pytest.approx(first_term + second_term, abs=1e-4)

    def test_features_on_prototypes_small_temperature(self):
        protos = orthonormal_pair()
        feats = np.zeros((1, 2, 4))
        feats[0, 0] = protos[0]
        feats[0, 1] = protos[1]
        loss, _ = ct_loss(feats, protos, kappa=1e-3)
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            feats = rng.normal(size=(2, 6, 5))
            protos = rng.normal(size=(3, 5))
            loss, _ = ct_loss(feats, protos, kappa=float(rng.uniform(0.2, 5)))
            assert loss >= 0.0

    def test_zero_norm_feature_rejected(self):
        feats = np.zeros((1, 1, 4))
        with pytest.raises(ValidationError, match="zero-norm"):
            ct_loss(feats, orthonormal_pair(), kappa=1.0)

    @pytest.mark.parametrize("normalize", [False, True])
    def test_gradient_matches_finite_differences(self, normalize):
        rng = np.random.default_rng(11)
        for trial in range(20):
            feats = rng.normal(size=(2, 16, 8))
            protos = rng.normal(size=(3, 8))
            kappa = float(rng.uniform(0.3, 2.0))
            _, grad = ct_loss(feats, protos, kappa, normalize)
            eps = 1e-6
            for b, n, d in rng.integers(0, [2, 16, 8], size=(4, 3)):
                plus = feats.copy()
                plus[b, n, d] += eps
                minus = feats.copy()
                minus[b, n, d] -= eps
                fd = (ct_loss(plus, protos, kappa, normalize)[0]
                      - ct_loss(minus, protos, kappa, normalize)[0]) / (2 * eps)
                assert grad[b, n, d] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def two_gaussian_data(n_per_cluster=100, seed=0):
    rng = np.random.default_rng(seed)
    first = rng.normal(loc=(2.0, 0.0), scale=0.3, size=(n_per_cluster, 2))
    second = rng.normal(loc=(0.0, 2.0), scale=0.3, size=(n_per_cluster, 2))
    return np.concatenate([first, second])[None, :, :]  # one image of pixels


class TestAggregator:
    def test_loss_decreases_and_no_collapse(self):
        data = two_gaussian_data()
        protos = orthonormal_pair(dim=4)
        agg = FeatureAggregator(prototypes=protos, kappa=1.0, learning_rate=1e-2,
                                weight_decay=0.0, epochs=200, batch_size=16,
                                random_state=0)
        agg.fit(data)
        assert agg.loss_curve_[-1] < agg.loss_curve_[0]
        feats = agg.transform(data)
        p2c, _ = ct_posteriors(feats, protos, kappa=1.0)
        assignments = p2c.reshape(-1, 2).argmax(axis=1)
        # Anti-collapse: both prototypes keep at least one assigned pixel.
        assert (assignments == 0).any() and (assignments == 1).any()

    def test_nearest_prototype_distance_shrinks(self):
        data = two_gaussian_data()
        protos = orthonormal_pair(dim=4)
        kwargs = dict(prototypes=protos, kappa=1.0, learning_rate=1e-2,
                      weight_decay=0.0, batch_size=16, random_state=0)
        initial = FeatureAggregator(epochs=0, **kwargs).fit(data)
        trained = FeatureAggregator(epochs=200, **kwargs).fit(data)
        before = nearest_prototype_distance(initial.transform(data), protos).mean()
        after = nearest_prototype_distance(trained.transform(data), protos).mean()
        assert after < before

    def test_zero_learning_rate_keeps_loss_constant(self):
        data = two_gaussian_data()
        agg = FeatureAggregator(prototypes=orthonormal_pair(), learning_rate=0.0,
                                weight_decay=0.0, epochs=5, batch_size=8,
                                random_state=1)
        agg.fit(data)
        assert len(set(np.round(agg.loss_curve_, 12))) == 1

    def test_sklearn_params_roundtrip(self):
        agg = FeatureAggregator(kappa=10.0, epochs=1)
        params = agg.get_params()
        assert params["kappa"] == 10.0
        clone = FeatureAggregator(**params)
        assert clone.get_params() == params

    def test_extractor_and_loss_curve_serialization(self, tmp_path):
        from boxprompt.aggregation import LinearPixelExtractor, write_loss_curve

        data = two_gaussian_data(n_per_cluster=20)
        agg = FeatureAggregator(prototypes=orthonormal_pair(), epochs=3,
                                learning_rate=1e-2, batch_size=4,
                                random_state=2).fit(data)
        model_path = tmp_path / "extractor.dfgt"
        agg.extractor_.save(model_path)
        loaded = LinearPixelExtractor.load(model_path)
        assert np.allclose(loaded(data), agg.transform(data), atol=1e-6)

        curve_path = tmp_path / "curve.csv"
        write_loss_curve(agg.loss_curve_, curve_path)
        lines = curve_path.read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == len(agg.loss_curve_) + 1
