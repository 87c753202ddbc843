import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedfair import FairThresholdClassifier


def make_xy(rng, n=900, clients=3):
    a = rng.integers(0, 2, n)
    client = rng.integers(0, clients, n)
    y = rng.integers(0, 2, n)
    score = np.clip(rng.normal(0.35 + 0.3 * y - 0.05 * a, 0.15, n), 0.001, 0.999)
    return np.column_stack([score, a, client]), y


class TestSklearnContract:
    def test_get_set_params_and_clone(self):
        clf = FairThresholdClassifier(notion="ddp", alpha=0.2, beta=0.9, seed=4)
        params = clf.get_params()
        assert params["notion"] == "ddp" and params["alpha"] == 0.2
        other = clone(clf)
        assert other.get_params() == params
        other.set_params(alpha=0.3)
        assert other.alpha == 0.3 and clf.alpha == 0.2

    def test_not_fitted(self, rng):
        X, _ = make_xy(rng)
        with pytest.raises(NotFittedError):
            FairThresholdClassifier().predict(X)

    def test_fit_returns_self_and_predicts(self, rng):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(alpha=0.2, beta=0.9, mc_samples=300, seed=1)
        assert clf.fit(X, y) is clf
        pred = clf.predict(X)
        assert set(np.unique(pred)) <= {0, 1}
        assert clf.certified_
        t = clf.thresholds_
        manual = (X[:, 0] > np.array([t[int(g)] for g in X[:, 1]])).astype(int)
        np.testing.assert_array_equal(pred, manual)
        assert (pred == y).mean() > 0.7

    def test_two_column_input_single_client(self, rng):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(alpha=0.25, beta=0.85, mc_samples=300, seed=2)
        clf.fit(X[:, :2], y)
        assert clf.certified_

    def test_decision_function_sign_matches_predict(self, rng):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(alpha=0.2, beta=0.9, mc_samples=300, seed=3).fit(X, y)
        df = clf.decision_function(X)
        np.testing.assert_array_equal(df > 0, clf.predict(X) == 1)


class TestValidation:
    def test_score_range(self, rng):
        X, y = make_xy(rng)
        X[0, 0] = 1.5
        with pytest.raises(ValueError):
            FairThresholdClassifier().fit(X, y)

    def test_column_count(self, rng):
        with pytest.raises(ValueError):
            FairThresholdClassifier().fit(rng.random((10, 4)), np.zeros(10))

    def test_nonbinary_y(self, rng):
        X, y = make_xy(rng)
        with pytest.raises(ValueError):
            FairThresholdClassifier().fit(X, y + 1)

    def test_unseen_group_in_predict(self, rng):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(alpha=0.3, beta=0.8, mc_samples=200).fit(X, y)
        bad = X.copy()
        bad[0, 1] = 5
        with pytest.raises(ValueError):
            clf.predict(bad)


class TestFallback:
    def test_uncertifiable_uses_fallback(self, rng):
        X, y = make_xy(rng, n=40)
        clf = FairThresholdClassifier(alpha=0.02, beta=0.99, mc_samples=300,
                                      fallback_threshold=0.5).fit(X, y)
        assert not clf.certified_
        assert clf.candidate_count_ == 0
        assert set(clf.thresholds_.values()) == {0.5}
        clf.predict(X)


class TestVariants:
    @pytest.mark.parametrize("notion,alpha", [
        ("deoo", 0.2), ("deo", (0.25, 0.25)), ("ddp", 0.25),
        ("dpe", 0.25), ("dea", 0.25),
    ])
    def test_notions_fit(self, rng, notion, alpha):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(notion=notion, alpha=alpha, beta=0.85,
                                      mc_samples=250, seed=6).fit(X, y)
        assert clf.certified_
        assert set(clf.thresholds_) == {0, 1}

    def test_deoom_three_groups(self, rng):
        n = 1200
        a = rng.integers(0, 3, n)
        client = rng.integers(0, 2, n)
        y = rng.integers(0, 2, n)
        score = np.clip(rng.normal(0.35 + 0.3 * y - 0.03 * a, 0.15, n), 0.001, 0.999)
        X = np.column_stack([score, a, client])
        clf = FairThresholdClassifier(notion="deoom", alpha=0.3, beta=0.85,
                                      mc_samples=250, seed=7).fit(X, y)
        assert clf.certified_
        assert set(clf.thresholds_) == {0, 1, 2}

    def test_mu_restricted_search(self, rng):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(alpha=0.25, beta=0.8, mc_samples=250,
                                      search="mu_restricted", seed=8).fit(X, y)
        assert clf.certified_

    def test_sketch_mode(self, rng):
        X, y = make_xy(rng)
        clf = FairThresholdClassifier(alpha=0.3, beta=0.85, mc_samples=250,
                                      mode="sketch", seed=9).fit(X, y)
        assert clf.certified_
