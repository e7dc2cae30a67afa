import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raprec.adversary import (AdversaryConfig, evaluate_attack, featurize, featurize_many,
                              predict_proba, train_adversary, write_attack_results)
from raprec.dataio import AttributeTable, LabelAccessError

FAST = AdversaryConfig(hidden=16, epochs=30, lr=0.01)


class TestFeaturize:
    def test_empty(self):
        np.testing.assert_array_equal(featurize([], 4), np.zeros(4))

    def test_endpoints(self):
        x = featurize([0, 6], 7)
        assert x.sum() == 2 and x[0] == 1 and x[6] == 1

    @given(st.sets(st.integers(0, 49)))
    def test_popcount(self, items):
        assert featurize(items, 50).sum() == len(items)

    @pytest.mark.parametrize("bad", [[-1], [5]])
    def test_out_of_range(self, bad):
        with pytest.raises(IndexError):
            featurize(bad, 5)

    def test_many_shape(self):
        assert featurize_many([[1], [2, 3]], 6).shape == (2, 6)
        assert featurize_many([], 6).shape == (0, 6)


def separable(n=60, M=10, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, M)) < 0.3).astype(float)
    y = rng.integers(0, 2, n)
    X[:, 0] = y
    return X, y


class TestTraining:
    def test_separable_toy(self):
        X, y = separable()
        params = train_adversary(X, y, 2, seed=0, cfg=FAST)
        assert np.mean(predict_proba(params, X).argmax(1) == y) >= 0.99

    def test_constant_labels(self):
        X, _ = separable()
        params = train_adversary(X, np.full(len(X), 1), 3, seed=0, cfg=FAST)
        assert predict_proba(params, X)[:, 1].min() > 0.9

    def test_deterministic(self):
        X, y = separable()
        a = train_adversary(X, y, 2, seed=4, cfg=FAST)
        b = train_adversary(X, y, 2, seed=4, cfg=FAST)
        assert a.checksum() == b.checksum()

    def test_empty(self):
        with pytest.raises(ValueError):
            train_adversary(np.zeros((0, 3)), np.zeros(0, int), 2)

    def test_auc_on_held_out(self):
        X, y = separable(n=200)
        params = train_adversary(X[:150], y[:150], 2, seed=0, cfg=FAST)
        assert evaluate_attack(params, X[150:], y[150:]) > 0.95

    def test_single_class_test_set(self):
        X, y = separable()
        params = train_adversary(X, y, 2, seed=0, cfg=FAST)
        with pytest.raises(ValueError):
            evaluate_attack(params, X[:5], np.zeros(5, int))

    def test_training_reads_only_public_labels(self):
        attrs = AttributeTable(np.array([0, 1, 0, 1]), np.zeros(4, int), np.zeros(4, int))
        public = attrs.restricted([0, 1])
        X = np.eye(4)
        params = train_adversary(X[:2], public.labels("gender", [0, 1]), 2, cfg=FAST)
        assert params is not None
        with pytest.raises(LabelAccessError):
            public.labels("gender", [2, 3])


def test_results_json(tmp_path):
    write_attack_results(tmp_path / "a.json", {"gender": 0.7, "occupation": 0.6}, 189, 3)
    doc = json.loads((tmp_path / "a.json").read_text())
    assert doc["gender"] == {"auc": 0.7, "scores_shape": [189, 2], "seed": 3}
    assert doc["occupation"]["scores_shape"] == [189, 21]
