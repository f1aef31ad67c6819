from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowclass import baselines, cascade
from flowclass.baselines import (
    KnnClassifier,
    TreeClassifier,
    gini,
    knn_fit,
    knn_neighbors,
    knn_predict,
    load_classifier,
    make_classifier,
    tree_fit,
    tree_predict,
)
from flowclass.cascade import CascadeConfig


def brute_knn(Xtr, ytr, q, k):
    """Stable full sort of exact distances, then a vote with lowest-label ties."""
    d = [float(np.sum((Xtr[i] - q) ** 2)) for i in range(len(Xtr))]
    order = sorted(range(len(d)), key=lambda i: (d[i], i))[:k]
    votes = {}
    for i in order:
        votes[int(ytr[i])] = votes.get(int(ytr[i]), 0) + 1
    top = max(votes.values())
    return min(lab for lab, c in votes.items() if c == top)


def brute_root_split(X, y):
    """Every (feature, midpoint) pair scored by weighted Gini from scratch."""
    labels = sorted(set(y.tolist()))
    n = len(y)

    def impurity(rows):
        if not rows:
            return 0.0
        return 1.0 - sum((sum(1 for r in rows if y[r] == c) / len(rows)) ** 2 for c in labels)

    best = None
    for j in range(X.shape[1]):
        vals = sorted(set(X[:, j].tolist()))
        for lo, hi in zip(vals, vals[1:]):
            thr = (lo + hi) / 2
            left = [r for r in range(n) if X[r, j] <= thr]
            right = [r for r in range(n) if X[r, j] > thr]
            score = (len(left) * impurity(left) + len(right) * impurity(right)) / n
            if best is None or score < best[2] - 1e-12:
                best = (j, thr, score)
    return best


# --------------------------------------------------------------------------- kNN

def test_knn_k1_returns_matching_point_label():
    rng = np.random.default_rng(0)
    X, y = rng.random((30, 4, 3)), rng.integers(1, 5, 30)
    model = knn_fit(X, y, k=1)
    assert knn_predict(model, X[7:8]).tolist() == [y[7]]
    assert np.array_equal(knn_predict(model, X), y)


def test_knn_k_equals_n_is_global_majority():
    rng = np.random.default_rng(1)
    X = rng.random((9, 2, 2))
    y = np.array([1, 2, 2, 3, 2, 1, 3, 2, 4])
    model = knn_fit(X, y, k=9)
    assert set(knn_predict(model, rng.random((15, 2, 2))).tolist()) == {2}


def test_knn_matches_exhaustive_scan():
    rng = np.random.default_rng(2)
    X, y = rng.random((200, 6, 6)), rng.integers(1, 5, 200)
    Q = rng.random((20, 6, 6))
    model = knn_fit(X, y, k=10)
    Xf = X.reshape(200, -1)
    want = [brute_knn(Xf, y, q.reshape(-1), 10) for q in Q]
    assert knn_predict(model, Q).tolist() == want


def test_knn_distance_ties_keep_training_order():
    X = np.array([[0.0], [1.0], [-1.0], [1.0], [-1.0]])
    model = knn_fit(X, np.array([1, 2, 3, 4, 5]), k=3)
    assert knn_neighbors(model, np.array([[0.0]])).tolist() == [[0, 1, 2]]


def test_knn_vote_tie_goes_to_lowest_label():
    X = np.array([[0.0], [0.1], [-0.1], [5.0]])
    model = knn_fit(X, np.array([3, 2, 3, 2]), k=4)
    assert knn_predict(model, np.array([[0.0]])).tolist() == [2]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_knn_neighbors_agree_with_scan_on_gridded_data(n, k, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 3, (n, 4)).astype(float)  # many exact ties
    k = min(k, n)
    model = knn_fit(X, np.ones(n, dtype=int), k)
    q = rng.integers(0, 3, (3, 4)).astype(float)
    for r, row in enumerate(knn_neighbors(model, q)):
        d = np.sum((X - q[r]) ** 2, axis=1)
        want = sorted(range(n), key=lambda i: (d[i], i))[:k]
        assert row.tolist() == want


def test_knn_k_out_of_range():
    with pytest.raises(ValueError):
        knn_fit(np.zeros((3, 2)), np.ones(3), k=4)
    with pytest.raises(ValueError):
        knn_fit(np.zeros((3, 2)), np.ones(3), k=0)


# --------------------------------------------------------------------------- tree

def test_single_class_gives_depth_zero_tree():
    model = tree_fit(np.random.default_rng(3).random((20, 3)), np.full(20, 4))
    assert model.depth() == 0
    assert set(tree_predict(model, np.random.default_rng(4).random((10, 3))).tolist()) == {4}


def test_perfect_split_on_feature_zero():
    rng = np.random.default_rng(5)
    X = rng.random((50, 3))
    y = np.where(X[:, 0] > 0.5, 2, 1)
    model = tree_fit(X, y)
    assert model.depth() == 1 and model.feature[0] == 0
    assert np.array_equal(tree_predict(model, X), y)


def test_root_split_matches_exhaustive_search():
    rng = np.random.default_rng(6)
    for _ in range(5):
        X = np.round(rng.random((100, 4)), 2)  # repeated values exercise distinct-value cuts
        y = rng.integers(1, 4, 100)
        model = tree_fit(X, y, max_depth=1)
        j, thr, score = brute_root_split(X, y)
        assert model.feature[0] == j
        assert model.threshold[0] == pytest.approx(thr, abs=1e-12)
        counts = model.counts[[model.left[0], model.right[0]]]
        got = (counts.sum(1) * gini(counts)).sum() / 100
        assert got == pytest.approx(score, abs=1e-12)


def test_training_accuracy_non_decreasing_in_depth():
    rng = np.random.default_rng(7)
    X, y = rng.random((300, 5)), rng.integers(1, 5, 300)
    accs = [np.mean(tree_predict(tree_fit(X, y, d), X) == y) for d in range(0, 13)]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert all(tree_fit(X, y, d).depth() <= d for d in (0, 3, 8))


def test_constant_features_leave_a_leaf():
    model = tree_fit(np.ones((6, 2)), np.array([1, 2, 1, 2, 1, 1]))
    assert model.depth() == 0
    assert tree_predict(model, np.ones((1, 2))).tolist() == [1]


def test_adjacent_float_threshold_separates():
    lo = 1.0
    hi = np.nextafter(lo, 2.0)
    X = np.array([[lo], [hi]])
    model = tree_fit(X, np.array([1, 2]))
    assert tree_predict(model, X).tolist() == [1, 2]


def test_gini_values():
    assert gini(np.array([5, 0])) == 0
    assert gini(np.array([2, 2])) == pytest.approx(0.5)
    assert gini(np.array([0, 0])) == 0


# --------------------------------------------------------------------------- neural ablations

def toy_set():
    X = np.empty((40, 6, 6))
    y = np.array([1 + i % 2 for i in range(40)])
    X[y == 1], X[y == 2] = 0.2, 0.8
    return X, y


def test_lstm_only_learns_toy_set():
    X, y = toy_set()
    clf = baselines.lstm_only(CascadeConfig(num_classes=2, epochs=50, early_stop_patience=0)).fit(X, y)
    assert np.mean(clf.predict(X) == y) >= 0.95


def test_cnn_only_zero_output_is_uniform():
    model = cascade.init_model(CascadeConfig(num_classes=4), "cnn")
    model.params["dense.W"][:] = 0
    np.testing.assert_array_equal(cascade.forward(model, np.zeros((2, 6, 6))), np.full((2, 4), 0.25))


@pytest.mark.parametrize("arch", ["lstm", "cnn"])
def test_ablations_deterministic(arch):
    rng = np.random.default_rng(8)
    X, y = rng.random((50, 6, 6)), rng.integers(1, 4, 50)
    cfg = CascadeConfig(num_classes=3, epochs=2, seed=3)
    a = make_classifier(arch, cfg).fit(X, y)
    b = make_classifier(arch, cfg).fit(X, y)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_ablation_shapes():
    lstm = cascade.init_model(CascadeConfig(num_classes=4), "lstm")
    cnn = cascade.init_model(CascadeConfig(num_classes=4), "cnn")
    assert lstm.params["dense.W"].shape == (4, 32) and "conv.W" not in lstm.params
    # 6x6 window -> 5x5 conv map -> 2x2 after pooling
    assert cnn.params["dense.W"].shape == (4, 32 * 2 * 2) and "lstm1.W_gx" not in cnn.params


# --------------------------------------------------------------------------- common interface

@pytest.mark.parametrize("algo", baselines.ALGORITHMS)
def test_save_load_round_trip(tmp_path, algo):
    rng = np.random.default_rng(9)
    X, y = rng.random((80, 6, 6)), rng.integers(1, 5, 80)
    clf = make_classifier(algo, CascadeConfig(num_classes=4, epochs=1, lstm_hidden=4, conv_filters=2)).fit(X, y)
    clf.save(tmp_path / "m.txt")
    back = load_classifier(tmp_path / "m.txt")
    Q = rng.random((200, 6, 6))
    assert np.array_equal(back.predict(Q), clf.predict(Q))
    assert back.name == clf.name == algo


def test_unknown_algorithm():
    with pytest.raises(ValueError, match="svm"):
        make_classifier("svm")


def test_classifier_objects():
    assert isinstance(make_classifier("knn"), KnnClassifier)
    assert isinstance(make_classifier("tree", tree_max_depth=3), TreeClassifier)
    assert make_classifier("tree", tree_max_depth=3).max_depth == 3
