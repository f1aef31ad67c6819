"""Reference classifiers sharing one ``fit``/``predict``/``name`` interface.

All of them take window arrays of shape ``(n, t, n_features)`` and 1-based
labels.  kNN and the decision tree work on the flattened window.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from flowclass import cascade, serialization
from flowclass.cascade import CascadeConfig, CascadeModel
from flowclass.features import FeatureScaler


class Classifier(Protocol):
    name: str

    def fit(self, X: np.ndarray, y: np.ndarray) -> Classifier: ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


def _flat(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(len(X), -1)


def _scaler_tensors(scaler: FeatureScaler | None) -> dict[str, np.ndarray]:
    if scaler is None:
        return {}
    return {"scaler.minimum": scaler.minimum, "scaler.span": scaler.span}


def _scaler_from(tensors: dict[str, np.ndarray]) -> FeatureScaler | None:
    if "scaler.minimum" not in tensors:
        return None
    return FeatureScaler(tensors["scaler.minimum"], tensors["scaler.span"])


def _vote(labels: np.ndarray) -> int:
    """Most frequent label; ties go to the lowest label."""
    values, counts = np.unique(labels, return_counts=True)
    return int(values[np.argmax(counts)])


# --------------------------------------------------------------------------- kNN

@dataclass
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    k: int

    def __post_init__(self):
        if not 1 <= self.k <= len(self.y):
            raise ValueError(f"k={self.k} must lie in [1, {len(self.y)}] (training size)")


def knn_fit(X: np.ndarray, y: np.ndarray, k: int = 10) -> KnnModel:
    return KnnModel(_flat(X), np.asarray(y, dtype=np.int64), k)


def knn_neighbors(model: KnnModel, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Indices of the ``k`` nearest training rows, nearest first.

    Euclidean distance; equal distances keep training-set order.  A matmul
    shortlist narrows the search, then every row that could tie with or
    beat the k-th exact distance is re-scored exactly.
    """
    Q = _flat(X)
    n, k = len(model.y), model.k
    out = np.empty((len(Q), k), dtype=np.int64)
    train_sq = np.einsum("ij,ij->i", model.X, model.X)
    m = min(n, k + 16)
    for s in range(0, len(Q), chunk):
        q = Q[s:s + chunk]
        q_sq = np.einsum("ij,ij->i", q, q)
        approx = train_sq[None, :] - 2.0 * (q @ model.X.T)  # squared distance minus |q|^2
        short = np.argpartition(approx, m - 1, axis=1)[:, :m] if m < n else None
        for r in range(len(q)):
            cand = short[r] if short is not None else np.arange(n)
            d = np.sum((model.X[cand] - q[r]) ** 2, axis=1)
            kth = np.partition(d, k - 1)[k - 1]
            tol = 1e-9 * (q_sq[r] + train_sq.max() + 1.0)
            cand = np.flatnonzero(approx[r] <= kth - q_sq[r] + tol)
            d = np.sum((model.X[cand] - q[r]) ** 2, axis=1)
            out[s + r] = cand[np.argsort(d, kind="stable")[:k]]
    return out


def knn_predict(model: KnnModel, X: np.ndarray) -> np.ndarray:
    nbrs = knn_neighbors(model, X)
    return np.array([_vote(model.y[row]) for row in nbrs], dtype=np.int64)


class KnnClassifier:
    name = "knn"

    def __init__(self, k: int = 10):
        self.k = k
        self.model: KnnModel | None = None
        self.scaler: FeatureScaler | None = None

    def fit(self, X, y):
        self.model = knn_fit(X, y, self.k)
        return self

    def predict(self, X):
        return knn_predict(self.model, X)

    def save(self, path):
        serialization.save(path, "knn", {"k": self.k},
                           {"train.X": self.model.X, "train.y": self.model.y} | _scaler_tensors(self.scaler))

    @classmethod
    def from_blocks(cls, header, tensors):
        clf = cls(int(header["k"]))
        clf.model = KnnModel(tensors["train.X"], tensors["train.y"], clf.k)
        clf.scaler = _scaler_from(tensors)
        return clf


# --------------------------------------------------------------------------- decision tree

@dataclass
class TreeModel:
    """Flat-array binary tree.  Node 0 is the root; leaves have ``feature == -1``.

    ``counts[n, c]`` is the number of training samples of class ``classes[c]``
    reaching node ``n``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    classes: np.ndarray
    max_depth: int

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def leaf_label(self, node: int) -> int:
        return int(self.classes[np.argmax(self.counts[node])])


def gini(counts: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum(axis=-1)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, 1.0 - np.sum((counts / safe[..., None]) ** 2, axis=-1), 0.0)


def best_split(X: np.ndarray, y_idx: np.ndarray, n_classes: int) -> tuple[int, float, float] | None:
    """Lowest weighted-Gini ``(feature, threshold, impurity)`` over value midpoints.

    Ties keep the lowest feature index, then the lowest threshold.  Returns
    ``None`` when every feature is constant.
    """
    n = len(y_idx)
    best = None
    onehot = np.eye(n_classes)[y_idx]
    total = onehot.sum(axis=0)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        cuts = np.flatnonzero(xs[1:] > xs[:-1])  # split between position c and c+1
        if len(cuts) == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[cuts]
        right = total - left
        nl = (cuts + 1).astype(np.float64)
        score = (nl * gini(left) + (n - nl) * gini(right)) / n
        c = int(np.argmin(score))
        if best is None or score[c] < best[2]:
            lo, hi = xs[cuts[c]], xs[cuts[c] + 1]
            mid = (lo + hi) / 2.0
            # adjacent floats: the midpoint may round up onto the right-hand value
            best = (j, float(mid if mid < hi else lo), float(score[c]))
    return best


def tree_fit(X: np.ndarray, y: np.ndarray, max_depth: int = 12) -> TreeModel:
    """Greedy CART growth on Gini impurity.

    A node becomes a leaf at ``max_depth``, when pure, with fewer than two
    samples, or when no feature varies.
    """
    X = _flat(X)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("tree_fit needs at least one sample")
    classes = np.unique(y)
    y_idx = np.searchsorted(classes, y)
    feature, threshold, left, right, counts = [], [], [], [], []

    def grow(rows: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y_idx[rows], minlength=len(classes)))
        if depth >= max_depth or len(rows) < 2 or np.count_nonzero(counts[node]) <= 1:
            return node
        split = best_split(X[rows], y_idx[rows], len(classes))
        if split is None:
            return node
        j, thr, _ = split
        go_left = X[rows, j] <= thr
        feature[node], threshold[node] = j, thr
        left[node] = grow(rows[go_left], depth + 1)
        right[node] = grow(rows[~go_left], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return TreeModel(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                     np.array(counts), classes, max_depth)


def tree_apply(model: TreeModel, X: np.ndarray) -> np.ndarray:
    """Leaf index reached by every row."""
    X = _flat(X)
    node = np.zeros(len(X), dtype=np.int64)
    active = model.feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        nd = node[idx]
        go_left = X[idx, model.feature[nd]] <= model.threshold[nd]
        node[idx] = np.where(go_left, model.left[nd], model.right[nd])
        active = model.feature[node] >= 0
    return node


def tree_predict(model: TreeModel, X: np.ndarray) -> np.ndarray:
    leaves = tree_apply(model, X)
    labels = model.classes[np.argmax(model.counts, axis=1)]
    return labels[leaves].astype(np.int64)


class TreeClassifier:
    name = "tree"

    def __init__(self, max_depth: int = 12):
        self.max_depth = max_depth
        self.model: TreeModel | None = None
        self.scaler: FeatureScaler | None = None

    def fit(self, X, y):
        self.model = tree_fit(X, y, self.max_depth)
        return self

    def predict(self, X):
        return tree_predict(self.model, X)

    def save(self, path):
        m = self.model
        serialization.save(path, "tree", {"max_depth": self.max_depth}, {
            "node.feature": m.feature, "node.threshold": m.threshold, "node.left": m.left,
            "node.right": m.right, "node.counts": m.counts, "classes": m.classes} | _scaler_tensors(self.scaler))

    @classmethod
    def from_blocks(cls, header, tensors):
        clf = cls(int(header["max_depth"]))
        clf.model = TreeModel(tensors["node.feature"], tensors["node.threshold"], tensors["node.left"],
                              tensors["node.right"], tensors["node.counts"], tensors["classes"],
                              clf.max_depth)
        clf.scaler = _scaler_from(tensors)
        return clf


# --------------------------------------------------------------------------- neural

class NeuralClassifier:
    """The cascade or one of its ablations behind the common interface."""

    def __init__(self, config: CascadeConfig, arch: str = "cascade"):
        self.config = config
        self.arch = arch
        self.name = arch
        self.model: CascadeModel | None = None
        self.trace: list[cascade.EpochStats] = []

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        cfg = dataclasses.replace(self.config, window=X.shape[1], num_features=X.shape[2])
        self.model, self.trace = cascade.train((X, np.asarray(y)), cfg, self.arch)
        return self

    def predict(self, X):
        return cascade.predict(self.model, np.asarray(X, dtype=np.float64))

    @property
    def scaler(self) -> FeatureScaler | None:
        """The fitted input scaler, stored inside the model file."""
        return self.model.scaler if self.model is not None else None

    @scaler.setter
    def scaler(self, value: FeatureScaler | None) -> None:
        self.model.scaler = value

    def save(self, path):
        cascade.save_model(self.model, path)

    @classmethod
    def from_blocks(cls, header, tensors):
        model = cascade.model_from_blocks(header, tensors)
        clf = cls(model.config, model.arch)
        clf.model = model
        return clf


def lstm_only(config: CascadeConfig) -> NeuralClassifier:
    return NeuralClassifier(config, "lstm")


def cnn_only(config: CascadeConfig) -> NeuralClassifier:
    return NeuralClassifier(config, "cnn")


ALGORITHMS = ("cascade", "knn", "tree", "lstm", "cnn")


def make_classifier(algo: str, config: CascadeConfig | None = None, knn_k: int = 10,
                    tree_max_depth: int = 12) -> Classifier:
    config = config or CascadeConfig()
    if algo == "knn":
        return KnnClassifier(knn_k)
    if algo == "tree":
        return TreeClassifier(tree_max_depth)
    if algo in cascade.ARCHITECTURES:
        return NeuralClassifier(config, algo)
    raise ValueError(f"unknown algorithm {algo!r}; choose from {ALGORITHMS}")


def load_classifier(path: str | Path) -> Classifier:
    kind, header, tensors = serialization.load(path)
    if kind == "knn":
        return KnnClassifier.from_blocks(header, tensors)
    if kind == "tree":
        return TreeClassifier.from_blocks(header, tensors)
    if kind == "neural":
        return NeuralClassifier.from_blocks(header, tensors)
    raise serialization.ModelFormatError(f"unknown model kind {kind!r}")
