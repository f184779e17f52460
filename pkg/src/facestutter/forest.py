"""Random forest baseline: bootstrapped CART trees with Gini splits."""
from __future__ import annotations

import math

import numpy as np

from .rng import stream


class Tree:
    """Flat-array binary tree; leaves have ``feature == -1``."""

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _add(self, p1: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(p1)
        return len(self.feature) - 1

    def finalize(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)
        return self

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] >= 0
        while active.any():
            n = node[active]
            go_left = X[rows[active], self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Class vote per sample (1 = stuttered)."""
        return (self.value[self.apply(X)] > 0.5).astype(int)


def best_split(Xn: np.ndarray, yn: np.ndarray, features: np.ndarray):
    """Lowest weighted-Gini threshold over the candidate features.

    Returns ``(feature, threshold)`` or None when every candidate is constant.
    """
    n = yn.size
    cols = Xn[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    sorted_x = np.take_along_axis(cols, order, axis=0)
    sorted_y = yn[order]
    left_pos = np.cumsum(sorted_y, axis=0)[:-1]
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    right_pos = left_pos[-1:] + sorted_y[-1:] - left_pos
    # n * weighted Gini, up to a constant factor of 2
    cost = left_pos * (n_left - left_pos) / n_left + right_pos * (n_right - right_pos) / n_right
    valid = sorted_x[1:] > sorted_x[:-1]
    if not valid.any():
        return None
    cost = np.where(valid, cost, np.inf)
    i, j = np.unravel_index(np.argmin(cost), cost.shape)
    return int(features[j]), 0.5 * (sorted_x[i, j] + sorted_x[i + 1, j])


def grow_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator, max_features: int,
              max_depth: int | None = None, min_samples_split: int = 2) -> Tree:
    tree = Tree()
    d = X.shape[1]
    root = tree._add(float(y.mean()))
    stack = [(root, np.arange(y.size), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yn = y[idx]
        pos = int(yn.sum())
        if pos == 0 or pos == idx.size or idx.size < min_samples_split:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        features = rng.choice(d, size=max_features, replace=False)
        split = best_split(X[idx], yn, features)
        if split is None:
            continue
        f, thr = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        left = tree._add(float(y[li].mean()))
        right = tree._add(float(y[ri].mean()))
        tree.feature[node] = f
        tree.threshold[node] = thr
        tree.left[node] = left
        tree.right[node] = right
        stack.append((right, ri, depth + 1))
        stack.append((left, li, depth + 1))
    return tree.finalize()


class RandomForest:
    """Bagged CART classifier; probability is the fraction of trees voting 1."""

    def __init__(self, n_trees: int = 500, max_depth: int | None = None, seed: int = 0,
                 max_features: int | None = None):
        if n_trees < 1:
            raise ValueError("n_trees must be positive")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.seed = seed
        self.max_features = max_features
        self.trees: list[Tree] = []
        self.n_features = None
        self.trained = False

    @staticmethod
    def _flat(X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X.reshape(X.shape[0], -1)

    def fit(self, X, y) -> "RandomForest":
        X = self._flat(X)
        y = np.asarray(y, dtype=int)
        if X.shape[0] == 0:
            raise ValueError("cannot fit a forest on an empty training set")
        if X.shape[0] != y.size:
            raise ValueError(f"{X.shape[0]} samples but {y.size} labels")
        self.n_features = X.shape[1]
        mtry = self.max_features or max(1, int(math.sqrt(self.n_features)))
        self.trees = []
        for t in range(self.n_trees):
            rng = stream(self.seed, "forest", t)
            boot = rng.integers(0, X.shape[0], size=X.shape[0])
            self.trees.append(grow_tree(X[boot], y[boot], rng, mtry, self.max_depth))
        self.trained = True
        return self

    def predict_proba(self, X) -> np.ndarray:
        if not self.trained:
            raise RuntimeError("forest is not fitted")
        X = self._flat(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        votes = np.zeros(X.shape[0])
        for tree in self.trees:
            votes += tree.predict(X)
        return votes / self.n_trees

    # -- serialization ---------------------------------------------------------
    def header(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth, "seed": self.seed,
                "max_features": self.max_features, "n_features": self.n_features}

    def arrays(self) -> dict[str, np.ndarray]:
        sizes = [t.feature.size for t in self.trees]
        cat = lambda attr: np.concatenate([getattr(t, attr) for t in self.trees])  # noqa: E731
        return {"rf.offsets": np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
                "rf.feature": cat("feature"), "rf.threshold": cat("threshold"),
                "rf.left": cat("left"), "rf.right": cat("right"), "rf.value": cat("value")}

    @classmethod
    def from_arrays(cls, header: dict, arrays: dict) -> "RandomForest":
        rf = cls(header["n_trees"], header["max_depth"], header["seed"], header["max_features"])
        rf.n_features = header["n_features"]
        off = arrays["rf.offsets"]
        for a, b in zip(off[:-1], off[1:]):
            t = Tree()
            t.feature = arrays["rf.feature"][a:b].copy()
            t.threshold = arrays["rf.threshold"][a:b].copy()
            t.left = arrays["rf.left"][a:b].copy()
            t.right = arrays["rf.right"][a:b].copy()
            t.value = arrays["rf.value"][a:b].copy()
            rf.trees.append(t)
        rf.trained = True
        return rf
