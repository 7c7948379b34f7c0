"""Random forest classifier: bootstrapped Gini trees with sqrt(d) feature sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Final

import numpy as np
import numpy.typing as npt
from joblib import Parallel, delayed

from autodiff.rng import RngStream

Array = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]
LEAF: Final[int] = -1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    min_samples_leaf: int = 1
    max_depth: int | None = None
    bootstrap: bool = True

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees and min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")


@dataclass(frozen=True)
class DecisionTree:
    """Flat arrays indexed by node id; ``feature == LEAF`` marks a leaf."""

    feature: IntArray
    threshold: Array
    left: IntArray
    right: IntArray
    value: Array  # (n_nodes, n_classes) class frequencies

    def leaf_index(self, x: Array) -> IntArray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = x[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active[rows] = self.feature[node[rows]] != LEAF
        return node

    def predict_proba(self, x: Array) -> Array:
        return self.value[self.leaf_index(x)]


@dataclass(frozen=True)
class RandomForest:
    classes: IntArray
    trees: tuple[DecisionTree, ...]

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _best_split(
    x: Array, y_onehot: Array, features: IntArray, min_leaf: int
) -> tuple[int, float, float] | None:
    """(feature, threshold, weighted impurity) minimizing the Gini impurity of the children."""
    n = len(x)
    best: tuple[int, float, float] | None = None
    for feature in features:
        order = np.argsort(x[:, feature], kind="stable")
        values = x[order, feature]
        left_counts = np.cumsum(y_onehot[order], axis=0)[:-1]
        right_counts = y_onehot.sum(axis=0) - left_counts
        n_left = np.arange(1, n, dtype=np.float64)
        n_right = n - n_left
        valid = (values[1:] > values[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        impurity = (n_left - (left_counts**2).sum(axis=1) / n_left) + (n_right - (right_counts**2).sum(axis=1) / n_right)
        impurity = np.where(valid, impurity / n, np.inf)
        position = int(np.argmin(impurity))
        score = float(impurity[position])
        if best is None or score < best[2]:
            threshold = 0.5 * (values[position] + values[position + 1])
            if not threshold < values[position + 1]:
                threshold = float(values[position])
            best = (int(feature), float(threshold), score)
    return best


def build_tree(x: Array, y: IntArray, n_classes: int, cfg: ForestConfig, rng: RngStream) -> DecisionTree:
    n_features = x.shape[1]
    n_sampled = max(1, int(math.sqrt(n_features)))
    y_onehot = np.eye(n_classes)[y]

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[Array] = []

    def new_node(rows: IntArray) -> int:
        counts = y_onehot[rows].sum(axis=0)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(counts / counts.sum())
        return len(feature) - 1

    root_rows = np.arange(len(x), dtype=np.int64)
    stack = [(new_node(root_rows), root_rows, 0)]
    split_index = 0
    while stack:
        node, rows, depth = stack.pop()
        if value[node].max() == 1.0 or len(rows) < 2 * cfg.min_samples_leaf:
            continue
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        order = rng.child("features", split_index).permutation(n_features)
        split_index += 1
        split = _best_split(x[rows], y_onehot[rows], order[:n_sampled], cfg.min_samples_leaf)
        if split is None and n_sampled < n_features:
            split = _best_split(x[rows], y_onehot[rows], order[n_sampled:], cfg.min_samples_leaf)
        if split is None:
            continue
        split_feature, split_threshold, _ = split
        goes_left = x[rows, split_feature] <= split_threshold
        left_rows, right_rows = rows[goes_left], rows[~goes_left]
        feature[node] = split_feature
        threshold[node] = split_threshold
        left[node] = new_node(left_rows)
        right[node] = new_node(right_rows)
        stack.append((right[node], right_rows, depth + 1))
        stack.append((left[node], left_rows, depth + 1))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.stack(value),
    )


def rf_train(features: Array, labels: IntArray, cfg: ForestConfig, rng: RngStream, *, workers: int = 1) -> RandomForest:
    """Trees are grown in parallel; each draws from its own substream, so the worker count does not matter."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(labels):
        raise ValueError(f"features {x.shape} and labels {np.shape(labels)} disagree")
    classes, y = np.unique(np.asarray(labels, dtype=np.int64), return_inverse=True)
    if len(classes) < 2:
        raise ValueError(f"random forest needs at least 2 classes, got {classes.tolist()}")
    y = y.astype(np.int64)

    def grow(index: int) -> DecisionTree:
        tree_rng = rng.child("tree", index)
        rows = tree_rng.child("bootstrap").integers(0, len(x), len(x)) if cfg.bootstrap else np.arange(len(x))
        return build_tree(x[rows], y[rows], len(classes), cfg, tree_rng)

    trees = tuple(Parallel(n_jobs=max(1, workers), prefer="threads")(delayed(grow)(i) for i in range(cfg.n_trees)))
    return RandomForest(classes=classes, trees=trees)


def rf_predict_proba(forest: RandomForest, features: Array) -> Array:
    """Mean leaf class frequencies over trees; columns follow ``forest.classes``."""
    x = np.asarray(features, dtype=np.float64)
    total = np.zeros((len(x), len(forest.classes)))
    for tree in forest.trees:
        total += tree.predict_proba(x)
    return total / forest.n_trees


def rf_predict(forest: RandomForest, features: Array) -> IntArray:
    return forest.classes[np.argmax(rf_predict_proba(forest, features), axis=1)]
