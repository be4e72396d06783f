"""Gradient-boosted regression trees with squared loss, written from scratch.

Splits are found by exact greedy search over sorted feature values. Rows
with ``x <= threshold`` go left. Thresholds are midpoints between adjacent
distinct values, and equal-gain candidates are resolved towards the lowest
feature index, then the lowest threshold, so fitting is fully deterministic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ConfigError, DataError

LEAF = -1


@dataclass
class RegressionTree:
    """Flat array representation of a binary regression tree.

    Node 0 is the root. ``feature[k] == -1`` marks a leaf whose output is
    ``value[k]``; internal nodes route to ``left[k]`` / ``right[k]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    @property
    def n_nodes(self):
        return len(self.feature)

    def depth(self) -> int:
        def walk(k):
            if self.feature[k] == LEAF:
                return 0
            return 1 + max(walk(self.left[k]), walk(self.right[k]))

        return walk(0)

    def apply(self, X):
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth + 1):
            f = self.feature[node]
            inner = f != LEAF
            if not inner.any():
                break
            rows = np.nonzero(inner)[0]
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])
        return node

    def predict(self, X):
        return self.value[self.apply(X)]

    def split_features(self) -> set:
        return {int(f) for f in self.feature if f != LEAF}

    def to_list(self):
        return [[int(f), float(t), int(lo), int(r), float(v)]
                for f, t, lo, r, v in zip(self.feature, self.threshold, self.left, self.right, self.value)]

    @classmethod
    def from_list(cls, rows, max_depth):
        arr = list(zip(*rows)) if rows else [[], [], [], [], []]
        return cls(np.asarray(arr[0], dtype=np.int64), np.asarray(arr[1], dtype=float),
                   np.asarray(arr[2], dtype=np.int64), np.asarray(arr[3], dtype=np.int64),
                   np.asarray(arr[4], dtype=float), max_depth)


def _best_split(X, r, min_samples_leaf):
    """Exact greedy split maximizing the reduction of squared error.

    Returns ``(gain, feature, threshold)``; ``feature`` is ``None`` when no
    admissible split exists.
    """
    n, d = X.shape
    total = r.sum()
    base = total * total / n
    best = (-np.inf, None, None)
    lo, hi = min_samples_leaf, n - min_samples_leaf
    if hi < lo:
        return best
    for j in range(d):
        order = np.argsort(X[:, j], kind="mergesort")
        xs = X[order, j]
        cs = np.cumsum(r[order])
        # split after position i (left gets i + 1 rows)
        idx = np.arange(lo - 1, hi)
        idx = idx[xs[idx] < xs[idx + 1]]
        if len(idx) == 0:
            continue
        n_left = idx + 1.0
        s_left = cs[idx]
        s_right = total - s_left
        gain = s_left ** 2 / n_left + s_right ** 2 / (n - n_left) - base
        k = int(np.argmax(gain))
        if gain[k] > best[0]:
            i = idx[k]
            thr = 0.5 * (xs[i] + xs[i + 1])
            if not xs[i] <= thr < xs[i + 1]:
                thr = xs[i]
            best = (float(gain[k]), j, float(thr))
    return best


def fit_tree(X, r, max_depth=4, min_samples_leaf=5, min_gain=1e-7) -> RegressionTree | None:
    """Fit one regression tree to residuals ``r``; ``None`` if the root cannot split."""
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, LEAF), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(r)), 0)]
    while stack:
        k, rows, depth = stack.pop()
        value[k] = float(r[rows].mean())
        if depth >= max_depth or len(rows) < 2 * min_samples_leaf:
            continue
        gain, j, thr = _best_split(X[rows], r[rows], min_samples_leaf)
        if j is None or not gain > min_gain:
            continue
        mask = X[rows, j] <= thr
        feature[k], threshold[k] = j, thr
        left[k], right[k] = new_node(), new_node()
        stack.append((right[k], rows[~mask], depth + 1))
        stack.append((left[k], rows[mask], depth + 1))
    if feature[root] == LEAF:
        return None
    return RegressionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=float),
                          np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                          np.asarray(value, dtype=float), max_depth)


class GradientBoostedTrees(RegressorMixin, BaseEstimator):
    """Squared-loss gradient boosting over depth-limited regression trees.

    Parameters
    ----------
    n_trees : int, default=300
    max_depth : int, default=4
    learning_rate : float, default=0.05
        Shrinkage in (0, 1].
    min_samples_leaf : int, default=5
    min_gain : float, default=1e-7
        A split must reduce the squared error by more than this. ``np.inf``
        disables splitting and yields a constant model.
    random_state : int or None
        Recorded for provenance only; fitting uses no randomness.

    Attributes
    ----------
    base_score_ : float
        Mean of the training target.
    trees_ : list of RegressionTree
        Trees that carry a split; boosting rounds without one add nothing.
    train_loss_ : ndarray
        Mean squared training error after each boosting round (index 0 is the
        constant model).
    """

    def __init__(self, n_trees=300, max_depth=4, learning_rate=0.05, min_samples_leaf=5,
                 min_gain=1e-7, random_state=None):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.min_samples_leaf = min_samples_leaf
        self.min_gain = min_gain
        self.random_state = random_state

    def _check_params(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ConfigError("n_trees must be >= 0, max_depth and min_samples_leaf >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if self.min_gain < 0:
            raise ConfigError("min_gain must be nonnegative")

    def fit(self, X, y):
        self._check_params()
        if len(y) == 0:
            raise DataError("cannot fit on empty data")
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if len(y) < 2 * self.min_samples_leaf:
            raise DataError(f"need at least {2 * self.min_samples_leaf} rows, got {len(y)}")
        self.n_features_in_ = X.shape[1]
        self.base_score_ = float(y.mean())
        pred = np.full(len(y), self.base_score_)
        self.trees_ = []
        losses = [float(np.mean((y - pred) ** 2))]
        for _ in range(self.n_trees):
            tree = fit_tree(X, y - pred, self.max_depth, self.min_samples_leaf, self.min_gain)
            if tree is None:
                break
            self.trees_.append(tree)
            pred = pred + self.learning_rate * tree.predict(X)
            losses.append(float(np.mean((y - pred) ** 2)))
        self.train_loss_ = np.asarray(losses)
        self._stack()
        return self

    def _stack(self):
        # pad every tree to the same node count so prediction runs over all trees at once
        width = max((t.n_nodes for t in self.trees_), default=1)
        n = len(self.trees_)
        self._feat = np.full((n, width), LEAF, dtype=np.int64)
        self._thr = np.zeros((n, width))
        self._left = np.zeros((n, width), dtype=np.int64)
        self._right = np.zeros((n, width), dtype=np.int64)
        self._val = np.zeros((n, width))
        for t, tree in enumerate(self.trees_):
            m = tree.n_nodes
            self._feat[t, :m] = tree.feature
            self._thr[t, :m] = tree.threshold
            self._left[t, :m] = tree.left
            self._right[t, :m] = tree.right
            self._val[t, :m] = tree.value

    def predict(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if not self.trees_:
            return np.full(len(X), self.base_score_)
        n_trees = len(self.trees_)
        tree_idx = np.arange(n_trees)
        node = np.zeros((len(X), n_trees), dtype=np.int64)
        rows = np.arange(len(X))[:, None]
        for _ in range(self.max_depth):
            f = self._feat[tree_idx, node]
            inner = f != LEAF
            if not inner.any():
                break
            x = X[rows, np.where(inner, f, 0)]
            go_left = x <= self._thr[tree_idx, node]
            nxt = np.where(go_left, self._left[tree_idx, node], self._right[tree_idx, node])
            node = np.where(inner, nxt, node)
        return self.base_score_ + self.learning_rate * self._val[tree_idx, node].sum(axis=1)

    def used_features(self) -> set:
        """Feature indices appearing in at least one split."""
        out = set()
        for t in self.trees_:
            out |= t.split_features()
        return out

    def metadata(self) -> dict:
        return {**self.get_params(), "min_gain": _json_float(self.min_gain),
                "n_fitted_trees": len(self.trees_), "base_score": self.base_score_}

    # serialization -------------------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "params": {**self.get_params(), "min_gain": _json_float(self.min_gain)},
            "n_features": self.n_features_in_,
            "base_score": self.base_score_,
            "train_loss": self.train_loss_.tolist(),
            "trees": [t.to_list() for t in self.trees_],
        }

    @classmethod
    def from_dict(cls, data: Mapping):
        params = dict(data["params"])
        if params.get("min_gain") == "inf":
            params["min_gain"] = np.inf
        model = cls(**params)
        model.n_features_in_ = int(data["n_features"])
        model.base_score_ = float(data["base_score"])
        model.train_loss_ = np.asarray(data.get("train_loss", []), dtype=float)
        model.trees_ = [RegressionTree.from_list(rows, model.max_depth) for rows in data["trees"]]
        model._stack()
        return model

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def _json_float(x):
    return "inf" if np.isinf(x) else x


# ---------------------------------------------------------------------------
# metrics and city-wise cross-validation

def regression_metrics(y_true, y_pred) -> dict:
    """R2 (about the mean of ``y_true``), MAE and RMSE."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    resid = y_true - y_pred
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return {
        "r2": r2,
        "mae": float(np.mean(np.abs(resid))),
        "rmse": float(np.sqrt(np.mean(resid ** 2))),
    }


CV_COLUMNS = ["city", "r2_train", "r2_test", "mae_km", "rmse_km", "mean_vkt_km", "sd_vkt_km"]


def citywise_cross_validation(city_datasets: Mapping[str, pd.DataFrame], features: Sequence[str],
                              target="mean_vkt_km", params: Mapping | None = None,
                              return_models=False):
    """Leave-one-city-out evaluation of :class:`GradientBoostedTrees`.

    For each city the model is trained on the rows of all other cities and
    scored on the held-out city. ``sd_vkt_km`` is the population standard
    deviation of the held-out target.

    Returns a DataFrame with columns :data:`CV_COLUMNS` (and the fitted
    models keyed by held-out city when ``return_models`` is set).
    """
    if len(city_datasets) < 2:
        raise DataError("city-wise cross-validation needs at least two cities")
    features = list(features)
    for city, frame in city_datasets.items():
        if len(frame) < 5:
            raise DataError(f"city {city!r} has {len(frame)} rows; at least 5 are needed")
        missing = [c for c in (*features, target) if c not in frame.columns]
        if missing:
            raise DataError(f"city {city!r} lacks columns {missing}")
    rows, models = [], {}
    cities = sorted(city_datasets)
    for held_out in cities:
        train = pd.concat([city_datasets[c] for c in cities if c != held_out], ignore_index=True)
        test = city_datasets[held_out]
        model = GradientBoostedTrees(**(params or {}))
        model.fit(train[features].to_numpy(float), train[target].to_numpy(float))
        train_r2 = regression_metrics(train[target], model.predict(train[features].to_numpy(float)))["r2"]
        y_test = test[target].to_numpy(float)
        m = regression_metrics(y_test, model.predict(test[features].to_numpy(float)))
        rows.append({
            "city": held_out, "r2_train": train_r2, "r2_test": m["r2"], "mae_km": m["mae"],
            "rmse_km": m["rmse"], "mean_vkt_km": float(y_test.mean()), "sd_vkt_km": float(y_test.std()),
        })
        models[held_out] = model
    table = pd.DataFrame(rows, columns=CV_COLUMNS)
    return (table, models) if return_models else table
