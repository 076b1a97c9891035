"""Random-forest style ensembles of CART trees.

Used for proxy policies (classifier over action bins, regressor for the
payment) and for the reward model of DM/DR/SNDR.

Conventions: variance reduction / Gini impurity, thresholds at midpoints
between consecutive distinct values, ties between candidate splits broken
toward the lowest feature index and then the lowest threshold.  Each tree
draws its bootstrap sample and per-node feature subsets from its own
random stream, so fitting in parallel gives the same forest as fitting
serially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels, _rng
from .._parallel import pmap
from ..core import BinningScheme
from ..errors import DimensionMismatch, EmptyInput

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class TreeParams:
    num_trees: int = 50
    max_depth: int | None = 10
    min_leaf: int = 5
    bootstrap: bool = True
    rng_seed: int = 0
    max_features: int | None = None  # None: sqrt(d) classification, ceil(d/3) regression

    def to_dict(self) -> dict:
        return {
            "num_trees": self.num_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "bootstrap": self.bootstrap,
            "rng_seed": self.rng_seed,
            "max_features": self.max_features,
        }


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat array tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, n_outputs): leaf mean or class counts

    def apply(self, X: np.ndarray) -> np.ndarray:
        return _kernels.tree_apply(X, self.feature, self.threshold, self.left, self.right)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64).reshape(len(d["feature"]), -1),
        )


@dataclass(frozen=True, eq=False)
class TreeEnsemble:
    trees: list[Tree]
    mode: str
    feature_dimension: int
    num_classes: int = 0
    params: TreeParams = field(default_factory=TreeParams)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.feature_dimension:
            raise DimensionMismatch(f"input has {X.shape[1]} features, ensemble expects {self.feature_dimension}")
        return np.ascontiguousarray(X)

    def predict_proba(self, X) -> np.ndarray:
        """Average of per-tree normalised leaf histograms, shape (n, num_classes)."""
        if self.mode != CLASSIFICATION:
            raise ValueError("predict_proba requires a classification ensemble")
        X = self._check(X)
        out = np.zeros((X.shape[0], self.num_classes))
        for tree in self.trees:
            counts = tree.value[tree.apply(X)]
            out += counts / counts.sum(axis=1, keepdims=True)
        out /= len(self.trees)
        return out

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        if self.mode == CLASSIFICATION:
            return np.argmax(self.predict_proba(X), axis=1)
        out = np.zeros(X.shape[0])
        for tree in self.trees:
            out += tree.value[tree.apply(X), 0]
        return out / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "kind": "tree_ensemble",
            "version": 1,
            "mode": self.mode,
            "feature_dimension": self.feature_dimension,
            "num_classes": self.num_classes,
            "params": self.params.to_dict(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeEnsemble":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            mode=d["mode"],
            feature_dimension=int(d["feature_dimension"]),
            num_classes=int(d.get("num_classes", 0)),
            params=TreeParams(**d.get("params", {})),
        )


def _n_features(d: int, mode: str, override: int | None) -> int:
    if override is not None:
        return max(1, min(d, int(override)))
    if mode == CLASSIFICATION:
        return max(1, int(math.isqrt(d)))
    return max(1, math.ceil(d / 3))


def _grow_tree(X, y, mode, num_classes, params: TreeParams, tree_index: int) -> Tree:
    n, d = X.shape
    rng = _rng.stream(params.rng_seed, _rng.TREE, tree_index)
    rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
    rows = np.sort(rows).astype(np.int64)
    k = _n_features(d, mode, params.max_features)
    max_depth = params.max_depth if params.max_depth is not None else 1 << 30
    min_leaf = max(1, int(params.min_leaf))
    # one row of feature-sampling keys per node that can possibly be created
    keys = rng.random((2 * (n // min_leaf) + 1, d))
    classification = mode == CLASSIFICATION
    labels = y if classification else np.zeros(1, dtype=np.int64)
    targets = np.zeros(1) if classification else y
    feature, threshold, left, right, value = _kernels.grow_tree(
        X, targets, labels, classification, max(num_classes, 1), rows, keys, k, max_depth, min_leaf
    )
    return Tree(feature, threshold, left, right, value)


def fit_tree_ensemble(
    X,
    y,
    mode: str = REGRESSION,
    params: TreeParams | None = None,
    num_classes: int | None = None,
) -> TreeEnsemble:
    """Fit a bagged ensemble of CART trees.

    Parameters
    ----------
    X : array-like, shape (n, d)
    y : array-like, shape (n,)
        Real targets (regression) or integer labels in ``[0, num_classes)``.
    mode : {"regression", "classification"}
    params : TreeParams
    num_classes : int, optional
        Defaults to ``max(y) + 1`` for classification.
    """
    params = params or TreeParams()
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    if n == 0:
        raise EmptyInput("cannot fit a tree ensemble on zero rows")
    if mode == CLASSIFICATION:
        y = np.asarray(y).astype(np.int64).reshape(-1)
        k = int(num_classes if num_classes is not None else y.max() + 1)
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"class labels must lie in [0, {k})")
    elif mode == REGRESSION:
        y = np.ascontiguousarray(np.asarray(y, dtype=np.float64).reshape(-1))
        if not np.all(np.isfinite(y)):
            raise ValueError("regression targets must be finite")
        k = 0
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if y.shape[0] != n:
        raise DimensionMismatch("X and y have different numbers of rows")
    if params.num_trees < 1:
        raise ValueError("num_trees must be >= 1")
    trees = pmap(lambda t: _grow_tree(X, y, mode, k, params, t), range(params.num_trees))
    return TreeEnsemble(trees=trees, mode=mode, feature_dimension=X.shape[1], num_classes=k, params=params)


def predict_proxy_policy(ensemble: TreeEnsemble, context, binning: BinningScheme | None = None) -> np.ndarray:
    """Payment (regression) or bin distribution (classification) for one or many contexts.

    Regression payments are clamped at zero.  For classification the
    returned rows are probability vectors over ``binning.num_bins`` bins.
    """
    single = np.asarray(context).ndim == 1
    if ensemble.mode == REGRESSION:
        out = np.maximum(ensemble.predict(context), 0.0)
    else:
        out = ensemble.predict_proba(context)
        if binning is not None and binning.num_bins != ensemble.num_classes:
            raise DimensionMismatch(
                f"classifier has {ensemble.num_classes} classes but binning has {binning.num_bins} bins"
            )
    return out[0] if single else out
