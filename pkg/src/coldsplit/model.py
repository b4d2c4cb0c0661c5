"""Deterministic reference classifiers over binary feature matrices.

The forest is the canonical baseline configuration: 200 Gini trees, unbounded
depth, min_samples_leaf=3, sqrt feature subsets, class-balanced sample weights
w_c = n / (2 * n_c), bootstrap size n.  It is backed by scikit-learn's
RandomForestClassifier behind this module's contract; determinism guarantees
are provided here:

* the RNG is a pure function of ``config.seed`` (never global state), so the
  same (X, y, config) always yields bit-identical probabilities;
* training rows are canonically ordered by (row bytes, label) before fitting,
  so predictions are invariant to training-row permutation;
* trees are fit single-threaded and prediction is row-wise, so results never
  depend on worker count.
"""

from __future__ import annotations

import pickle
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .errors import FeatureError, SingleClassError
from .features import Fingerprint, tanimoto_matrix

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    min_samples_leaf: int = 3
    class_balanced: bool = True
    max_features: str = "SQRT"  # "SQRT" | "ALL"
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_features not in ("SQRT", "ALL"):
            raise ValueError("max_features must be SQRT or ALL")

    def with_seed(self, seed: int) -> "ForestConfig":
        return ForestConfig(
            self.n_trees, self.min_samples_leaf, self.class_balanced, self.max_features, int(seed)
        )


@dataclass
class ForestModel:
    forest: RandomForestClassifier
    config: ForestConfig
    width: int
    class_prior: float  # training positive rate


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sort rows by (row bytes, label) so training is order-free."""
    keys = [(X[i].tobytes(), bool(y[i])) for i in range(X.shape[0])]
    return np.asarray(sorted(range(X.shape[0]), key=lambda i: keys[i]), dtype=np.int64)


def train_forest(X: np.ndarray, y: np.ndarray, config: ForestConfig) -> ForestModel:
    X = np.ascontiguousarray(np.asarray(X, dtype=np.uint8))
    y = np.asarray(y, dtype=bool)
    if X.shape[0] != y.shape[0]:
        raise FeatureError("X and y length mismatch")
    if X.shape[0] < 2:
        raise SingleClassError("need at least 2 training rows")
    if y.all() or not y.any():
        raise SingleClassError("training labels contain a single class")
    order = _canonical_order(X, y)
    Xs, ys = X[order], y[order]
    rng = np.random.RandomState(np.random.MT19937(np.random.SeedSequence(config.seed)))
    forest = RandomForestClassifier(
        n_estimators=config.n_trees,
        criterion="gini",
        min_samples_leaf=config.min_samples_leaf,
        max_features="sqrt" if config.max_features == "SQRT" else None,
        bootstrap=True,
        class_weight="balanced" if config.class_balanced else None,
        random_state=rng,
        n_jobs=1,
    )
    forest.fit(Xs, ys)
    return ForestModel(
        forest=forest, config=config, width=X.shape[1], class_prior=float(y.mean())
    )


def predict_proba(model: ForestModel, X: np.ndarray) -> np.ndarray:
    """Positive-class probability: mean over trees of leaf positive-weight fraction."""
    X = np.ascontiguousarray(np.asarray(X, dtype=np.uint8))
    if X.shape[1] != model.width:
        raise FeatureError(f"feature width {X.shape[1]} != training width {model.width}")
    proba = model.forest.predict_proba(X)
    pos_col = list(model.forest.classes_).index(True)
    return proba[:, pos_col]


def knn_predict(
    train_fps: list[Fingerprint] | np.ndarray,
    train_y,
    test_fps: list[Fingerprint] | np.ndarray,
    k: int = 5,
) -> np.ndarray:
    """k-nearest-neighbour positive fraction under Tanimoto distance.

    Distance ties are broken by lower training index, which makes the
    neighbour sets (and therefore the scores) fully deterministic.
    """
    T = _rows(train_fps)
    Q = _rows(test_fps)
    y = np.asarray(train_y, dtype=bool)
    if T.shape[0] == 0:
        raise FeatureError("empty training set")
    if k < 1 or k > T.shape[0]:
        raise FeatureError(f"k={k} out of range for {T.shape[0]} training rows")
    dist = 1.0 - tanimoto_matrix(Q, T)
    idx_tiebreak = np.arange(T.shape[0])
    scores = np.empty(Q.shape[0], dtype=np.float64)
    for i in range(Q.shape[0]):
        order = np.lexsort((idx_tiebreak, dist[i]))
        scores[i] = float(y[order[:k]].mean())
    return scores


def _rows(fps) -> np.ndarray:
    if isinstance(fps, np.ndarray):
        return fps.astype(bool)
    return np.stack([fp.bits for fp in fps]).astype(bool) if fps else np.zeros((0, 0), dtype=bool)


def save_forest(model: ForestModel, path) -> None:
    """Serialise a trained forest (versioned; stable within a release)."""
    with open(path, "wb") as fh:
        pickle.dump({"format": MODEL_FORMAT_VERSION, "model": model}, fh)


def load_forest(path) -> ForestModel:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    if blob.get("format") != MODEL_FORMAT_VERSION:
        raise FeatureError(f"unsupported model format {blob.get('format')}")
    return blob["model"]
