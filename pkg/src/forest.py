"""Random forest with class-balanced bootstrap samples."""

from __future__ import annotations

import logging

import numpy as np
from joblib import Parallel, delayed
from sklearn.tree import DecisionTreeClassifier

from .errors import DataError, InvariantError

_LOGGER = logging.getLogger(__name__)


def _fit_tree(
    x: np.ndarray,
    y: np.ndarray,
    by_class: list[np.ndarray],
    per_class: int,
    max_depth: int | None,
    seed: int,
) -> DecisionTreeClassifier:
    rng = np.random.default_rng(seed)
    sample = np.concatenate([rng.choice(ids, size=per_class, replace=True) for ids in by_class])
    tree = DecisionTreeClassifier(
        criterion="gini",
        max_features="sqrt",
        max_depth=max_depth,
        random_state=seed,
    )
    return tree.fit(x[sample], y[sample])


class RandomForest:
    """Each tree sees the same number of samples from every class, drawn with replacement."""

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int | None = 20,
        seed: int = 42,
        samples_per_class: int | None = None,
        workers: int = 1,
    ) -> None:
        if n_trees < 1:
            raise DataError(f"forest needs at least one tree, got {n_trees}")
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.seed = seed
        self.samples_per_class = samples_per_class
        self.workers = workers
        self.trees_: list[DecisionTreeClassifier] = []
        self.classes_ = np.zeros(0, dtype=np.int64)
        self.n_features_ = 0

    def fit(self, x: np.ndarray, y: np.ndarray) -> RandomForest:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim != 2 or len(x) != len(y):
            raise DataError(f"features {x.shape} do not match {len(y)} labels")
        classes = np.unique(y)
        if len(classes) < 2:
            raise DataError(f"forest training needs at least 2 classes, got {classes.tolist()}")

        by_class = [np.flatnonzero(y == c) for c in classes]
        per_class = self.samples_per_class or min(len(ids) for ids in by_class)
        seeds = np.random.default_rng(self.seed).integers(0, 2**31 - 1, size=self.n_trees)
        _LOGGER.debug(
            "training %d trees on %d samples, %d per class", self.n_trees, len(y), per_class
        )
        self.trees_ = Parallel(n_jobs=self.workers, prefer="threads")(
            delayed(_fit_tree)(x, y, by_class, per_class, self.max_depth, int(s)) for s in seeds
        )
        self.classes_ = classes
        self.n_features_ = x.shape[1]
        return self

    def _check(self, x: np.ndarray) -> np.ndarray:
        if not self.trees_:
            raise InvariantError("forest is not trained")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features_:
            raise DataError(
                f"forest was trained on {self.n_features_} features, got shape {x.shape}"
            )
        return x

    def _tree_columns(self, tree: DecisionTreeClassifier) -> np.ndarray:
        return np.searchsorted(self.classes_, tree.classes_)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        proba = np.zeros((len(x), len(self.classes_)))
        for tree in self.trees_:
            proba[:, self._tree_columns(tree)] += tree.predict_proba(x)
        return proba / len(self.trees_)

    def vote_counts(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        votes = np.zeros((len(x), len(self.classes_)), dtype=np.int64)
        rows = np.arange(len(x))
        for tree in self.trees_:
            columns = self._tree_columns(tree)
            votes[rows, columns[np.argmax(tree.predict_proba(x), axis=1)]] += 1
        return votes

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(x), axis=1)]
