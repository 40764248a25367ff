"""Uncertainty-sampling active learning for the data classifiers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np


@dataclass
class LogisticClassifier:
    """Full-batch gradient-descent logistic regression; deterministic given its data."""

    l2: float = 1e-3
    lr: float = 0.5
    iters: int = 500
    w: np.ndarray | None = None
    b: float = 0.0
    X_: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    y_: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def fit(self, X, y) -> "LogisticClassifier":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        w = np.zeros(X.shape[1])
        b = 0.0
        for _ in range(self.iters):
            p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
            g = p - y
            w -= self.lr * (X.T @ g / len(y) + self.l2 * w)
            b -= self.lr * float(g.mean())
        return LogisticClassifier(self.l2, self.lr, self.iters, w, b, X, y)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.w is None:
            return np.full(len(X), 0.5)
        return 1.0 / (1.0 + np.exp(-(X @ self.w + self.b)))

    def accuracy(self, X, y) -> float:
        return float(np.mean((self.predict_proba(X) >= 0.5) == np.asarray(y, dtype=bool)))


def uncertainty_order(scores: Sequence[float]) -> list[int]:
    """Indices sorted by |score - 0.5|; ties keep their original order."""
    s = np.abs(np.asarray(scores, dtype=np.float64) - 0.5)
    return [int(i) for i in np.argsort(s, kind="stable")]


def active_learning_round(
    pool: Mapping[Hashable, np.ndarray],
    labeled: Sequence[tuple[np.ndarray, int]],
    classifier: LogisticClassifier,
    budget: int,
    oracle: Callable[[Hashable], int],
) -> tuple[list, LogisticClassifier]:
    """Query the ``budget`` most uncertain pool items and retrain on labeled + queried.

    The returned classifier keeps its training set in ``X_``/``y_``, so the next
    round's ``labeled`` is recoverable from it.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    ids = list(pool)
    if not ids:
        return [], classifier
    X = np.stack([np.asarray(pool[i], dtype=np.float64) for i in ids])
    order = uncertainty_order(classifier.predict_proba(X))
    queries = [ids[i] for i in order[:budget]]
    new_X = [np.asarray(x, dtype=np.float64) for x, _ in labeled] + [np.asarray(pool[q], dtype=np.float64) for q in queries]
    new_y = [int(y) for _, y in labeled] + [int(oracle(q)) for q in queries]
    return queries, classifier.fit(np.stack(new_X), np.asarray(new_y))
