"""Fairness and accuracy metrics.

Fairness metrics read the predicted labels only, never the true labels.

"""

import logging
from typing import Optional

import numpy as np
from pydantic import ConfigDict, Field, model_validator
from pydantic_numpy.typing import Np1DArray, Np2DArray
from scipy.spatial.distance import cdist

from gradfair.types import GradBaseModel


logger = logging.getLogger(__name__)

KNN_CHUNK = 1024


def _binary(values, name: str) -> np.ndarray:
    values = np.asarray(values)
    if not np.isin(values, (0, 1)).all():
        raise ValueError(f"'{name}' must only hold 0 and 1")
    return values.astype(np.float64)


def discrimination(yhat: Np1DArray, a: Np1DArray) -> float:
    """Absolute difference of the mean prediction between the two groups of ``a``."""
    yhat = _binary(yhat, "yhat")
    a = _binary(a, "a")
    if yhat.shape != a.shape:
        raise ValueError(f"yhat {yhat.shape} and a {a.shape} differ in length")
    group = a == 1
    if group.all() or not group.any():
        raise ValueError("discrimination needs both groups of the protected attribute")
    return float(abs(yhat[group].mean() - yhat[~group].mean()))


def knn_indices(X: Np2DArray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest rows of every row of ``X``.

    Distances are Euclidean, a row is never its own neighbour and ties are broken
    by the lower row index.

    Parameters
    ----------
    X: np.ndarray
        Feature matrix, shape (n, d).
    k: int
        Number of neighbours, 1 <= k < n.

    Returns
    -------
    indices: np.ndarray
        Integer array of shape (n, k), neighbours ordered by distance then index.

    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"knn needs 1 <= k < n, got k={k} for n={n}")
    indices = np.empty((n, k), dtype=int)
    for start in range(0, n, KNN_CHUNK):
        dist = cdist(X[start : start + KNN_CHUNK], X)
        rows = np.arange(dist.shape[0])
        dist[rows, rows + start] = np.inf
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1]
        for i in rows:
            candidates = np.flatnonzero(dist[i] <= kth[i])
            order = np.lexsort((candidates, dist[i, candidates]))
            indices[start + i] = candidates[order[:k]]
    return indices


def consistency(yhat: Np1DArray, X: Np2DArray, k: int = 5) -> float:
    """One minus the mean gap between each prediction and its neighbours' mean."""
    yhat = _binary(yhat, "yhat")
    neighbours = knn_indices(X, k)
    if len(yhat) != neighbours.shape[0]:
        raise ValueError(f"{len(yhat)} predictions for {neighbours.shape[0]} rows")
    return float(1.0 - np.abs(yhat - yhat[neighbours].mean(axis=1)).mean())


def accuracy(yhat: Np1DArray, y: Np1DArray) -> float:
    """Fraction of predictions equal to the labels."""
    yhat, y = np.asarray(yhat), np.asarray(y)
    if yhat.shape != y.shape:
        raise ValueError(f"yhat {yhat.shape} and y {y.shape} differ in length")
    return float((yhat == y).mean())


def delta(accuracy: float, discriminations: list[float]) -> float:
    """Accuracy minus the mean discrimination over the protected attributes."""
    if len(discriminations) == 0:
        raise ValueError("delta needs at least one discrimination value")
    return float(accuracy - np.mean(discriminations))


class PredictionSet(GradBaseModel):
    """Predictions of one model on one split."""

    yhat: np.ndarray = Field(description="Predicted labels in {0, 1}")
    y: np.ndarray = Field(description="True labels in {0, 1}")
    A: np.ndarray = Field(description="Protected attributes in {0, 1}, shape (n, m)")
    X: np.ndarray = Field(description="Features for the neighbour search")
    protected: list[str] = Field(description="Names of the columns of A")
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def validate_lengths(self) -> "PredictionSet":
        n = len(self.yhat)
        if len(self.y) != n or self.A.shape[0] != n or self.X.shape[0] != n:
            raise ValueError("yhat, y, A and X must all have the same number of rows")
        if self.A.ndim != 2 or self.A.shape[1] != len(self.protected):
            raise ValueError(
                f"A has shape {self.A.shape} for protected attributes {self.protected}"
            )
        return self


class MetricsReport(GradBaseModel):
    """Accuracy, discrimination, delta and consistency of one model on one split."""

    accuracy: float = Field(description="Fraction of correct predictions")
    discrimination: dict[str, float] = Field(
        description="Discrimination per protected attribute"
    )
    delta: Optional[float] = Field(
        description="Accuracy minus the mean discrimination, None without attributes"
    )
    consistency: float = Field(description="k-NN consistency of the predictions")
    n: int = Field(description="Number of rows evaluated")

    @property
    def mean_discrimination(self) -> float:
        values = list(self.discrimination.values())
        return float(np.mean(values)) if values else 0.0


def metrics_report(preds: PredictionSet, k: int = 5) -> MetricsReport:
    """Compute the four metrics of a prediction set."""
    acc = accuracy(preds.yhat, preds.y)
    discr = {
        name: discrimination(preds.yhat, preds.A[:, j])
        for j, name in enumerate(preds.protected)
    }
    return MetricsReport(
        accuracy=acc,
        discrimination=discr,
        delta=delta(acc, list(discr.values())) if discr else None,
        consistency=consistency(preds.yhat, preds.X, k),
        n=len(preds.yhat),
    )
