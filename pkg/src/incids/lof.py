"""Local Outlier Factor in novelty mode.

The reference set is normal traffic only (min-max scaled).  Queries are
scored against the reference set and never join it.  Neighbourhoods include
every point tied at the k-th distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError, NotFittedError
from .flowdata import FlowRecord

logger = logging.getLogger(__name__)

_CHUNK_ELEMS = 2_000_000


@dataclass
class LofVerdict:
    score: float
    is_anomaly: bool


@dataclass
class LofModel:
    reference_points: np.ndarray
    k: int
    k_distance: np.ndarray
    lrd: np.ndarray
    threshold: Optional[float] = None

    @property
    def dim(self) -> int:
        return self.reference_points.shape[1]

    def save(self, path) -> None:
        np.savez(
            path,
            reference_points=self.reference_points,
            k=np.int64(self.k),
            k_distance=self.k_distance,
            lrd=self.lrd,
            threshold=np.float64(np.nan if self.threshold is None else self.threshold),
        )

    @classmethod
    def load(cls, path) -> "LofModel":
        with np.load(path) as z:
            thr = float(z["threshold"])
            return cls(
                z["reference_points"].copy(), int(z["k"]), z["k_distance"].copy(), z["lrd"].copy(),
                None if np.isnan(thr) else thr,
            )


def _chunks(n_rows: int, n_ref: int):
    step = max(1, _CHUNK_ELEMS // max(n_ref, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(start + step, n_rows))


def _neighbourhood_stats(D: np.ndarray, k: int, kdist_ref: np.ndarray):
    """For each row of a query-to-reference distance block: the query's
    k-distance and its local reachability density."""
    kth = np.partition(D, k - 1, axis=1)[:, k - 1]
    in_nbhd = D <= kth[:, None]
    reach = np.where(in_nbhd, np.maximum(kdist_ref[None, :], D), 0.0)
    size = in_nbhd.sum(axis=1)
    lrd = size / reach.sum(axis=1)
    return kth, in_nbhd, size, lrd


def fit_lof(normal_train, k: int = 20, max_reference: int = 50_000, seed: int = 0) -> LofModel:
    """Store the reference set and precompute k-distances and lrds."""
    X = np.asarray(normal_train, dtype=np.float64)
    if X.ndim != 2:
        raise DataError("reference set must be a matrix")
    if not np.isfinite(X).all():
        raise DataError("reference set contains non-finite values")
    if k < 1:
        raise ValueError("k must be positive")
    if len(X) < k + 1:
        raise DataError(f"LOF needs at least k+1={k + 1} reference points, got {len(X)}")
    _, first = np.unique(X, axis=0, return_index=True)
    if len(first) < len(X):
        logger.warning("lof: dropping %d duplicate reference points", len(X) - len(first))
        X = X[np.sort(first)]
        if len(X) < k + 1:
            raise DataError("fewer than k+1 distinct reference points")
    if len(X) > max_reference:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(len(X), size=max_reference, replace=False))]

    n = len(X)
    kdist = np.empty(n)
    for sl in _chunks(n, n):
        D = cdist(X[sl], X)
        D[np.arange(D.shape[0]), np.arange(sl.start, sl.stop)] = np.inf
        kdist[sl] = np.partition(D, k - 1, axis=1)[:, k - 1]
    lrd = np.empty(n)
    for sl in _chunks(n, n):
        D = cdist(X[sl], X)
        D[np.arange(D.shape[0]), np.arange(sl.start, sl.stop)] = np.inf
        lrd[sl] = _neighbourhood_stats(D, k, kdist)[3]
    return LofModel(X, k, kdist, lrd)


def _matrix(m: LofModel, x) -> np.ndarray:
    if isinstance(x, FlowRecord):
        x = x.features
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != m.dim:
        raise DataError(f"expected {m.dim} features, got {x.shape[1]}")
    if not np.isfinite(x).all():
        raise DataError("query contains non-finite values")
    return x


def score_batch(m: LofModel, X) -> np.ndarray:
    X = _matrix(m, X)
    out = np.empty(len(X))
    for sl in _chunks(len(X), len(m.reference_points)):
        D = cdist(X[sl], m.reference_points)
        _, in_nbhd, size, lrd_q = _neighbourhood_stats(D, m.k, m.k_distance)
        mean_lrd = (in_nbhd * m.lrd[None, :]).sum(axis=1) / size
        out[sl] = mean_lrd / lrd_q
    return out


def score(m: LofModel, x) -> float:
    return float(score_batch(m, x)[0])


def reference_scores(m: LofModel) -> np.ndarray:
    """LOF of each reference point against the others (self excluded)."""
    X = m.reference_points
    n = len(X)
    out = np.empty(n)
    for sl in _chunks(n, n):
        D = cdist(X[sl], X)
        D[np.arange(D.shape[0]), np.arange(sl.start, sl.stop)] = np.inf
        _, in_nbhd, size, lrd_q = _neighbourhood_stats(D, m.k, m.k_distance)
        out[sl] = (in_nbhd * m.lrd[None, :]).sum(axis=1) / size / lrd_q
    return out


def calibrate_threshold(m: LofModel, validation_normals, target_fpr: float = 0.05) -> float:
    """Set the threshold to the (1 - target_fpr) quantile of validation scores."""
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError("target_fpr must lie in [0, 1)")
    scores = score_batch(m, validation_normals)
    if len(scores) == 0:
        raise DataError("no validation normals to calibrate on")
    m.threshold = float(np.quantile(scores, 1.0 - target_fpr))
    return m.threshold


def predict(m: LofModel, x) -> LofVerdict:
    if m.threshold is None:
        raise NotFittedError("LOF threshold has not been calibrated")
    s = score(m, x)
    return LofVerdict(s, s > m.threshold)


def predict_batch(m: LofModel, X):
    if m.threshold is None:
        raise NotFittedError("LOF threshold has not been calibrated")
    s = score_batch(m, X)
    return s, s > m.threshold
