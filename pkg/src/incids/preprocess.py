"""Feature scaling and Borderline-SMOTE rebalancing.

The standard scaler feeds the attack classifier, the min-max scaler feeds the
novelty detector.  Both are fitted on training rows only.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .flowdata import FlowRecord, LabeledDataset

logger = logging.getLogger(__name__)

ArrayOrRecord = Union[np.ndarray, FlowRecord]


def _as_matrix(x: ArrayOrRecord, width: int) -> tuple[np.ndarray, bool]:
    if isinstance(x, FlowRecord):
        x = x.features
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != width:
        raise DataError(f"expected {width} features, got {x.shape[1]}")
    return x, single


def _wrap(original: ArrayOrRecord, out: np.ndarray, single: bool):
    if single:
        out = out[0]
    if isinstance(original, FlowRecord):
        return FlowRecord(out, original.label)
    return out


def _training_matrix(train) -> np.ndarray:
    X = train.X if isinstance(train, LabeledDataset) else np.atleast_2d(np.asarray(train, float))
    if len(X) == 0:
        raise DataError("cannot fit a scaler on an empty training set")
    return X


@dataclass(frozen=True)
class StandardScalerParams:
    means: np.ndarray
    stds: np.ndarray
    schema_digest: str = ""

    def transform(self, x: ArrayOrRecord):
        X, single = _as_matrix(x, len(self.means))
        safe = np.where(self.stds > 0, self.stds, 1.0)
        out = np.where(self.stds > 0, (X - self.means) / safe, 0.0)
        return _wrap(x, out, single)

    def to_dict(self) -> dict:
        return {
            "kind": "standard",
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "schema_digest": self.schema_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StandardScalerParams":
        return cls(np.asarray(d["means"], float), np.asarray(d["stds"], float), d["schema_digest"])


@dataclass(frozen=True)
class MinMaxParams:
    mins: np.ndarray
    maxs: np.ndarray
    schema_digest: str = ""

    def transform(self, x: ArrayOrRecord):
        # Deliberately unclamped: novel traffic may exceed the training range.
        X, single = _as_matrix(x, len(self.mins))
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = np.where(span > 0, (X - self.mins) / safe, 0.0)
        return _wrap(x, out, single)

    def to_dict(self) -> dict:
        return {
            "kind": "minmax",
            "mins": self.mins.tolist(),
            "maxs": self.maxs.tolist(),
            "schema_digest": self.schema_digest,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxParams":
        return cls(np.asarray(d["mins"], float), np.asarray(d["maxs"], float), d["schema_digest"])


def _digest(train) -> str:
    return train.schema.digest() if isinstance(train, LabeledDataset) else ""


def fit_standard(train) -> StandardScalerParams:
    """Per-feature mean and population standard deviation."""
    X = _training_matrix(train)
    means = X.mean(axis=0)
    stds = X.std(axis=0)  # ddof=0
    return StandardScalerParams(means, stds, _digest(train))


def apply_standard(p: StandardScalerParams, x: ArrayOrRecord):
    return p.transform(x)


def fit_minmax(train) -> MinMaxParams:
    X = _training_matrix(train)
    return MinMaxParams(X.min(axis=0), X.max(axis=0), _digest(train))


def apply_minmax(p: MinMaxParams, x: ArrayOrRecord):
    return p.transform(x)


def scale_dataset(p, d: LabeledDataset) -> LabeledDataset:
    return replace(d, X=p.transform(d.X), malformed=d.malformed.copy(), remap=None)


def save_scalers(path, standard: StandardScalerParams, minmax: MinMaxParams) -> None:
    Path(path).write_text(
        json.dumps({"standard": standard.to_dict(), "minmax": minmax.to_dict()}, indent=1) + "\n"
    )


def load_scalers(path) -> tuple[StandardScalerParams, MinMaxParams]:
    d = json.loads(Path(path).read_text())
    return StandardScalerParams.from_dict(d["standard"]), MinMaxParams.from_dict(d["minmax"])


# ---------------------------------------------------------------------------
# Borderline-SMOTE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoteConfig:
    k_minority: int = 5
    m_danger: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.k_minority < 1 or self.m_danger < 2:
            raise ValueError("need k_minority >= 1 and m_danger >= 2")


def danger_mask(X: np.ndarray, y: np.ndarray, cls: int, m: int, tree: Optional[cKDTree] = None) -> np.ndarray:
    """DANGER points of class ``cls``: at least half, but not all, of their
    ``m`` nearest neighbours (over every class) belong to other classes."""
    tree = tree if tree is not None else cKDTree(X)
    rows = np.flatnonzero(y == cls)
    m_eff = min(m, len(X) - 1)
    _, nn = tree.query(X[rows], k=m_eff + 1)
    nn = np.atleast_2d(nn)[:, 1:]
    other = (y[nn] != cls).sum(axis=1)
    return (2 * other >= m_eff) & (other < m_eff)


def borderline_smote(train: LabeledDataset, cfg: SmoteConfig = SmoteConfig()) -> LabeledDataset:
    """Oversample every class up to the majority count (Borderline-SMOTE1).

    Originals are kept, in order; synthetic rows are appended class by class.
    Each synthetic point is ``x + lam * (x_nn - x)`` where ``x`` is a DANGER
    point of its class and ``x_nn`` one of its ``k_minority`` same-class
    neighbours.
    """
    counts = np.bincount(train.y, minlength=len(train.classes))
    present = np.flatnonzero(counts)
    if len(present) < 2:
        raise DataError("borderline_smote needs at least two populated classes")
    target = int(counts.max())
    rng = np.random.default_rng(cfg.seed)
    X, y = train.X, train.y
    tree = cKDTree(X)
    new_X, new_y = [], []
    for c in present:
        n_new = target - int(counts[c])
        if n_new == 0:
            continue
        name = train.classes[c].name
        if counts[c] < cfg.k_minority + 1:
            logger.warning("smote: class %r has %d rows (< k+1); skipped", name, counts[c])
            continue
        rows = np.flatnonzero(y == c)
        danger = rows[danger_mask(X, y, c, cfg.m_danger, tree)]
        if len(danger) == 0:
            logger.warning("smote: class %r has no DANGER points; sampling from all rows", name)
            danger = rows
        own = X[rows]
        _, nn = cKDTree(own).query(X[danger], k=cfg.k_minority + 1)
        nn = np.atleast_2d(nn)[:, 1:]
        base_pick = rng.integers(0, len(danger), size=n_new)
        nn_pick = rng.integers(0, cfg.k_minority, size=n_new)
        lam = rng.uniform(0.0, 1.0, size=n_new)[:, None]
        base = X[danger[base_pick]]
        neighbour = own[nn[base_pick, nn_pick]]
        new_X.append(base + lam * (neighbour - base))
        new_y.append(np.full(n_new, c, dtype=np.int64))
    if not new_X:
        return train
    return LabeledDataset(
        train.schema,
        np.vstack([X] + new_X),
        np.concatenate([y] + new_y),
        train.classes,
    )


def interpolate(x: np.ndarray, x_nn: np.ndarray, lam: float) -> np.ndarray:
    """Single SMOTE interpolation step."""
    return x + lam * (x_nn - x)
