"""CART trees and random forests with Mean-Decrease-in-Impurity importances.

The forest serves two roles: ranking features for selection, and the
offline-retrained baseline classifier.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .flowdata import ClassLabel, FlowRecord, LabeledDataset

logger = logging.getLogger(__name__)


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.dot(p, p))


def impurity_decrease(parent_counts, left_counts, right_counts) -> float:
    """Parent Gini minus the size-weighted Gini of the two children."""
    parent = np.asarray(parent_counts, dtype=np.float64)
    left = np.asarray(left_counts, dtype=np.float64)
    right = np.asarray(right_counts, dtype=np.float64)
    if not np.array_equal(left + right, parent):
        raise ValueError("children do not partition the parent")
    n, nl, nr = parent.sum(), left.sum(), right.sum()
    if nl == 0 or nr == 0:
        raise ValueError("empty child")
    return gini(parent) - (nl / n) * gini(left) - (nr / n) * gini(right)


@dataclass
class Leaf:
    distribution: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.distribution.sum())


@dataclass
class Internal:
    feature_index: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"
    node_impurity_decrease: float
    sample_fraction: float
    distribution: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.distribution.sum())


TreeNode = Union[Leaf, Internal]


@dataclass(frozen=True)
class TreeParams:
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    max_features_per_split: Optional[int] = None  # None -> every feature
    seed: int = 0


def _best_split_on_feature(x: np.ndarray, onehot: np.ndarray, parent_gini: float):
    """Best (gain, threshold) over midpoints of consecutive distinct values."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cand = np.flatnonzero(xs[1:] != xs[:-1])
    if len(cand) == 0:
        return -math.inf, 0.0
    cum = np.cumsum(onehot[order], axis=0)
    total = cum[-1]
    n = float(len(x))
    left = cum[cand]
    right = total - left
    nl = left.sum(axis=1)
    nr = right.sum(axis=1)
    g_left = 1.0 - ((left / nl[:, None]) ** 2).sum(axis=1)
    g_right = 1.0 - ((right / nr[:, None]) ** 2).sum(axis=1)
    gain = parent_gini - (nl / n) * g_left - (nr / n) * g_right
    best = int(np.argmax(gain))  # first maximum -> lowest threshold
    lo, hi = xs[cand[best]], xs[cand[best] + 1]
    thr = lo + (hi - lo) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(gain[best]), float(thr)


def fit_tree(X: np.ndarray, y: np.ndarray, n_classes: int, params: TreeParams = TreeParams(),
             rng: Optional[np.random.Generator] = None) -> TreeNode:
    """Greedy CART on Gini impurity.

    Splits are only made when they strictly reduce impurity.  Ties go to the
    lowest feature index, then the lowest threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DataError("cannot fit a tree on no rows")
    rng = rng if rng is not None else np.random.default_rng(params.seed)
    d = X.shape[1]
    mtry = d if params.max_features_per_split is None else max(1, min(d, params.max_features_per_split))
    total = float(len(y))
    onehot_all = np.eye(n_classes)[y]

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        counts = onehot_all[idx].sum(axis=0)
        if (
            len(idx) < params.min_samples_split
            or (params.max_depth is not None and depth >= params.max_depth)
            or np.count_nonzero(counts) <= 1
        ):
            return Leaf(counts)
        features = np.arange(d) if mtry == d else np.sort(rng.choice(d, size=mtry, replace=False))
        g_parent = gini(counts)
        Xn, oh = X[idx], onehot_all[idx]
        best_gain, best_f, best_thr = 0.0, -1, 0.0
        for j in features:
            gain, thr = _best_split_on_feature(Xn[:, j], oh, g_parent)
            if gain > best_gain:
                best_gain, best_f, best_thr = gain, int(j), thr
        if best_f < 0:
            return Leaf(counts)
        go_left = Xn[:, best_f] <= best_thr
        left = grow(idx[go_left], depth + 1)
        right = grow(idx[~go_left], depth + 1)
        return Internal(
            feature_index=best_f,
            threshold=best_thr,
            left=left,
            right=right,
            node_impurity_decrease=impurity_decrease(counts, left.distribution, right.distribution),
            sample_fraction=len(idx) / total,
            distribution=counts,
        )

    return grow(np.arange(len(y)), 0)


class FlatTree:
    """Array form of a tree for vectorised prediction."""

    def __init__(self, root: TreeNode):
        feats, thrs, lefts, rights, values = [], [], [], [], []

        def visit(node) -> int:
            i = len(feats)
            feats.append(-1)
            thrs.append(0.0)
            lefts.append(-1)
            rights.append(-1)
            values.append(int(np.argmax(node.distribution)))
            if isinstance(node, Internal):
                feats[i] = node.feature_index
                thrs[i] = node.threshold
                lefts[i] = visit(node.left)
                rights[i] = visit(node.right)
            return i

        visit(root)
        self.feature = np.asarray(feats, dtype=np.int64)
        self.threshold = np.asarray(thrs, dtype=np.float64)
        self.left = np.asarray(lefts, dtype=np.int64)
        self.right = np.asarray(rights, dtype=np.int64)
        self.value = np.asarray(values, dtype=np.int64)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            n = node[active]
            f = self.feature[n]
            go_left = X[active, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class ForestModel:
    trees: List[TreeNode]
    feature_count: int
    class_map: List[ClassLabel]
    bootstrap_seeds: List[int]
    max_features_per_split: int
    _flat: Optional[List[FlatTree]] = field(default=None, repr=False, compare=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def flat(self) -> List[FlatTree]:
        if self._flat is None:
            self._flat = [FlatTree(t) for t in self.trees]
        return self._flat

    def to_dict(self) -> dict:
        return {
            "feature_count": self.feature_count,
            "classes": [{"name": c.name, "id": c.id, "kind": c.kind} for c in self.class_map],
            "bootstrap_seeds": [int(s) for s in self.bootstrap_seeds],
            "max_features_per_split": self.max_features_per_split,
            "trees": [_node_to_dict(t) for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls(
            trees=[_node_from_dict(t) for t in d["trees"]],
            feature_count=d["feature_count"],
            class_map=[ClassLabel(c["name"], c["id"], c["kind"]) for c in d["classes"]],
            bootstrap_seeds=list(d["bootstrap_seeds"]),
            max_features_per_split=d["max_features_per_split"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "ForestModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _node_to_dict(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"type": "leaf", "distribution": node.distribution.tolist()}
    return {
        "type": "internal",
        "feature_index": node.feature_index,
        "threshold": node.threshold,
        "impurity_decrease": node.node_impurity_decrease,
        "sample_fraction": node.sample_fraction,
        "distribution": node.distribution.tolist(),
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d: dict) -> TreeNode:
    dist = np.asarray(d["distribution"], dtype=np.float64)
    if d["type"] == "leaf":
        return Leaf(dist)
    return Internal(
        d["feature_index"], d["threshold"], _node_from_dict(d["left"]), _node_from_dict(d["right"]),
        d["impurity_decrease"], d["sample_fraction"], dist,
    )


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    max_features_per_split: Optional[int] = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    seed: int = 0


def fit_forest(data: LabeledDataset, params: ForestParams = ForestParams()) -> ForestModel:
    if len(data) == 0:
        raise DataError("cannot fit a forest on no rows")
    X, y = data.X, data.y
    d = X.shape[1]
    mtry = params.max_features_per_split or int(math.ceil(math.sqrt(d)))
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(params.seed).spawn(params.n_trees)]
    trees = []
    for s in seeds:
        rng = np.random.default_rng(s)
        idx = rng.integers(0, len(y), size=len(y)) if params.bootstrap else np.arange(len(y))
        tp = TreeParams(params.max_depth, params.min_samples_split, mtry, s)
        trees.append(fit_tree(X[idx], y[idx], len(data.classes), tp, rng))
    return ForestModel(trees, d, list(data.classes), seeds, mtry)


def predict_forest_batch(f: ForestModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != f.feature_count:
        raise DataError(f"expected {f.feature_count} features, got {X.shape[1]}")
    votes = np.zeros((len(X), len(f.class_map)), dtype=np.int64)
    rows = np.arange(len(X))
    for t in f.flat:
        votes[rows, t.predict(X)] += 1
    return np.argmax(votes, axis=1)  # ties -> lowest class id


def predict_forest(f: ForestModel, x) -> ClassLabel:
    features = x.features if isinstance(x, FlowRecord) else np.asarray(x, dtype=np.float64)
    if features.ndim != 1:
        raise DataError("predict_forest takes a single record")
    return f.class_map[int(predict_forest_batch(f, features[None, :])[0])]


@dataclass
class ImportanceReport:
    scores: np.ndarray
    ranking: List[int]


def _tree_importance(node: TreeNode, out: np.ndarray) -> None:
    if isinstance(node, Internal):
        out[node.feature_index] += node.sample_fraction * node.node_impurity_decrease
        _tree_importance(node.left, out)
        _tree_importance(node.right, out)


def mdi_importances(f: ForestModel) -> ImportanceReport:
    raw = np.zeros(f.feature_count)
    for t in f.trees:
        per_tree = np.zeros(f.feature_count)
        _tree_importance(t, per_tree)
        raw += per_tree
    raw /= max(f.n_trees, 1)
    total = raw.sum()
    if total > 0:
        scores = raw / total
    else:
        logger.warning("forest has no splits; importances are all zero")
        scores = raw
    ranking = sorted(range(f.feature_count), key=lambda j: (-scores[j], j))
    return ImportanceReport(scores, ranking)


def select_top_k(r: ImportanceReport, k: int) -> List[int]:
    if k < 1 or k > len(r.scores):
        raise ValueError(f"k={k} outside 1..{len(r.scores)}")
    return list(r.ranking[:k])


def iter_internal(node: TreeNode):
    if isinstance(node, Internal):
        yield node
        yield from iter_internal(node.left)
        yield from iter_internal(node.right)
