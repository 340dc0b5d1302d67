"""Feed-forward softmax classifier trained with Adam, extensible by whole
output classes.

Default shape is input -> 96 -> 32 -> C with ReLU and dropout 0.2 after each
hidden layer.  New output units start at zero so that, before retraining,
the logits of existing classes are exactly those of the parent model.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, TrainingDivergedError
from .flowdata import ATTACK, ClassLabel, FlowRecord, LabeledDataset

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
FORMAT_VERSION = 1


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    biases: np.ndarray
    activation: str = "relu"


@dataclass
class MlpModel:
    layers: List[Layer]
    output_classes: List[ClassLabel]
    dropout_rate: float = 0.2
    rng_seed: int = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.output_classes)

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.biases])
        return out

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def class_index(self, name: str) -> int:
        for i, c in enumerate(self.output_classes):
            if c.name == name:
                return i
        raise DataError(f"class {name!r} not in the model's class map")

    def save(self, path) -> None:
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays[f"W{i}"] = layer.weights
            arrays[f"b{i}"] = layer.biases
        meta = {
            "version": FORMAT_VERSION,
            "activations": [layer.activation for layer in self.layers],
            "classes": [{"name": c.name, "id": c.id, "kind": c.kind} for c in self.output_classes],
            "dropout_rate": self.dropout_rate,
            "rng_seed": self.rng_seed,
        }
        np.savez(path, meta=np.asarray(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            if meta["version"] != FORMAT_VERSION:
                raise DataError(f"unsupported model format {meta['version']}")
            layers = [
                Layer(z[f"W{i}"].copy(), z[f"b{i}"].copy(), act)
                for i, act in enumerate(meta["activations"])
            ]
        classes = [ClassLabel(c["name"], c["id"], c["kind"]) for c in meta["classes"]]
        return cls(layers, classes, meta["dropout_rate"], meta["rng_seed"])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 1024
    epochs: int = 50
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("invalid training configuration")


@dataclass
class TrainingOutcome:
    final_model: MlpModel
    loss_curve: List[float]
    wall_time: float


def init_model(input_dim: int, hidden_widths: Sequence[int], n_classes, seed: int = 0,
               dropout_rate: float = 0.2) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``n_classes`` may be a count or a list of ClassLabel.
    """
    if isinstance(n_classes, int):
        classes = [ClassLabel(f"class-{i}", i) for i in range(n_classes)]
    else:
        classes = list(n_classes)
    widths = [input_dim, *hidden_widths, len(classes)]
    if min(widths) < 1:
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        act = "identity" if i == len(widths) - 2 else "relu"
        layers.append(Layer(rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out), act))
    return MlpModel(layers, classes, dropout_rate, seed)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_width(m: MlpModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != m.input_dim:
        raise DataError(f"expected {m.input_dim} features, got {X.shape[1]}")
    return X


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(z, 0.0) if kind == "relu" else z


def _forward_cache(m: MlpModel, X: np.ndarray, rng: Optional[np.random.Generator]):
    """Layer inputs, pre-activations and dropout masks (``rng=None`` -> no dropout)."""
    inputs, pre, masks = [], [], []
    a = X
    last = len(m.layers) - 1
    for i, layer in enumerate(m.layers):
        inputs.append(a)
        z = a @ layer.weights + layer.biases
        pre.append(z)
        if i == last:
            break
        a = _activate(z, layer.activation)
        if rng is not None and m.dropout_rate > 0:
            keep = 1.0 - m.dropout_rate
            mask = (rng.random(a.shape) < keep) / keep
            a = a * mask
            masks.append(mask)
        else:
            masks.append(None)
    return inputs, pre, masks


def logits(m: MlpModel, X) -> np.ndarray:
    """Infer-mode pre-softmax outputs."""
    X = _check_width(m, X)
    return _forward_cache(m, X, None)[1][-1]


def forward(m: MlpModel, batch, mode: str = "infer", rng: Optional[np.random.Generator] = None) -> np.ndarray:
    X = _check_width(m, batch)
    if mode == "train":
        rng = rng if rng is not None else np.random.default_rng(m.rng_seed)
    elif mode == "infer":
        rng = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return softmax(_forward_cache(m, X, rng)[1][-1])


def loss(probs: np.ndarray, one_hot_labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(one_hot_labels, dtype=np.float64)
    if probs.shape != y.shape:
        raise DataError("probability and label shapes differ")
    p_true = np.maximum((probs * y).sum(axis=1), PROB_FLOOR)
    return float(np.mean(-np.log(p_true)))


def gradients(m: MlpModel, X, one_hot, rng: Optional[np.random.Generator] = None):
    """Loss and exact parameter gradients, ordered like ``m.params()``."""
    X = _check_width(m, X)
    inputs, pre, masks = _forward_cache(m, X, rng)
    probs = softmax(pre[-1])
    value = loss(probs, one_hot)
    dz = (probs - one_hot) / len(X)
    grads: List[np.ndarray] = []
    for i in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[i]
        grads.append(dz.sum(axis=0))
        grads.append(inputs[i].T @ dz)
        if i == 0:
            break
        da = dz @ layer.weights.T
        if masks[i - 1] is not None:
            da = da * masks[i - 1]
        prev = m.layers[i - 1]
        dz = da * (pre[i - 1] > 0) if prev.activation == "relu" else da
    grads.reverse()
    return value, grads


def _lookup_safe(m: MlpModel, data: LabeledDataset) -> np.ndarray:
    names = {c.name for c in m.output_classes}
    present = {data.classes[i].name for i in np.unique(data.y)} if len(data) else set()
    missing = present - names
    if missing:
        raise DataError(f"labels outside the class map: {sorted(missing)}")
    idx = {c.name: i for i, c in enumerate(m.output_classes)}
    lookup = np.asarray([idx.get(c.name, -1) for c in data.classes], dtype=np.int64)
    return lookup[data.y]


def train(m: MlpModel, data: LabeledDataset, cfg: TrainConfig = TrainConfig()) -> TrainingOutcome:
    """Mini-batch Adam on categorical cross-entropy.

    ``loss_curve[e]`` is the infer-mode loss over the whole training set after
    epoch ``e``.  Returns a new model; ``m`` is left untouched.
    """
    t0 = time.perf_counter()
    if len(data) == 0:
        raise DataError("no training rows")
    model = m.copy()
    X = _check_width(model, data.X)
    targets = np.eye(model.n_classes)[_lookup_safe(model, data)]
    shuffle_rng = np.random.default_rng([cfg.shuffle_seed, 0])
    dropout_rng = np.random.default_rng([model.rng_seed, cfg.shuffle_seed, 1])
    params = model.params()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    step = 0
    curve = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = gradients(model, X[idx], targets[idx], dropout_rng)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - b2**step) / (1 - b1**step)
            for p, g, s1, s2 in zip(params, grads, m1, m2):
                s1 *= b1
                s1 += (1 - b1) * g
                s2 *= b2
                s2 += (1 - b2) * g * g
                p -= lr_t * s1 / (np.sqrt(s2) + cfg.adam_eps)
        epoch_loss = loss(forward(model, X), targets)
        if not np.isfinite(epoch_loss) or not all(np.isfinite(p).all() for p in params):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        curve.append(epoch_loss)
        logger.debug("epoch %d loss %.6f", epoch, epoch_loss)
    return TrainingOutcome(model, curve, time.perf_counter() - t0)


def predict_batch(m: MlpModel, X) -> Tuple[np.ndarray, np.ndarray]:
    """Output-index predictions (ties -> lowest index) and probabilities."""
    probs = forward(m, X)
    return np.argmax(probs, axis=1), probs


def predict(m: MlpModel, x) -> Tuple[ClassLabel, np.ndarray]:
    features = x.features if isinstance(x, FlowRecord) else x
    idx, probs = predict_batch(m, np.asarray(features, dtype=np.float64)[None, :])
    return m.output_classes[int(idx[0])], probs[0]


def extend_classes(m: MlpModel, new_labels: Sequence) -> MlpModel:
    """Copy of ``m`` with one zero-initialised output unit per new label."""
    existing = {c.name for c in m.output_classes}
    names = [lab.name if isinstance(lab, ClassLabel) else str(lab) for lab in new_labels]
    if len(set(names)) != len(names) or existing & set(names):
        raise DataError("new labels must be distinct and absent from the class map")
    out = m.copy()
    if not names:
        return out
    last = out.layers[-1]
    extra = len(names)
    last.weights = np.hstack([last.weights, np.zeros((last.weights.shape[0], extra))])
    last.biases = np.concatenate([last.biases, np.zeros(extra)])
    base = len(out.output_classes)
    out.output_classes = out.output_classes + [
        ClassLabel(name, base + i, ATTACK) for i, name in enumerate(names)
    ]
    return out


def gradient_check(m: MlpModel, batch, labels, n_params: int = 200, step: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients
    over a random sample of parameters (dropout off).

    ``labels`` is either a one-hot matrix or a vector of output indices.
    """
    X = _check_width(m, batch)
    labels = np.asarray(labels)
    Y = labels if labels.ndim == 2 else np.eye(m.n_classes)[labels]
    model = m.copy()
    _, grads = gradients(model, X, Y)
    params = model.params()
    sizes = np.asarray([p.size for p in params])
    rng = np.random.default_rng(seed)
    flat_choice = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat_choice:
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        p, g = params[t].reshape(-1), grads[t].reshape(-1)
        j = int(f - offsets[t])
        orig = p[j]
        p[j] = orig + step
        up = loss(forward(model, X), Y)
        p[j] = orig - step
        down = loss(forward(model, X), Y)
        p[j] = orig
        numeric = (up - down) / (2 * step)
        analytic = g[j]
        denom = max(abs(numeric) + abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
