"""Detection engine.

Each record goes through the attack classifier first; anything it calls
Benign is checked by the novelty detector.  Novel records accumulate in
memory until a retrain is triggered, at which point a copy of the live
classifier is extended by one class, retrained on a rehearsal batch, and
published only if no old class loses more than ``max_recall_drop`` points
of recall on the stored test set.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import lof as lof_mod
from . import neural
from .errors import DataError, NotFittedError, SnapshotError, TrainingDivergedError
from .flowdata import ClassLabel, FlowRecord, LabeledDataset, empty_like, make_classes, read_csv, write_csv
from .lof import LofModel
from .memory import MemoryStore
from .neural import MlpModel, TrainConfig
from .preprocess import MinMaxParams, StandardScalerParams, load_scalers, save_scalers

logger = logging.getLogger(__name__)

GATE_SLACK = 1e-12


# ---------------------------------------------------------------------------
# Decisions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KnownAttack:
    label: ClassLabel
    probs: np.ndarray
    version: int = 0


@dataclass(frozen=True)
class Normal:
    lof_score: float
    version: int = 0


@dataclass(frozen=True)
class AnomalySuspected:
    lof_score: float
    buffer_count: int
    version: int = 0


Decision = Union[KnownAttack, Normal, AnomalySuspected]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    classes: List[str]
    per_class_recall: Dict[str, float]
    accuracy: float
    precision: float
    recall: float
    f1: float
    detection_rate: Optional[float]
    false_alarm_rate: Optional[float]
    confusion: List[List[int]]
    rows: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def compute_metrics(predictions, labels, class_names: Sequence[str], flagged=None) -> EvalReport:
    """Confusion-matrix metrics over class indices.

    ``flagged`` marks rows the full pipeline raised (an attack prediction or
    a novelty flag); by default any non-Benign prediction.  Index 0 is Benign.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(labels, dtype=np.int64)
    if len(pred) == 0:
        raise DataError("no predictions to score")
    if len(pred) != len(true):
        raise DataError("predictions and labels differ in length")
    C = len(class_names)
    flagged = pred != 0 if flagged is None else np.asarray(flagged, dtype=bool)
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    tp = np.diag(conf).astype(np.float64)
    recall_c = np.divide(tp, support, out=np.zeros(C), where=support > 0)
    precision_c = np.divide(tp, predicted, out=np.zeros(C), where=predicted > 0)
    denom = precision_c + recall_c
    f1_c = np.divide(2 * precision_c * recall_c, denom, out=np.zeros(C), where=denom > 0)
    w = support / support.sum()
    benign = true == 0
    attack = ~benign
    return EvalReport(
        classes=list(class_names),
        per_class_recall={class_names[c]: float(recall_c[c]) for c in range(C) if support[c] > 0},
        accuracy=float(tp.sum() / len(true)),
        precision=float(np.dot(w, precision_c)),
        recall=float(np.dot(w, recall_c)),
        f1=float(np.dot(w, f1_c)),
        detection_rate=float(flagged[attack].mean()) if attack.any() else None,
        false_alarm_rate=float(flagged[benign].mean()) if benign.any() else None,
        confusion=conf.tolist(),
        rows=int(len(true)),
    )


def recall_deltas(old: EvalReport, new: EvalReport) -> Dict[str, float]:
    """New minus old recall for every class of ``old``."""
    missing = set(old.per_class_recall) - set(new.per_class_recall)
    if missing:
        raise DataError(f"new report lacks old classes: {sorted(missing)}")
    return {c: new.per_class_recall[c] - r for c, r in old.per_class_recall.items()}


def gate_details(old: EvalReport, new: EvalReport, max_drop: float, mode: str = "per_class"):
    """(accept, worst class, worst delta).  ``max_drop`` is in percentage points."""
    if mode == "aggregate":
        delta = new.recall - old.recall
        return delta >= -max_drop / 100.0 - GATE_SLACK, "aggregate", delta
    deltas = recall_deltas(old, new)
    worst = min(deltas, key=lambda c: (deltas[c], c))
    return deltas[worst] >= -max_drop / 100.0 - GATE_SLACK, worst, deltas[worst]


def gate(old: EvalReport, new: EvalReport, X: float = 2.0, mode: str = "per_class") -> bool:
    return gate_details(old, new, X, mode)[0]


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------


class EventSink:
    """Append-only event log, optionally mirrored as NDJSON to a file."""

    def __init__(self, path=None):
        self.events: List[dict] = []
        self._path = Path(path) if path else None
        self._lock = threading.Lock()

    def emit(self, ts: str, kind: str, cls: Optional[str] = None, score: Optional[float] = None,
             version: int = 0, **extra) -> None:
        event = {"ts": ts, "kind": kind, "class": cls, "score": score, "version": version, **extra}
        with self._lock:
            self.events.append(event)
            if self._path is not None:
                with open(self._path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(event, sort_keys=True) + "\n")

    def of_kind(self, kind: str) -> List[dict]:
        return [e for e in self.events if e["kind"] == kind]


def wall_clock() -> str:
    return time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateConfig:
    max_recall_drop: float = 2.0
    retrain_trigger: int = 500
    holdout_fraction: float = 0.3
    mode: str = "per_class"

    def __post_init__(self):
        if self.max_recall_drop < 0 or self.retrain_trigger < 1:
            raise ValueError("need max_recall_drop >= 0 and retrain_trigger >= 1")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        if self.mode not in ("per_class", "aggregate"):
            raise ValueError(f"unknown gate mode {self.mode!r}")


@dataclass
class UpdateOutcome:
    accepted: bool
    old_report: EvalReport
    new_report: Optional[EvalReport]
    new_class_recall: Optional[float]
    reason: str
    new_class: str
    worst_class: Optional[str] = None
    worst_delta: Optional[float] = None
    version: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Published:
    """Everything a reader needs, swapped as one reference."""

    classifier: MlpModel
    baseline: EvalReport
    version: int


class Engine:
    def __init__(
        self,
        classifier: MlpModel,
        lof: LofModel,
        memory: MemoryStore,
        standard: StandardScalerParams,
        minmax: MinMaxParams,
        feature_idx: Sequence[int],
        gate_config: GateConfig = GateConfig(),
        incremental_config: TrainConfig = TrainConfig(),
        sink: Optional[EventSink] = None,
        clock: Callable[[], str] = wall_clock,
        seed: int = 0,
        auto_update: bool = True,
        background_updates: bool = False,
        eval_extension: Optional[LabeledDataset] = None,
        baseline: Optional[EvalReport] = None,
        version: int = 0,
    ):
        if lof.threshold is None:
            raise NotFittedError("LOF threshold must be calibrated before building an engine")
        if not classifier.output_classes[0].is_benign:
            raise DataError("classifier output 0 must be the Benign class")
        self.lof = lof
        self.memory = memory
        self.standard = standard
        self.minmax = minmax
        self.feature_idx = list(feature_idx)
        self.gate_config = gate_config
        self.incremental_config = incremental_config
        self.sink = sink if sink is not None else EventSink()
        self.clock = clock
        self.seed = seed
        self.auto_update = auto_update
        self.history: List[UpdateOutcome] = []
        self.archive: List[_Published] = []
        self.eval_extension = eval_extension
        self._update_counter = 0
        self._rng = np.random.default_rng([seed, 2])
        self._control = threading.RLock()
        self._swap_lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=1) if background_updates else None
        self._pending: Optional[Future] = None
        if baseline is None:
            baseline = self._evaluate_with(classifier)
        self._live = _Published(classifier, baseline, version)

    # -- published state --------------------------------------------------------

    @property
    def classifier(self) -> MlpModel:
        return self._live.classifier

    @property
    def baseline_report(self) -> EvalReport:
        return self._live.baseline

    @property
    def version(self) -> int:
        return self._live.version

    def snapshot(self) -> _Published:
        return self._live

    # -- decision pipeline ------------------------------------------------------

    def _decide(self, model: MlpModel, X_full: np.ndarray):
        """Class index, novelty flag and LOF score (NaN where not consulted)."""
        X = X_full[:, self.feature_idx]
        pred, probs = neural.predict_batch(model, self.standard.transform(X))
        scores = np.full(len(X), np.nan)
        novel = np.zeros(len(X), dtype=bool)
        benign = np.flatnonzero(pred == 0)
        if len(benign):
            s, flag = lof_mod.predict_batch(self.lof, self.minmax.transform(X[benign]))
            scores[benign] = s
            novel[benign] = flag
        return pred, probs, novel, scores

    def process(self, record, true_label=None) -> Decision:
        """Classify one record, updating memory and events on the benign path."""
        features = record.features if isinstance(record, FlowRecord) else record
        X_full = np.asarray(features, dtype=np.float64).reshape(1, -1)
        snap = self._live
        pred, probs, novel, scores = self._decide(snap.classifier, X_full)
        label = snap.classifier.output_classes[int(pred[0])]
        if not label.is_benign:
            self.sink.emit(self.clock(), "alarm", label.name, float(probs[0, pred[0]]), snap.version)
            return KnownAttack(label, probs[0], snap.version)
        score = float(scores[0])
        if not novel[0]:
            self.memory.store_normal(X_full)
            return Normal(score, snap.version)
        count = self.memory.store_anomaly(X_full[0], score)
        self.sink.emit(self.clock(), "warning", None, score, snap.version, buffer_count=count)
        if self.auto_update and count >= self.gate_config.retrain_trigger:
            self._schedule_update()
        return AnomalySuspected(score, count, snap.version)

    def inject_anomaly(self, record, score: float = float("nan")) -> int:
        """Force a record into the anomaly buffer, bypassing both detectors."""
        features = record.features if isinstance(record, FlowRecord) else record
        return self.memory.store_anomaly(np.asarray(features, dtype=np.float64), score)

    def _schedule_update(self) -> None:
        if self._executor is None:
            self.incremental_update()
            return
        with self._control:
            if self._pending is not None and not self._pending.done():
                return
            self._pending = self._executor.submit(self._background_update)

    def _background_update(self) -> Optional[UpdateOutcome]:
        # A previous update may have drained the buffer since this was queued.
        with self._control:
            if self.memory.anomaly_count < self.gate_config.retrain_trigger:
                return None
            return self.incremental_update()

    def wait_for_updates(self) -> None:
        pending = self._pending
        if pending is not None:
            pending.result()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    # -- evaluation -------------------------------------------------------------

    def evaluation_set(self) -> LabeledDataset:
        test = self.memory.frozen_test_set
        if self.eval_extension is not None and len(self.eval_extension):
            test = test.concat(self.eval_extension)
        return test

    def _evaluate_with(self, model: MlpModel, extra: Optional[LabeledDataset] = None) -> EvalReport:
        test = self.evaluation_set()
        if extra is not None:
            test = test.concat(extra)
        return evaluate(self, model, test)

    # -- incremental learning ---------------------------------------------------

    def _new_label_name(self) -> str:
        self._update_counter += 1
        return f"novel-{self.clock()}-{self._update_counter}"

    def incremental_update(self) -> UpdateOutcome:
        with self._control:
            M = self.gate_config.retrain_trigger
            if self.memory.anomaly_count < M:
                raise DataError(f"anomaly buffer holds {self.memory.anomaly_count} < {M} records")
            snap = self._live
            taken = list(self.memory.anomaly_buffer)
            name = self._new_label_name()
            rows = np.vstack([a.features for a in taken])
            order = self._rng.permutation(len(rows))
            n_eval = max(1, int(round(self.gate_config.holdout_fraction * len(rows))))
            eval_rows, train_rows = rows[np.sort(order[:n_eval])], rows[np.sort(order[n_eval:])]

            outcome, candidate = self._train_and_gate(snap, name, train_rows, eval_rows)
            self.memory.drain_anomalies(len(taken))
            if outcome.accepted:
                label = self.swap_model(candidate, outcome.new_report)
                self.memory.store_attack_samples(label, train_rows)
                self._extend_eval_set(label.name, eval_rows)
                outcome.version = self.version
                self.sink.emit(self.clock(), "update_accepted", name, outcome.new_class_recall, self.version)
            else:
                outcome.version = snap.version
                self.sink.emit(self.clock(), "update_rejected", name, outcome.worst_delta, snap.version,
                               reason=outcome.reason)
            self.history.append(outcome)
            logger.info("update %s: %s (%s)", name, "accepted" if outcome.accepted else "rejected", outcome.reason)
            return outcome

    def _train_and_gate(self, snap: _Published, name: str, train_rows, eval_rows) -> UpdateOutcome:
        batch = self.memory.draw_incremental_batch(name, train_rows)
        batch = batch.select_features(self.feature_idx)
        batch = replace(batch, X=self.standard.transform(batch.X), malformed=None)
        candidate = neural.extend_classes(snap.classifier, [name])
        old = snap.baseline
        try:
            candidate = neural.train(candidate, batch, self.incremental_config).final_model
        except TrainingDivergedError as exc:
            return UpdateOutcome(False, old, None, None, f"training diverged: {exc}", name), None
        held = self._labeled_rows(name, eval_rows)
        new = self._evaluate_with(candidate, held)
        accept, worst, delta = gate_details(old, new, self.gate_config.max_recall_drop, self.gate_config.mode)
        if accept:
            reason = f"worst old-class change {worst} {100 * delta:+.2f} points within -{self.gate_config.max_recall_drop} allowed"
        else:
            reason = f"recall of {worst} changed {100 * delta:+.2f} points, beyond -{self.gate_config.max_recall_drop} allowed"
        outcome = UpdateOutcome(accept, old, new, new.per_class_recall.get(name), reason, name, worst, delta)
        return outcome, candidate

    def _labeled_rows(self, name: str, rows: np.ndarray) -> LabeledDataset:
        test = self.memory.frozen_test_set
        y = np.ones(len(rows), dtype=np.int64)
        return LabeledDataset(test.schema, rows, y, make_classes([test.classes[0].name, name]))

    def _extend_eval_set(self, name: str, rows: np.ndarray) -> None:
        held = self._labeled_rows(name, rows)
        self.eval_extension = held if self.eval_extension is None else self.eval_extension.concat(held)

    def swap_model(self, candidate: MlpModel, report: Optional[EvalReport] = None) -> ClassLabel:
        """Atomically publish ``candidate``; the old snapshot is archived."""
        with self._swap_lock:
            old = self._live
            baseline = report if report is not None else old.baseline
            self.archive.append(old)
            self._live = _Published(candidate, baseline, old.version + 1)
        return candidate.output_classes[-1]

    def rollback(self) -> None:
        with self._swap_lock:
            if not self.archive:
                raise DataError("no archived model to roll back to")
            self._live = self.archive.pop()

    # -- persistence -----------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self._control:
            snap = self._live
            snap.classifier.save(directory / "classifier.npz")
            self.lof.save(directory / "lof.npz")
            save_scalers(directory / "scalers.json", self.standard, self.minmax)
            self.memory.save(directory / "memory")
            if self.eval_extension is not None:
                write_csv(self.eval_extension, directory / "eval_extension.csv")
            manifest = {
                "version": snap.version,
                "feature_idx": self.feature_idx,
                "gate": asdict(self.gate_config),
                "incremental": asdict(self.incremental_config),
                "baseline_report": snap.baseline.to_dict(),
                "update_counter": self._update_counter,
                "seed": self.seed,
                "rng_state": self._rng.bit_generator.state,
                "has_eval_extension": self.eval_extension is not None,
            }
            (directory / "engine.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, sink: Optional[EventSink] = None, clock: Callable[[], str] = wall_clock,
             **kwargs) -> "Engine":
        directory = Path(directory)
        m = json.loads((directory / "engine.json").read_text())
        standard, minmax = load_scalers(directory / "scalers.json")
        ext = read_csv(directory / "eval_extension.csv") if m["has_eval_extension"] else None
        engine = cls(
            neural.MlpModel.load(directory / "classifier.npz"),
            LofModel.load(directory / "lof.npz"),
            MemoryStore.load(directory / "memory"),
            standard,
            minmax,
            m["feature_idx"],
            GateConfig(**m["gate"]),
            TrainConfig(**m["incremental"]),
            sink,
            clock,
            m["seed"],
            eval_extension=ext,
            baseline=EvalReport.from_dict(m["baseline_report"]),
            version=m["version"],
            **kwargs,
        )
        engine._update_counter = m["update_counter"]
        engine._rng.bit_generator.state = m["rng_state"]
        return engine


def evaluate(engine: Engine, model: MlpModel, test: LabeledDataset) -> EvalReport:
    """Run the full decision pipeline (no memory writes, no events) over ``test``."""
    if test is None:
        raise SnapshotError("no frozen test set")
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    names = [c.name for c in model.output_classes]
    index = {n: i for i, n in enumerate(names)}
    lookup = np.asarray([index.get(c.name, -1) for c in test.classes], dtype=np.int64)
    true = lookup[test.y]
    if (true < 0).any():
        raise DataError("test set contains classes unknown to the model")
    pred, _, novel, _ = engine._decide(model, test.X)
    flagged = (pred != 0) | novel
    return compute_metrics(pred, true, names, flagged)
