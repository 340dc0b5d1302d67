"""Internal memory: per-attack rehearsal reservoirs, a FIFO ring of recent
normal traffic, the anomaly buffer and the frozen evaluation set."""

from __future__ import annotations

import json
import logging
import threading
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import DataError, SnapshotError
from .flowdata import (
    BENIGN,
    ClassLabel,
    FeatureSchema,
    LabeledDataset,
    make_classes,
    read_csv,
    write_csv,
)

logger = logging.getLogger(__name__)


class Reservoir:
    """Uniform reservoir sample (Algorithm R) of every record ever offered."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("reservoir capacity must be positive")
        self.capacity = capacity
        self.items: List[np.ndarray] = []
        self.seen = 0
        self._rng = rng

    def offer(self, record: np.ndarray) -> None:
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append(record)
            return
        j = int(self._rng.integers(0, self.seen))
        if j < self.capacity:
            self.items[j] = record

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class StoredAnomaly:
    features: np.ndarray
    score: float
    arrival: int


def _as_rows(records) -> np.ndarray:
    if isinstance(records, LabeledDataset):
        return records.X
    return np.atleast_2d(np.asarray(records, dtype=np.float64))


class MemoryStore:
    def __init__(self, schema: FeatureSchema, reservoir_capacity: int = 10_000,
                 ring_capacity: int = 10_000, rng_seed: int = 0):
        self.schema = schema
        self.reservoir_capacity = reservoir_capacity
        self.ring_capacity = ring_capacity
        self.rng_seed = rng_seed
        self.attack_reservoirs: Dict[str, Reservoir] = {}
        self.normal_ring: deque = deque(maxlen=ring_capacity)
        self.anomaly_buffer: List[StoredAnomaly] = []
        self._arrivals = 0
        self._frozen: Optional[LabeledDataset] = None
        self._frozen_hash: Optional[str] = None
        self._draw_rng = np.random.default_rng([rng_seed, 0])
        self._lock = threading.RLock()

    def _reservoir_rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, 1, zlib.crc32(name.encode())])

    # -- frozen evaluation set -------------------------------------------------

    def snapshot_test_set(self, d: LabeledDataset) -> None:
        with self._lock:
            if self._frozen is not None:
                raise SnapshotError("test set already snapshotted; call reset_test_set first")
            if len(d) == 0:
                logger.warning("snapshotting an empty test set")
            frozen = d.subset(np.arange(len(d)))  # fancy indexing copies
            frozen.X.setflags(write=False)
            frozen.y.setflags(write=False)
            self._frozen = frozen
            self._frozen_hash = frozen.content_hash()

    def reset_test_set(self) -> None:
        with self._lock:
            self._frozen = None
            self._frozen_hash = None

    @property
    def frozen_test_set(self) -> LabeledDataset:
        if self._frozen is None:
            raise SnapshotError("no test set snapshot")
        return self._frozen

    @property
    def frozen_test_hash(self) -> Optional[str]:
        return self._frozen_hash

    def verify_frozen(self) -> bool:
        return self._frozen is not None and self._frozen.content_hash() == self._frozen_hash

    # -- writes ----------------------------------------------------------------

    def store_attack_samples(self, label: ClassLabel, records) -> None:
        if label.is_benign:
            raise DataError("Benign records belong in the normal ring, not a reservoir")
        rows = _as_rows(records)
        with self._lock:
            res = self.attack_reservoirs.get(label.name)
            if res is None:
                res = self.attack_reservoirs[label.name] = Reservoir(
                    self.reservoir_capacity, self._reservoir_rng(label.name)
                )
            for row in rows:
                res.offer(np.array(row, dtype=np.float64))

    def store_normal(self, record) -> None:
        with self._lock:
            for row in _as_rows(record):
                self.normal_ring.append(np.array(row, dtype=np.float64))

    def store_anomaly(self, record, lof_score: float) -> int:
        with self._lock:
            feats = np.array(getattr(record, "features", record), dtype=np.float64).reshape(-1)
            self.anomaly_buffer.append(StoredAnomaly(feats, float(lof_score), self._arrivals))
            self._arrivals += 1
            return len(self.anomaly_buffer)

    def drain_anomalies(self, n: Optional[int] = None) -> List[StoredAnomaly]:
        """Remove and return the oldest ``n`` (default: all) buffered anomalies."""
        with self._lock:
            n = len(self.anomaly_buffer) if n is None else n
            out, self.anomaly_buffer = self.anomaly_buffer[:n], self.anomaly_buffer[n:]
            return out

    @property
    def anomaly_count(self) -> int:
        return len(self.anomaly_buffer)

    # -- reads -----------------------------------------------------------------

    def reservoir_rows(self, name: str) -> np.ndarray:
        res = self.attack_reservoirs.get(name)
        if res is None or not len(res):
            return np.zeros((0, self.schema.feature_count))
        return np.vstack(res.items)

    def ring_rows(self) -> np.ndarray:
        if not self.normal_ring:
            return np.zeros((0, self.schema.feature_count))
        return np.vstack(list(self.normal_ring))

    def draw_incremental_batch(self, new_class_label, anomaly_records=None) -> LabeledDataset:
        """Mix new-class anomalies with rehearsal samples of every old class.

        Each old class (and Benign) contributes ``min(n_anomalies, available)``
        records drawn without replacement; all anomalies are used.
        ``anomaly_records`` overrides the buffer contents (the engine passes
        the part it does not hold aside for evaluation).
        """
        with self._lock:
            if anomaly_records is None:
                anomaly_records = [a.features for a in self.anomaly_buffer]
            new_rows = _as_rows(anomaly_records) if len(anomaly_records) else np.zeros((0, 0))
            if len(new_rows) == 0:
                raise DataError("anomaly buffer is empty")
            ring = self.ring_rows()
            if len(ring) == 0:
                raise DataError("normal ring is empty")
            old = [(name, self.reservoir_rows(name)) for name in self.attack_reservoirs]
            old = [(name, rows) for name, rows in old if len(rows)]
            if not old:
                raise DataError("no populated attack reservoirs")
            target = len(new_rows)
            new_name = getattr(new_class_label, "name", str(new_class_label))
            names = [BENIGN] + [name for name, _ in old] + [new_name]
            blocks, labels = [], []
            for cid, rows in enumerate([ring] + [rows for _, rows in old]):
                take = min(target, len(rows))
                pick = np.sort(self._draw_rng.choice(len(rows), size=take, replace=False))
                blocks.append(rows[pick])
                labels.append(np.full(take, cid, dtype=np.int64))
            blocks.append(new_rows)
            labels.append(np.full(target, len(names) - 1, dtype=np.int64))
            return LabeledDataset(self.schema, np.vstack(blocks), np.concatenate(labels), make_classes(names))

    # -- persistence -----------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with self._lock:
            reservoirs = []
            for i, (name, res) in enumerate(self.attack_reservoirs.items()):
                fname = f"reservoir_{i:03d}.npy"
                np.save(directory / fname, self.reservoir_rows(name))
                reservoirs.append({
                    "name": name, "file": fname, "seen": res.seen,
                    "rng_state": res._rng.bit_generator.state,
                })
            np.save(directory / "normal_ring.npy", self.ring_rows())
            np.savez(
                directory / "anomalies.npz",
                features=np.vstack([a.features for a in self.anomaly_buffer])
                if self.anomaly_buffer else np.zeros((0, self.schema.feature_count)),
                scores=np.asarray([a.score for a in self.anomaly_buffer], dtype=np.float64),
                arrivals=np.asarray([a.arrival for a in self.anomaly_buffer], dtype=np.int64),
            )
            if self._frozen is not None:
                write_csv(self._frozen, directory / "frozen_test.csv")
            manifest = {
                "schema": list(self.schema.feature_names),
                "label_column": self.schema.label_column,
                "reservoir_capacity": self.reservoir_capacity,
                "ring_capacity": self.ring_capacity,
                "rng_seed": self.rng_seed,
                "arrivals": self._arrivals,
                "draw_rng_state": self._draw_rng.bit_generator.state,
                "reservoirs": reservoirs,
                "ring_count": len(self.normal_ring),
                "anomaly_count": len(self.anomaly_buffer),
                "frozen_test_hash": self._frozen_hash,
            }
            (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MemoryStore":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        schema = FeatureSchema(tuple(m["schema"]), m["label_column"])
        store = cls(schema, m["reservoir_capacity"], m["ring_capacity"], m["rng_seed"])
        store._arrivals = m["arrivals"]
        store._draw_rng.bit_generator.state = m["draw_rng_state"]
        for r in m["reservoirs"]:
            rng = np.random.default_rng()
            rng.bit_generator.state = r["rng_state"]
            res = Reservoir(store.reservoir_capacity, rng)
            res.items = [row.copy() for row in np.load(directory / r["file"])]
            res.seen = r["seen"]
            store.attack_reservoirs[r["name"]] = res
        for row in np.load(directory / "normal_ring.npy"):
            store.normal_ring.append(row.copy())
        with np.load(directory / "anomalies.npz") as z:
            for f, s, a in zip(z["features"], z["scores"], z["arrivals"]):
                store.anomaly_buffer.append(StoredAnomaly(f.copy(), float(s), int(a)))
        if m["frozen_test_hash"] is not None:
            store.snapshot_test_set(read_csv(directory / "frozen_test.csv", schema.label_column))
            if store._frozen_hash != m["frozen_test_hash"]:
                raise SnapshotError("frozen test set does not match its recorded hash")
        return store
