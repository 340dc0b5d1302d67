"""Labeled network-flow datasets: CSV ingest, cleaning, balancing, splitting,
class holdout and synthetic generation.

Records are held column-wise: a float matrix ``X`` plus an integer label
vector ``y`` indexing into ``classes``.  Class id 0 is always the Benign
class.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError, SchemaError

logger = logging.getLogger(__name__)

BENIGN = "Benign"
ATTACK = "Attack"
UNLABELED = -1


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: Tuple[str, ...]
    label_column: str = "Label"

    def __post_init__(self):
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaError("duplicate feature names")
        if self.label_column in self.feature_names:
            raise SchemaError(f"label column {self.label_column!r} listed as a feature")

    @property
    def feature_count(self) -> int:
        return len(self.feature_names)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.label_column.encode())
        for name in self.feature_names:
            h.update(b"\0" + name.encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class ClassLabel:
    name: str
    id: int
    kind: str = ATTACK

    @property
    def is_benign(self) -> bool:
        return self.kind == BENIGN


@dataclass(frozen=True)
class FlowRecord:
    features: np.ndarray
    label: Optional[ClassLabel] = None


def make_classes(names: Sequence[str]) -> Tuple[ClassLabel, ...]:
    """Class map from names; the first name is the Benign class."""
    return tuple(
        ClassLabel(name, i, BENIGN if i == 0 else ATTACK) for i, name in enumerate(names)
    )


@dataclass
class LabeledDataset:
    """A schema, a feature matrix and per-row class ids.

    ``malformed`` marks rows that had a non-numeric feature cell at load time
    (their features are NaN and their label is ``UNLABELED``); ``clean`` drops
    them.  ``remap`` is set by ``holdout_class`` and maps the parent's class
    ids onto this dataset's ids.
    """

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    classes: Tuple[ClassLabel, ...]
    malformed: Optional[np.ndarray] = None
    remap: Optional[Dict[int, int]] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.schema.feature_count)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(self.X) != len(self.y):
            raise DataError("feature and label lengths differ")
        if self.malformed is None:
            self.malformed = np.zeros(len(self.y), dtype=bool)
        ids = [c.id for c in self.classes]
        if ids != list(range(len(ids))):
            raise SchemaError("class ids must be dense 0..C-1")
        if sum(c.is_benign for c in self.classes) != 1 or not self.classes[0].is_benign:
            raise SchemaError("exactly one Benign class, with id 0, is required")
        if len(self.y) and (self.y.max() >= len(self.classes) or self.y.min() < UNLABELED):
            raise SchemaError("label id outside class map")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def class_counts(self) -> Dict[ClassLabel, int]:
        counts = np.bincount(self.y[self.y >= 0], minlength=len(self.classes))
        return {c: int(counts[c.id]) for c in self.classes}

    def counts_by_name(self) -> Dict[str, int]:
        return {c.name: n for c, n in self.class_counts.items()}

    def label(self, key) -> ClassLabel:
        if isinstance(key, ClassLabel):
            key = key.name
        if isinstance(key, (int, np.integer)):
            return self.classes[int(key)]
        for c in self.classes:
            if c.name == key:
                return c
        raise DataError(f"unknown class {key!r}")

    def record(self, i: int) -> FlowRecord:
        lab = self.classes[self.y[i]] if self.y[i] >= 0 else None
        return FlowRecord(self.X[i].copy(), lab)

    def records(self) -> Iterable[FlowRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.schema, self.X[idx], self.y[idx], self.classes, self.malformed[idx]
        )

    def select_features(self, indices: Sequence[int]) -> "LabeledDataset":
        indices = list(indices)
        schema = FeatureSchema(
            tuple(self.schema.feature_names[j] for j in indices), self.schema.label_column
        )
        return LabeledDataset(schema, self.X[:, indices], self.y, self.classes, self.malformed)

    def with_classes(self, classes: Sequence[ClassLabel]) -> "LabeledDataset":
        """Same rows under an extended class map (ids must be a superset)."""
        return LabeledDataset(self.schema, self.X, self.y, tuple(classes), self.malformed)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.schema != self.schema:
            raise SchemaError("cannot concatenate datasets with different schemas")
        names = [c.name for c in self.classes]
        classes = list(self.classes)
        lookup = []
        for c in other.classes:
            if c.name not in names:
                names.append(c.name)
                classes.append(ClassLabel(c.name, len(classes), c.kind))
            lookup.append(names.index(c.name))
        lookup = np.asarray(lookup, dtype=np.int64)
        y_other = np.where(other.y >= 0, lookup[np.maximum(other.y, 0)], UNLABELED)
        return LabeledDataset(
            self.schema,
            np.vstack([self.X, other.X]),
            np.concatenate([self.y, y_other]),
            tuple(classes),
            np.concatenate([self.malformed, other.malformed]),
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.schema.digest().encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        h.update(",".join(f"{c.name}:{c.kind}" for c in self.classes).encode())
        return h.hexdigest()


def empty_like(d: LabeledDataset) -> LabeledDataset:
    return d.subset(np.zeros(0, dtype=np.int64))


# ---------------------------------------------------------------------------
# CSV ingest
# ---------------------------------------------------------------------------


def _read_table(path: Path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: no header row") from None
        rows = [row for row in reader if row]
    return header, rows


def load_csv(
    paths: Sequence,
    schema_policy: str = "intersect",
    label_column: str = "Label",
    benign_name: str = BENIGN,
    exclude_columns: Sequence[str] = (),
) -> LabeledDataset:
    """Read one or more flow CSVs into a single dataset.

    With ``intersect`` only the feature columns present in every file are
    kept; ``strict`` requires identical feature sets.  Rows whose feature
    cells do not parse as numbers (e.g. a header repeated mid-file) are kept
    and marked malformed so that ``clean`` can drop them.
    """
    if schema_policy not in ("strict", "intersect"):
        raise ValueError(f"unknown schema policy {schema_policy!r}")
    if not paths:
        raise SchemaError("no input files")
    excluded = set(exclude_columns)
    tables = []
    for p in paths:
        header, rows = _read_table(Path(p))
        if label_column not in header:
            raise SchemaError(f"{p}: missing label column {label_column!r}")
        tables.append((header, rows))

    feature_sets = [
        [h for h in header if h != label_column and h not in excluded] for header, _ in tables
    ]
    if schema_policy == "strict":
        if any(set(fs) != set(feature_sets[0]) for fs in feature_sets[1:]):
            raise SchemaError("input files have differing feature columns")
        names = feature_sets[0]
    else:
        common = set(feature_sets[0]).intersection(*map(set, feature_sets[1:]))
        names = [h for h in feature_sets[0] if h in common]
        dropped = sorted(set().union(*map(set, feature_sets)) - common)
        if dropped:
            logger.info("dropping %d columns not shared by all files: %s", len(dropped), dropped)
    schema = FeatureSchema(tuple(names), label_column)

    label_names: List[str] = [benign_name]
    benign_key = benign_name.lower()
    X_rows, y_rows, bad_rows = [], [], []
    for header, rows in tables:
        col = {h: i for i, h in enumerate(header)}
        feat_idx = [col[n] for n in names]
        lab_idx = col[label_column]
        for row in rows:
            try:
                vals = [float(row[i]) for i in feat_idx]
                lab = row[lab_idx].strip()
            except (ValueError, IndexError):
                X_rows.append([math.nan] * len(names))
                y_rows.append(UNLABELED)
                bad_rows.append(True)
                continue
            if lab.lower() == benign_key:
                lab_id = 0
            else:
                if lab not in label_names:
                    label_names.append(lab)
                lab_id = label_names.index(lab)
            X_rows.append(vals)
            y_rows.append(lab_id)
            bad_rows.append(False)

    return LabeledDataset(
        schema,
        np.asarray(X_rows, dtype=np.float64).reshape(-1, len(names)),
        np.asarray(y_rows, dtype=np.int64),
        make_classes(label_names),
        np.asarray(bad_rows, dtype=bool),
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(d: LabeledDataset, path, manifest_extra: Optional[dict] = None) -> Path:
    """Write ``d`` as CSV plus a ``<path>.manifest.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(d.schema.feature_names) + [d.schema.label_column])
        for row, lab in zip(d.X, d.y):
            w.writerow([_fmt(v) for v in row] + [d.classes[lab].name])
    manifest = {
        "schema": {
            "feature_names": list(d.schema.feature_names),
            "label_column": d.schema.label_column,
            "digest": d.schema.digest(),
        },
        "classes": [{"name": c.name, "id": c.id, "kind": c.kind} for c in d.classes],
        "counts": d.counts_by_name(),
        "rows": len(d),
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def manifest_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.name + ".manifest.json")


def read_csv(path, label_column: str = "Label") -> LabeledDataset:
    """Reload a dataset written by ``write_csv``, restoring its class map."""
    path = Path(path)
    d = load_csv([path], "strict", label_column)
    mpath = manifest_path(path)
    if not mpath.exists():
        return d
    manifest = json.loads(mpath.read_text())
    classes = tuple(ClassLabel(c["name"], c["id"], c["kind"]) for c in manifest["classes"])
    by_name = {c.name: c.id for c in classes}
    y = np.asarray([by_name[d.classes[i].name] for i in d.y], dtype=np.int64)
    return LabeledDataset(d.schema, d.X, y, classes, d.malformed)


# ---------------------------------------------------------------------------
# Cleaning, balancing, splitting
# ---------------------------------------------------------------------------


def clean(d: LabeledDataset) -> LabeledDataset:
    """Drop malformed rows, rows with NaN/inf features and exact duplicates."""
    keep = ~d.malformed & np.isfinite(d.X).all(axis=1) & (d.y >= 0)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return d.subset(idx)
    key = np.column_stack([d.X[idx], d.y[idx].astype(np.float64)])
    _, first = np.unique(key, axis=0, return_index=True)
    idx = idx[np.sort(first)]
    dropped = len(d) - len(idx)
    if dropped:
        logger.info("clean: dropped %d of %d rows", dropped, len(d))
    return d.subset(idx)


def balance_benign(d: LabeledDataset, seed: int) -> LabeledDataset:
    """Subsample Benign rows down to the largest attack-class count."""
    benign = np.flatnonzero(d.y == 0)
    attack_counts = np.bincount(d.y[d.y > 0], minlength=len(d.classes))[1:]
    if len(attack_counts) == 0 or attack_counts.max() == 0:
        raise DataError("balance_benign needs at least one populated attack class")
    target = int(attack_counts.max())
    if len(benign) <= target:
        return d
    rng = np.random.default_rng(seed)
    chosen = rng.choice(benign, size=target, replace=False)
    keep = np.sort(np.concatenate([np.flatnonzero(d.y != 0), chosen]))
    return d.subset(keep)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    test_fraction: float = 0.3
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.test_fraction, self.val_fraction)
        if any(not 0.0 < f < 1.0 for f in fr):
            raise ValueError("split fractions must lie in (0, 1)")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def split(d: LabeledDataset, spec: SplitSpec) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified train/test/val split; row order within each part follows ``d``."""
    rng = np.random.default_rng(spec.seed)
    parts: Tuple[list, list, list] = ([], [], [])
    for c in d.classes:
        rows = np.flatnonzero(d.y == c.id)
        n = len(rows)
        if n == 0:
            continue
        if n < 3:
            logger.warning("class %r has only %d rows; all assigned to train", c.name, n)
            parts[0].append(rows)
            continue
        rows = rows[rng.permutation(n)]
        n_train = int(round(spec.train_fraction * n))
        n_test = int(round(spec.test_fraction * n))
        n_test = min(n_test, n - n_train)
        parts[0].append(rows[:n_train])
        parts[1].append(rows[n_train : n_train + n_test])
        parts[2].append(rows[n_train + n_test :])
    out = []
    for chunks in parts:
        idx = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        out.append(d.subset(idx))
    return out[0], out[1], out[2]


def holdout_class(d: LabeledDataset, label) -> Tuple[LabeledDataset, LabeledDataset]:
    """Separate every row of one attack class from the rest of ``d``.

    ``held`` keeps ``d``'s class map.  ``remaining`` drops the class from its
    map, re-densifies ids and records the old->new mapping in ``remap``.
    """
    lab = d.label(label)
    if lab.is_benign:
        raise DataError("the Benign class cannot be held out")
    mask = d.y == lab.id
    if not mask.any():
        raise DataError(f"unknown class {lab.name!r}: no rows to hold out")
    kept = [c for c in d.classes if c.id != lab.id]
    remap = {c.id: i for i, c in enumerate(kept)}
    classes = tuple(ClassLabel(c.name, remap[c.id], c.kind) for c in kept)
    rest = np.flatnonzero(~mask)
    lookup = np.full(len(d.classes), UNLABELED, dtype=np.int64)
    for old, new in remap.items():
        lookup[old] = new
    y_rest = np.where(d.y[rest] >= 0, lookup[np.maximum(d.y[rest], 0)], UNLABELED)
    remaining = LabeledDataset(d.schema, d.X[rest], y_rest, classes, d.malformed[rest], remap)
    held = d.subset(np.flatnonzero(mask))
    return remaining, held


# ---------------------------------------------------------------------------
# Synthetic flows
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Gaussian class clusters.

    ``class_centers[c]`` gives the mean on ``informative_dims`` only; every
    other dimension is standard normal noise for every class.
    """

    n_classes: int
    dims: int
    per_class_count: int
    class_centers: List[List[float]]
    class_spreads: List[float]
    informative_dims: List[int]
    seed: int = 0
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        if self.n_classes < 1 or self.dims < 1 or self.per_class_count < 0:
            raise ValueError("n_classes and dims must be positive")
        if len(self.class_centers) != self.n_classes or len(self.class_spreads) != self.n_classes:
            raise ValueError("one center and one spread per class required")
        if any(not 0 <= j < self.dims for j in self.informative_dims):
            raise ValueError("informative_dims out of range")
        if len(set(self.informative_dims)) != len(self.informative_dims):
            raise ValueError("informative_dims must be distinct")
        if any(len(c) != len(self.informative_dims) for c in self.class_centers):
            raise ValueError("each center needs one coordinate per informative dim")
        if len({tuple(c) for c in self.class_centers}) != self.n_classes:
            raise ValueError("class centers must be distinct")
        if any(s <= 0 for s in self.class_spreads):
            raise ValueError("spreads must be positive")
        if self.class_names is None:
            self.class_names = [BENIGN] + [f"Attack-{i}" for i in range(1, self.n_classes)]
        if len(self.class_names) != self.n_classes:
            raise ValueError("one name per class required")


def synth_generate(spec: SynthSpec) -> LabeledDataset:
    rng = np.random.default_rng(spec.seed)
    schema = FeatureSchema(tuple(f"f{j:02d}" for j in range(spec.dims)))
    inf = np.asarray(spec.informative_dims, dtype=np.int64)
    blocks, labels = [], []
    for c in range(spec.n_classes):
        block = rng.standard_normal((spec.per_class_count, spec.dims))
        if len(inf):
            block[:, inf] = np.asarray(spec.class_centers[c]) + spec.class_spreads[c] * block[:, inf]
        blocks.append(block)
        labels.append(np.full(spec.per_class_count, c, dtype=np.int64))
    return LabeledDataset(
        schema,
        np.vstack(blocks) if blocks else np.zeros((0, spec.dims)),
        np.concatenate(labels),
        make_classes(spec.class_names),
    )


DEFAULT_ATTACK_NAMES = [
    "DDoS attacks-LOIC-HTTP",
    "DDoS attack-HOIC",
    "DoS attacks-Hulk",
    "Bot",
    "SSH-Bruteforce",
    "FTP-BruteForce",
    "SQL Injection",
    "Brute Force -XSS",
]


def separated_spec(
    n_attacks: int = 5,
    dims: int = 30,
    n_informative: int = 10,
    per_class_count: int = 1000,
    separation: float = 10.0,
    spread: float = 1.0,
    seed: int = 0,
    novel_name: str = "Infiltration",
) -> SynthSpec:
    """Benign at the origin, known attacks on orthogonal axes ``separation``
    spreads away, and one extra attack class (``novel_name``, last) placed on
    the far side of Benign from all the others.

    Seen only through Benign-vs-known-attack boundaries, the last class sits
    in Benign's half-space, so a classifier trained without it calls it
    Benign and the novelty detector has to catch it.
    """
    if n_attacks < 1 or n_attacks > n_informative:
        raise ValueError("need 1 <= n_attacks <= n_informative")
    rng = np.random.default_rng(seed)
    informative = sorted(rng.choice(dims, size=n_informative, replace=False).tolist())
    centers = [[0.0] * n_informative]
    for i in range(n_attacks):
        c = [0.0] * n_informative
        c[i] = separation * spread
        centers.append(c)
    away = -np.ones(n_informative)
    away = away / np.linalg.norm(away) * separation * spread
    centers.append(away.tolist())
    names = [BENIGN] + [
        DEFAULT_ATTACK_NAMES[i] if i < len(DEFAULT_ATTACK_NAMES) else f"Attack-{i + 1}"
        for i in range(n_attacks)
    ] + [novel_name]
    return SynthSpec(
        n_classes=n_attacks + 2,
        dims=dims,
        per_class_count=per_class_count,
        class_centers=centers,
        class_spreads=[spread] * (n_attacks + 2),
        informative_dims=informative,
        seed=seed,
        class_names=names,
    )
