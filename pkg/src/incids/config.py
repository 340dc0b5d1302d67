"""Flat INI run configuration (a single ``[run]`` section)."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from .errors import ConfigError

SECTION = "run"


@dataclass
class RunConfig:
    # paths (relative paths resolve against the config file's directory)
    raw_csv: str = ""  # comma-separated; empty -> the synth output
    work_dir: str = "work"
    state_dir: str = "work/state"
    report_dir: str = "work/reports"
    label_column: str = "Label"
    benign_name: str = "Benign"
    drop_columns: str = "Timestamp,Flow ID,Src IP,Dst IP,Src Port"
    schema_policy: str = "intersect"

    seed: int = 7

    # synthetic dataset
    synth_attacks: int = 5
    synth_dims: int = 30
    synth_informative: int = 10
    synth_per_class: int = 2000
    synth_separation: float = 10.0
    synth_spread: float = 1.0
    synth_novel_name: str = "Infiltration"

    # preparation
    train_fraction: float = 0.5
    test_fraction: float = 0.3
    val_fraction: float = 0.2
    smote_k: int = 5
    smote_m: int = 10
    forest_trees: int = 100
    forest_max_depth: int = 0  # 0 -> unlimited
    feature_k: int = 20

    # detectors
    lof_k: int = 20
    lof_max_reference: int = 50_000
    target_fpr: float = 0.05
    hidden_widths: str = "96,32"
    dropout: float = 0.2
    train_lr: float = 0.001
    train_batch: int = 1024
    train_epochs: int = 50
    inc_lr: float = 0.001
    inc_batch: int = 64
    inc_epochs: int = 50

    # memory and gate
    reservoir_capacity: int = 10_000
    ring_capacity: int = 10_000
    gate_max_drop: float = 2.0
    retrain_trigger: int = 500
    gate_holdout_fraction: float = 0.3
    gate_mode: str = "per_class"

    # scenarios
    holdout_class: str = "Infiltration"  # empty -> no holdout
    false_alarm_rows: int = 500
    clock: str = "logical"  # logical | wall

    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        fr = (self.train_fraction, self.test_fraction, self.val_fraction)
        need(all(0 < f < 1 for f in fr) and abs(sum(fr) - 1) < 1e-9, "split fractions must be in (0,1) and sum to 1")
        need(self.smote_k >= 1 and self.smote_m >= 2, "smote_k >= 1 and smote_m >= 2 required")
        need(self.forest_trees >= 1 and self.forest_max_depth >= 0, "invalid forest settings")
        need(self.feature_k >= 1, "feature_k must be positive")
        need(self.lof_k >= 1 and self.lof_max_reference > self.lof_k, "invalid LOF settings")
        need(0 <= self.target_fpr < 1, "target_fpr must lie in [0, 1)")
        need(0 <= self.dropout < 1, "dropout must lie in [0, 1)")
        need(self.train_lr >= 0 and self.inc_lr >= 0, "learning rates must be non-negative")
        need(min(self.train_batch, self.train_epochs, self.inc_batch, self.inc_epochs) >= 1, "batch sizes and epochs must be positive")
        need(self.reservoir_capacity >= 1 and self.ring_capacity >= 1, "memory capacities must be positive")
        need(self.gate_max_drop >= 0 and self.retrain_trigger >= 1, "invalid gate settings")
        need(0 < self.gate_holdout_fraction < 1, "gate_holdout_fraction must lie in (0, 1)")
        need(self.gate_mode in ("per_class", "aggregate"), "gate_mode must be per_class or aggregate")
        need(self.schema_policy in ("strict", "intersect"), "schema_policy must be strict or intersect")
        need(self.clock in ("logical", "wall"), "clock must be logical or wall")
        need(self.synth_attacks >= 1 and self.synth_informative >= self.synth_attacks, "need synth_informative >= synth_attacks >= 1")
        need(self.synth_dims >= self.synth_informative, "synth_dims must be >= synth_informative")
        need(self.false_alarm_rows >= 1, "false_alarm_rows must be positive")
        try:
            self.hidden()
        except ValueError:
            raise ConfigError("hidden_widths must be comma-separated positive integers") from None

    def hidden(self) -> List[int]:
        widths = [int(w) for w in self.hidden_widths.split(",") if w.strip()]
        if any(w < 1 for w in widths):
            raise ValueError("non-positive width")
        return widths

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def work(self) -> Path:
        return self.path(self.work_dir)

    @property
    def state(self) -> Path:
        return self.path(self.state_dir)

    @property
    def reports(self) -> Path:
        return self.path(self.report_dir)

    def raw_paths(self) -> List[Path]:
        return [self.path(p.strip()) for p in self.raw_csv.split(",") if p.strip()]

    def dropped_columns(self) -> Tuple[str, ...]:
        return tuple(c.strip() for c in self.drop_columns.split(",") if c.strip())

    def to_ini(self) -> str:
        lines = [f"[{SECTION}]"]
        for f in fields(self):
            if f.name == "base_dir":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, raw: str):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {raw!r} as {kind}") from None
    return raw


def load_config(path, seed: Optional[int] = None, state_dir: Optional[str] = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " ")) from None
    if not parser.has_section(SECTION):
        raise ConfigError(f"{path}: missing [{SECTION}] section")
    known = {f.name: f for f in fields(RunConfig) if f.name != "base_dir"}
    values = {}
    for key, raw in parser.items(SECTION):
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(known[key], raw.strip())
    if seed is not None:
        values["seed"] = seed
    if state_dir is not None:
        values["state_dir"] = state_dir
    return RunConfig(**values, base_dir=path.resolve().parent)
