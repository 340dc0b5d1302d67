"""The end-to-end commands behind the CLI.

Every command reads its inputs from, and writes its artifacts under, the
directories named in the RunConfig.  Reports are JSON (plus a text
rendering) and contain nothing run-dependent, so identical configs give
byte-identical reports; wall-clock timings go to a separate file.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import flowdata as fd
from . import forest as fr
from . import lof as lof_mod
from . import neural
from . import preprocess as pp
from .config import RunConfig
from .engine import (
    AnomalySuspected,
    Engine,
    EvalReport,
    EventSink,
    GateConfig,
    KnownAttack,
    Normal,
    compute_metrics,
    evaluate,
    recall_deltas,
    wall_clock,
)
from .errors import ConfigError, DataError, ScenarioError
from .memory import MemoryStore

logger = logging.getLogger(__name__)

# Per-stage seed offsets from the master seed.
_SEED_SYNTH, _SEED_BALANCE, _SEED_SPLIT, _SEED_SMOTE, _SEED_FOREST = 0, 1, 2, 3, 4
_SEED_MODEL, _SEED_SHUFFLE, _SEED_MEMORY, _SEED_ENGINE, _SEED_OFFLINE = 5, 6, 7, 8, 9


class LogicalClock:
    """Deterministic event timestamps: a per-process call counter."""

    def __init__(self):
        self._n = itertools.count()

    def __call__(self) -> str:
        return f"L{next(self._n):08d}"


def make_clock(cfg: RunConfig):
    return LogicalClock() if cfg.clock == "logical" else wall_clock


@dataclass
class ScenarioReport:
    scenario: str
    pre_report: Optional[dict] = None
    post_report: Optional[dict] = None
    recall_deltas: Dict[str, float] = field(default_factory=dict)
    update_outcome: Optional[dict] = None
    holdout_anomaly_rate: Optional[float] = None
    offline_report: Optional[dict] = None
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Artifact locations
# ---------------------------------------------------------------------------


def _prepared(cfg: RunConfig) -> Path:
    return cfg.work / "prepared"


def _holdout_dir(cfg: RunConfig) -> Path:
    return cfg.work / "holdout"


def _state_after_holdout(cfg: RunConfig) -> Path:
    return cfg.work / "state_after_holdout"


def synth_csv(cfg: RunConfig) -> Path:
    return cfg.work / "raw" / "synth.csv"


def _rel(cfg: RunConfig, p: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(cfg.base_dir.resolve()))
    except ValueError:
        return str(p)


def write_report(cfg: RunConfig, name: str, report: dict, timings: Optional[dict] = None) -> Path:
    cfg.reports.mkdir(parents=True, exist_ok=True)
    path = cfg.reports / f"{name}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (cfg.reports / f"{name}.txt").write_text(render_report(report))
    if timings is not None:
        (cfg.reports / f"{name}.timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return path


def _read_report(cfg: RunConfig, name: str) -> dict:
    path = cfg.reports / f"{name}.json"
    if not path.exists():
        raise DataError(f"missing prerequisite report {name}.json; run that command first")
    return json.loads(path.read_text())


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def synth_spec(cfg: RunConfig) -> fd.SynthSpec:
    return fd.separated_spec(
        n_attacks=cfg.synth_attacks,
        dims=cfg.synth_dims,
        n_informative=cfg.synth_informative,
        per_class_count=cfg.synth_per_class,
        separation=cfg.synth_separation,
        spread=cfg.synth_spread,
        seed=cfg.seed + _SEED_SYNTH,
        novel_name=cfg.synth_novel_name,
    )


def cmd_synth(cfg: RunConfig) -> Path:
    t0 = time.perf_counter()
    spec = synth_spec(cfg)
    d = fd.synth_generate(spec)
    out = fd.write_csv(d, synth_csv(cfg), {"synth_spec": asdict(spec)})
    report = {
        "command": "synth",
        "output": _rel(cfg, out),
        "rows": len(d),
        "counts": d.counts_by_name(),
        "informative_dims": spec.informative_dims,
        "seed": spec.seed,
    }
    return write_report(cfg, "synth", report, {"seconds": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig) -> Path:
    """load -> clean -> balance Benign -> split -> SMOTE(train, val) ->
    forest MDI -> top-k features -> fit scalers on train."""
    timings = {}
    t0 = time.perf_counter()
    paths = cfg.raw_paths() or [_need(synth_csv(cfg), "synthetic dataset (run synth)")]
    for p in paths:
        _need(p, "raw CSV")
    raw = fd.load_csv(paths, cfg.schema_policy, cfg.label_column, cfg.benign_name, cfg.dropped_columns())
    cleaned = fd.clean(raw)
    if len(cleaned) == 0:
        raise DataError("dataset is empty after cleaning")
    balanced = fd.balance_benign(cleaned, cfg.seed + _SEED_BALANCE)
    train, test, val = fd.split(
        balanced, fd.SplitSpec(cfg.train_fraction, cfg.test_fraction, cfg.val_fraction, cfg.seed + _SEED_SPLIT)
    )
    smote = pp.SmoteConfig(cfg.smote_k, cfg.smote_m, cfg.seed + _SEED_SMOTE)
    train_bal = pp.borderline_smote(train, smote)
    val_bal = pp.borderline_smote(val, pp.SmoteConfig(cfg.smote_k, cfg.smote_m, cfg.seed + _SEED_SMOTE + 100))
    timings["load_clean_split_smote"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    forest = fr.fit_forest(train_bal, fr.ForestParams(
        n_trees=cfg.forest_trees,
        max_depth=cfg.forest_max_depth or None,
        seed=cfg.seed + _SEED_FOREST,
    ))
    importance = fr.mdi_importances(forest)
    k = min(cfg.feature_k, train_bal.schema.feature_count)
    if k < cfg.feature_k:
        logger.warning("only %d features available; selecting all", k)
    selected = fr.select_top_k(importance, k)
    timings["forest_mdi"] = time.perf_counter() - t1

    train_sel = train_bal.select_features(selected)
    standard, minmax = pp.fit_standard(train_sel), pp.fit_minmax(train_sel)

    out = _prepared(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for name, d in (("train", train_bal), ("test", test), ("val", val_bal)):
        fd.write_csv(d, out / f"{name}.csv")
    pp.save_scalers(out / "scalers.json", standard, minmax)
    names = raw.schema.feature_names
    features = {
        "selected": selected,
        "selected_names": [names[j] for j in selected],
        "scores": importance.scores.tolist(),
        "ranking": importance.ranking,
    }
    (out / "features.json").write_text(json.dumps(features, indent=1) + "\n")

    report = {
        "command": "prepare",
        "inputs": [_rel(cfg, p) for p in paths],
        "rows": {"raw": len(raw), "clean": len(cleaned), "balanced": len(balanced)},
        "counts": {
            "train_pre_smote": train.counts_by_name(),
            "train": train_bal.counts_by_name(),
            "test": test.counts_by_name(),
            "val": val_bal.counts_by_name(),
        },
        "selected_features": features["selected_names"],
        "top_importances": {names[j]: float(importance.scores[j]) for j in importance.ranking[:20]},
    }
    timings["total"] = time.perf_counter() - t0
    return write_report(cfg, "prepare", report, timings)


def _load_prepared(cfg: RunConfig):
    out = _prepared(cfg)
    _need(out / "features.json", "prepared artifacts (run prepare)")
    train, test, val = (fd.read_csv(out / f"{n}.csv", cfg.label_column) for n in ("train", "test", "val"))
    selected = json.loads((out / "features.json").read_text())["selected"]
    standard, minmax = pp.load_scalers(out / "scalers.json")
    return train, test, val, selected, standard, minmax


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(cfg: RunConfig, incremental: bool) -> neural.TrainConfig:
    if incremental:
        return neural.TrainConfig(cfg.inc_lr, cfg.inc_batch, cfg.inc_epochs, shuffle_seed=cfg.seed + _SEED_SHUFFLE + 1)
    return neural.TrainConfig(cfg.train_lr, cfg.train_batch, cfg.train_epochs, shuffle_seed=cfg.seed + _SEED_SHUFFLE)


def _gate_config(cfg: RunConfig) -> GateConfig:
    return GateConfig(cfg.gate_max_drop, cfg.retrain_trigger, cfg.gate_holdout_fraction, cfg.gate_mode)


def _scaled(p, d: fd.LabeledDataset, selected) -> fd.LabeledDataset:
    return pp.scale_dataset(p, d.select_features(selected))


def cmd_train(cfg: RunConfig) -> Path:
    """Train the classifier and novelty detector, seed memory, write the engine."""
    t0 = time.perf_counter()
    train, test, val, selected, standard, minmax = _load_prepared(cfg)
    held_info = None
    if cfg.holdout_class:
        train, held_tr = fd.holdout_class(train, cfg.holdout_class)
        val, held_va = fd.holdout_class(val, cfg.holdout_class)
        test, held_te = fd.holdout_class(test, cfg.holdout_class)
        hdir = _holdout_dir(cfg)
        fd.write_csv(held_tr.concat(held_va), hdir / "stream.csv")
        fd.write_csv(held_te, hdir / "test.csv")
        held_info = {"class": cfg.holdout_class, "stream_rows": len(held_tr) + len(held_va), "test_rows": len(held_te)}

    train_s = _scaled(standard, train, selected)
    model = neural.init_model(len(selected), cfg.hidden(), list(train.classes), cfg.seed + _SEED_MODEL, cfg.dropout)
    outcome = neural.train(model, train_s, _train_config(cfg, incremental=False))
    t_train = time.perf_counter() - t0

    normals = minmax.transform(train.select_features(selected).X[train.y == 0])
    val_normals = minmax.transform(val.select_features(selected).X[val.y == 0])
    detector = lof_mod.fit_lof(normals, cfg.lof_k, cfg.lof_max_reference, cfg.seed)
    lof_mod.calibrate_threshold(detector, val_normals, cfg.target_fpr)

    memory = MemoryStore(train.schema, cfg.reservoir_capacity, cfg.ring_capacity, cfg.seed + _SEED_MEMORY)
    for c in train.classes[1:]:
        rows = train.X[train.y == c.id]
        if len(rows):
            memory.store_attack_samples(c, rows)
    memory.store_normal(train.X[train.y == 0])
    memory.snapshot_test_set(test)

    engine = Engine(
        outcome.final_model, detector, memory, standard, minmax, selected,
        _gate_config(cfg), _train_config(cfg, incremental=True),
        clock=make_clock(cfg), seed=cfg.seed + _SEED_ENGINE,
    )
    engine.save(cfg.state)

    # Detector on its own: attack rows of train+val are all novel to it.
    known_attacks = np.vstack([
        train.select_features(selected).X[train.y != 0],
        val.select_features(selected).X[val.y != 0],
    ])
    _, attack_flags = lof_mod.predict_batch(detector, minmax.transform(known_attacks))
    _, val_flags = lof_mod.predict_batch(detector, val_normals)

    report = {
        "command": "train",
        "classes": [c.name for c in train.classes],
        "holdout": held_info,
        "train_counts": train.counts_by_name(),
        "final_loss": outcome.loss_curve[-1],
        "loss_curve": outcome.loss_curve,
        "baseline_report": engine.baseline_report.to_dict(),
        "lof": {
            "k": detector.k,
            "reference_points": len(detector.reference_points),
            "threshold": detector.threshold,
            "attack_detection_rate_train_val": float(attack_flags.mean()),
            "validation_false_alarm_rate": float(val_flags.mean()),
        },
        "frozen_test_rows": len(test),
        "frozen_test_hash": memory.frozen_test_hash,
    }
    timings = {"classifier_training": t_train, "total": time.perf_counter() - t0}
    return write_report(cfg, "train", report, timings)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def _as_new_class(rows: fd.LabeledDataset, name: str, benign_name: str) -> fd.LabeledDataset:
    return fd.LabeledDataset(rows.schema, rows.X, np.ones(len(rows), dtype=np.int64),
                             fd.make_classes([benign_name, name]))


def cmd_scenario_holdout(cfg: RunConfig) -> Path:
    """Replay the held-out class through the live engine and report the update."""
    if not cfg.holdout_class:
        raise ConfigError("scenario-holdout needs holdout_class in the config")
    t0 = time.perf_counter()
    hdir = _holdout_dir(cfg)
    stream = fd.read_csv(_need(hdir / "stream.csv", "holdout stream (run train)"), cfg.label_column)
    held_test = fd.read_csv(_need(hdir / "test.csv", "holdout test rows (run train)"), cfg.label_column)
    engine = Engine.load(cfg.state, clock=make_clock(cfg))
    pre = engine.baseline_report
    benign_name = engine.classifier.output_classes[0].name

    pred, _, novel, _ = engine._decide(engine.classifier, stream.X)
    called_benign = pred == 0
    pre_summary = {
        "fraction_classified_benign": float(called_benign.mean()),
        "lof_anomaly_rate_on_benign_called": float(novel[called_benign].mean()) if called_benign.any() else None,
        "fraction_detected_any": float(((pred != 0) | novel).mean()),
    }

    counts = {"KnownAttack": 0, "Normal": 0, "AnomalySuspected": 0}
    known_after = 0
    for x in stream.X:
        decision = engine.process(x)
        counts[type(decision).__name__] += 1
    accepted = [o for o in engine.history if o.accepted]
    outcome = accepted[0] if accepted else (engine.history[-1] if engine.history else None)

    if accepted:
        new_name = outcome.new_class
        augmented = engine.memory.frozen_test_set.concat(_as_new_class(held_test, new_name, benign_name))
        post = evaluate(engine, engine.classifier, augmented)
        new_pred, _, _, _ = engine._decide(engine.classifier, held_test.X)
        new_idx = engine.classifier.class_index(new_name)
        known_after = float((new_pred == new_idx).mean())
    else:
        post = evaluate(engine, engine.classifier, engine.memory.frozen_test_set)
    deltas = recall_deltas(pre, post)
    engine.save(_state_after_holdout(cfg))

    report = ScenarioReport(
        scenario="holdout",
        pre_report=pre.to_dict(),
        post_report=post.to_dict(),
        recall_deltas=deltas,
        update_outcome=outcome.to_dict() if outcome else None,
        holdout_anomaly_rate=pre_summary["lof_anomaly_rate_on_benign_called"],
        details={
            "holdout_class": cfg.holdout_class,
            "stream_rows": len(stream),
            "pre_update": pre_summary,
            "decisions": counts,
            "updates_attempted": len(engine.history),
            "updates_accepted": len(accepted),
            "new_class": outcome.new_class if accepted else None,
            "new_class_recall_on_holdout_test": known_after if accepted else None,
            "holdout_test_rows": len(held_test),
            "version": engine.version,
            "events": {k: len(engine.sink.of_kind(k)) for k in ("alarm", "warning", "update_accepted", "update_rejected")},
        },
    ).to_dict()
    path = write_report(cfg, "scenario-holdout", report, {"total": time.perf_counter() - t0})
    worst = min(deltas.values()) if deltas else 0.0
    if not accepted or worst < -cfg.gate_max_drop / 100.0 - 1e-12:
        raise ScenarioError(f"holdout scenario: no accepted update within the recall gate (report {path})")
    return path


def cmd_scenario_false_alarm(cfg: RunConfig) -> Path:
    """Force held-back Benign rows in as a fake new class; the gate must reject it."""
    t0 = time.perf_counter()
    train, _, val, _, _, _ = _load_prepared(cfg)
    engine = Engine.load(cfg.state, clock=make_clock(cfg), auto_update=False)
    # Validation Benign first, topped up from train Benign; never the frozen test rows.
    pool = np.vstack([val.X[val.y == 0], train.X[train.y == 0]])
    n = max(cfg.false_alarm_rows, cfg.retrain_trigger)
    if len(pool) < n:
        raise DataError(f"need {n} benign rows, have {len(pool)}")
    from_val = min(n, int((val.y == 0).sum()))
    test = engine.memory.frozen_test_set
    probe = engine.standard.transform(test.X[:, engine.feature_idx])
    before = neural.forward(engine.classifier, probe)
    for x in pool[:n]:
        engine.inject_anomaly(x)
    outcome = engine.incremental_update()
    after = neural.forward(engine.classifier, probe)
    unchanged = bool(np.array_equal(before, after)) and engine.version == 0
    report = ScenarioReport(
        scenario="false_alarm",
        pre_report=outcome.old_report.to_dict(),
        post_report=outcome.new_report.to_dict() if outcome.new_report else None,
        recall_deltas=recall_deltas(outcome.old_report, outcome.new_report) if outcome.new_report else {},
        update_outcome=outcome.to_dict(),
        details={
            "injected_rows": n,
            "injected_from_validation": from_val,
            "accepted": outcome.accepted,
            "worst_class": outcome.worst_class,
            "worst_delta": outcome.worst_delta,
            "reason": outcome.reason,
            "live_predictions_unchanged": unchanged,
            "version": engine.version,
        },
    ).to_dict()
    path = write_report(cfg, "scenario-false-alarm", report, {"total": time.perf_counter() - t0})
    if outcome.accepted or not unchanged:
        raise ScenarioError(f"false-alarm scenario: fake class was not rejected cleanly (report {path})")
    return path


def cmd_compare_offline(cfg: RunConfig) -> Path:
    """Offline forest retrained from scratch vs the incrementally updated network."""
    t0 = time.perf_counter()
    holdout = _read_report(cfg, "scenario-holdout")
    new_name = holdout["details"].get("new_class")
    if not new_name:
        raise DataError("scenario-holdout did not accept an update; nothing to compare")
    train, _, _, selected, _, _ = _load_prepared(cfg)
    train, _ = fd.holdout_class(train, cfg.holdout_class)
    hdir = _holdout_dir(cfg)
    stream = fd.read_csv(hdir / "stream.csv", cfg.label_column)
    held_test = fd.read_csv(hdir / "test.csv", cfg.label_column)
    engine = Engine.load(_need(_state_after_holdout(cfg), "post-holdout engine state"), clock=make_clock(cfg))
    benign_name = engine.classifier.output_classes[0].name

    params = fr.ForestParams(
        n_trees=cfg.forest_trees, max_depth=cfg.forest_max_depth or None, seed=cfg.seed + _SEED_OFFLINE
    )
    # Forest on the original classes only: how it sees the unknown class.
    old_forest = fr.fit_forest(train.select_features(selected), params)
    old_pred = fr.predict_forest_batch(old_forest, stream.X[:, selected])
    t_old = time.perf_counter() - t0

    offline_train = train.concat(_as_new_class(stream, new_name, benign_name))
    offline = fr.fit_forest(offline_train.select_features(selected), params)

    augmented = engine.memory.frozen_test_set.concat(_as_new_class(held_test, new_name, benign_name))
    incremental_report = evaluate(engine, engine.classifier, augmented)
    names = [c.name for c in offline.class_map]
    rf_pred = fr.predict_forest_batch(offline, augmented.X[:, selected])
    lookup = np.asarray([names.index(c.name) for c in augmented.classes])
    offline_report = compute_metrics(rf_pred, lookup[augmented.y], names)

    def table_row(r: EvalReport) -> dict:
        return {"accuracy": r.accuracy, "precision": r.precision, "recall": r.recall, "f1": r.f1}

    report = ScenarioReport(
        scenario="compare_offline",
        pre_report=None,
        post_report=incremental_report.to_dict(),
        offline_report=offline_report.to_dict(),
        details={
            "new_class": new_name,
            "test_rows": len(augmented),
            "incremental_test_hash": augmented.content_hash(),
            "offline_test_hash": augmented.content_hash(),
            "table": {"incremental_nn": table_row(incremental_report), "offline_rf": table_row(offline_report)},
            "rf_fraction_of_unknown_called_benign": float((old_pred == 0).mean()),
            "offline_train_rows": len(offline_train),
        },
    ).to_dict()
    return write_report(cfg, "compare-offline", report, {"old_forest": t_old, "total": time.perf_counter() - t0})


# ---------------------------------------------------------------------------
# text rendering
# ---------------------------------------------------------------------------


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:6.2f}%"


def _metrics_block(title: str, r: dict) -> List[str]:
    lines = [title]
    lines.append(f"  accuracy {_pct(r['accuracy'])}  precision {_pct(r['precision'])}  "
                 f"recall {_pct(r['recall'])}  f1 {_pct(r['f1'])}")
    lines.append(f"  detection rate {_pct(r['detection_rate'])}  false alarm rate {_pct(r['false_alarm_rate'])}")
    for c, v in r["per_class_recall"].items():
        lines.append(f"    {c:<32} recall {_pct(v)}")
    return lines


def render_report(report: dict) -> str:
    lines = []
    name = report.get("command") or report.get("scenario")
    lines.append(f"== {name} ==")
    if "baseline_report" in report:
        lines += _metrics_block("baseline (frozen test set)", report["baseline_report"])
        lof = report["lof"]
        lines.append(f"novelty detector: threshold {lof['threshold']:.6f}, "
                     f"attack detection {_pct(lof['attack_detection_rate_train_val'])}, "
                     f"validation false alarms {_pct(lof['validation_false_alarm_rate'])}")
    if report.get("pre_report"):
        lines += _metrics_block("before update", report["pre_report"])
    if report.get("post_report"):
        lines += _metrics_block("after update" if report.get("scenario") != "compare_offline"
                                else "incremental network", report["post_report"])
    if report.get("recall_deltas"):
        lines.append("difference in recall (after - before)")
        for c, v in report["recall_deltas"].items():
            lines.append(f"    {c:<32} {100 * v:+6.2f} points")
    if report.get("offline_report"):
        lines += _metrics_block("offline forest", report["offline_report"])
    if report.get("update_outcome"):
        o = report["update_outcome"]
        lines.append(f"update {o['new_class']}: {'ACCEPTED' if o['accepted'] else 'REJECTED'} - {o['reason']}")
    details = report.get("details")
    if details:
        lines.append("details: " + json.dumps(
            {k: v for k, v in details.items() if k != "table"}, sort_keys=True))
    for key in ("counts", "rows", "selected_features"):
        if key in report:
            lines.append(f"{key}: {json.dumps(report[key], sort_keys=True)}")
    return "\n".join(lines) + "\n"
