import numpy as np
import pytest

from incids import engine as engine_mod
from incids import flowdata as fd
from incids import lof as lof_mod
from incids import neural
from incids import preprocess as pp
from incids.engine import Engine, GateConfig
from incids.memory import MemoryStore

# Every UpdateOutcome produced anywhere in the session, for the gate invariant.
RECORDED_OUTCOMES = []
# criterion number -> (passed, detail), filled by test_acceptance.
ACCEPTANCE = {}

_original_update = Engine.incremental_update


def _recording_update(self):
    outcome = _original_update(self)
    RECORDED_OUTCOMES.append((outcome, self.gate_config.max_recall_drop, self.gate_config.mode))
    return outcome


Engine.incremental_update = _recording_update


def gate_invariant_violations():
    bad = []
    for outcome, X, mode in RECORDED_OUTCOMES:
        if not outcome.accepted or mode != "per_class":
            continue
        deltas = engine_mod.recall_deltas(outcome.old_report, outcome.new_report)
        if min(deltas.values()) < -X / 100.0 - engine_mod.GATE_SLACK:
            bad.append(outcome.new_class)
    return bad


def pytest_collection_modifyitems(items):
    # Acceptance runs last so the gate invariant sees every recorded outcome.
    items.sort(key=lambda item: item.path.name == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    bad = gate_invariant_violations()
    terminalreporter.write_line(
        f"gate invariant over {len(RECORDED_OUTCOMES)} recorded update outcomes: "
        + ("holds" if not bad else f"VIOLATED by {bad}")
    )


def pytest_sessionfinish(session, exitstatus):
    if gate_invariant_violations() and exitstatus == 0:
        session.exitstatus = 1


# ---------------------------------------------------------------------------
# A small separable world shared by the engine and memory tests
# ---------------------------------------------------------------------------


class World:
    """Trained engine on a separated synthetic dataset, novel class held out."""

    def __init__(self, per_class=600, seed=0, gate=GateConfig(), inc_cfg=None, **engine_kwargs):
        spec = fd.separated_spec(n_attacks=3, dims=8, n_informative=4, per_class_count=per_class, seed=seed)
        data = fd.synth_generate(spec)
        train, test, val = fd.split(data, fd.SplitSpec(seed=seed))
        self.novel_name = spec.class_names[-1]
        self.train, self.novel_train = fd.holdout_class(train, self.novel_name)
        self.val, self.novel_val = fd.holdout_class(val, self.novel_name)
        self.test, self.novel_test = fd.holdout_class(test, self.novel_name)
        self.feature_idx = list(range(data.schema.feature_count))
        self.standard = pp.fit_standard(self.train)
        self.minmax = pp.fit_minmax(self.train)
        model = neural.init_model(len(self.feature_idx), [32, 16], list(self.train.classes), seed)
        cfg = neural.TrainConfig(learning_rate=0.01, batch_size=64, epochs=15, shuffle_seed=seed)
        self.model = neural.train(model, pp.scale_dataset(self.standard, self.train), cfg).final_model
        normals = self.minmax.transform(self.train.X[self.train.y == 0])
        self.lof = lof_mod.fit_lof(normals, k=10)
        lof_mod.calibrate_threshold(self.lof, self.minmax.transform(self.val.X[self.val.y == 0]), 0.05)
        self.gate = gate
        self.inc_cfg = inc_cfg or neural.TrainConfig(learning_rate=0.005, batch_size=32, epochs=20, shuffle_seed=1)
        self.engine_kwargs = engine_kwargs

    def memory(self):
        mem = MemoryStore(self.train.schema, 1000, 1000, rng_seed=3)
        for c in self.train.classes[1:]:
            mem.store_attack_samples(c, self.train.X[self.train.y == c.id])
        mem.store_normal(self.train.X[self.train.y == 0])
        mem.snapshot_test_set(self.test)
        return mem

    def engine(self, **kwargs) -> Engine:
        clock = iter(range(10**9))
        params = dict(self.engine_kwargs, **kwargs)
        return Engine(
            self.model, self.lof, self.memory(), self.standard, self.minmax, self.feature_idx,
            params.pop("gate", self.gate), self.inc_cfg, clock=lambda: f"t{next(clock)}", seed=5, **params,
        )


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture(scope="session")
def small_world():
    # Trigger low enough that the held-out rows alone fire an update.
    return World(per_class=400, gate=GateConfig(retrain_trigger=150))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
