
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incids import flowdata as fd
from incids import forest as fr


def dataset(X, y, n_classes=None):
    X = np.asarray(X, float)
    X = X.reshape(len(y), -1)
    n_classes = n_classes or int(np.max(y)) + 1
    schema = fd.FeatureSchema(tuple(f"f{j}" for j in range(X.shape[1])))
    return fd.LabeledDataset(schema, X, y, fd.make_classes(["Benign"] + [f"A{i}" for i in range(1, n_classes)]))


def gini_direct(counts):
    n = sum(counts)
    return 1.0 - sum((c / n) ** 2 for c in counts)


def decrease_direct(parent, left, right):
    n, nl, nr = sum(parent), sum(left), sum(right)
    return gini_direct(parent) - nl / n * gini_direct(left) - nr / n * gini_direct(right)


# -- impurity ----------------------------------------------------------------------


def test_gini_examples():
    assert fr.gini([10, 0]) == 0.0
    assert fr.gini([5, 5]) == 0.5
    assert fr.gini([2, 1, 1]) == pytest.approx(0.625, abs=1e-15)


def test_impurity_decrease_examples():
    assert fr.impurity_decrease([4, 4], [4, 0], [0, 4]) == 0.5
    assert fr.impurity_decrease([6, 2], [4, 0], [2, 2]) == pytest.approx(0.125, abs=1e-15)
    assert fr.impurity_decrease([6, 4], [3, 2], [3, 2]) == pytest.approx(0.0, abs=1e-15)


def test_impurity_matches_direct_evaluation_on_random_counts():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = int(rng.integers(2, 6))
        left = rng.integers(0, 20, size=c)
        right = rng.integers(0, 20, size=c)
        left[0] += 1
        right[-1] += 1
        parent = left + right
        assert abs(fr.gini(parent) - gini_direct(parent.tolist())) < 1e-12
        assert abs(fr.impurity_decrease(parent, left, right) - decrease_direct(parent, left, right)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=6).filter(lambda c: sum(c) > 0))
def test_gini_bounds(counts):
    g = fr.gini(counts)
    assert -1e-15 <= g <= 1 - 1 / len(counts) + 1e-12
    assert (abs(g) < 1e-15) == (np.count_nonzero(counts) == 1)


# -- single trees ---------------------------------------------------------------------


def exhaustive_best_split(X, y, n_classes):
    """All (feature, midpoint) candidates scored directly; ties -> lowest feature, threshold."""
    best = (0.0, None, None)
    parent = np.bincount(y, minlength=n_classes)
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for lo, hi in zip(vals[:-1], vals[1:]):
            t = (lo + hi) / 2
            left = np.bincount(y[X[:, j] <= t], minlength=n_classes)
            gain = decrease_direct(parent.tolist(), left.tolist(), (parent - left).tolist())
            if gain > best[0] + 1e-12:
                best = (gain, j, t)
    return best


def test_pure_data_is_a_single_leaf():
    node = fr.fit_tree(np.arange(5.0)[:, None], np.zeros(5, int), 2)
    assert isinstance(node, fr.Leaf) and node.distribution.tolist() == [5, 0]


def test_one_dimensional_split():
    root = fr.fit_tree(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0, 0, 1, 1]), 2)
    assert isinstance(root, fr.Internal)
    assert root.threshold == 1.5 and root.node_impurity_decrease == 0.5


def test_identical_columns_tie_to_lower_index():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    root = fr.fit_tree(np.column_stack([x, x, x]), np.array([0, 0, 1, 1]), 2)
    assert root.feature_index == 0


@pytest.mark.parametrize("seed", range(8))
def test_root_split_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 6, size=(40, 3)).astype(float)
    y = rng.integers(0, 3, size=40)
    root = fr.fit_tree(X, y, 3)
    gain, j, t = exhaustive_best_split(X, y, 3)
    if j is None:
        assert isinstance(root, fr.Leaf)
    else:
        assert (root.feature_index, root.threshold) == (j, t)
        assert abs(root.node_impurity_decrease - gain) < 1e-12


def test_stored_decreases_audit():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 4))
    y = (X[:, 0] > 0).astype(int) + (X[:, 2] > 0.5).astype(int)
    root = fr.fit_tree(X, y, 3)
    n = root.n_samples
    for node in fr.iter_internal(root):
        expected = decrease_direct(node.distribution.tolist(), node.left.distribution.tolist(),
                                   node.right.distribution.tolist())
        assert abs(node.node_impurity_decrease - expected) < 1e-12
        assert node.node_impurity_decrease > 0 and np.isfinite(node.threshold)
        assert node.sample_fraction == node.n_samples / n


def test_unrestricted_tree_memorizes_training_set():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 3))
    y = rng.integers(0, 4, size=300)
    d = dataset(X, y, 4)
    f = fr.fit_forest(d, fr.ForestParams(n_trees=1, max_features_per_split=3, bootstrap=False))
    assert np.array_equal(fr.predict_forest_batch(f, X), y)


def test_max_depth_is_respected():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(200, 2))
    y = rng.integers(0, 2, size=200)
    root = fr.fit_tree(X, y, 2, fr.TreeParams(max_depth=2))

    def depth(n):
        return 0 if isinstance(n, fr.Leaf) else 1 + max(depth(n.left), depth(n.right))

    assert depth(root) <= 2


# -- forests ---------------------------------------------------------------------------


def test_single_distinct_row_gives_single_leaf():
    d = dataset(np.ones((4, 2)), np.array([0, 1, 0, 1]))
    f = fr.fit_forest(d, fr.ForestParams(n_trees=1, max_features_per_split=2))
    assert isinstance(f.trees[0], fr.Leaf)


def test_forest_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(3)
    d = dataset(rng.normal(size=(150, 4)), rng.integers(0, 3, size=150))
    a = fr.fit_forest(d, fr.ForestParams(n_trees=5, seed=9))
    b = fr.fit_forest(d, fr.ForestParams(n_trees=5, seed=9))
    probe = rng.normal(size=(500, 4))
    assert np.array_equal(fr.predict_forest_batch(a, probe), fr.predict_forest_batch(b, probe))
    a.save(tmp_path / "f.json")
    c = fr.ForestModel.load(tmp_path / "f.json")
    assert np.array_equal(fr.predict_forest_batch(a, probe), fr.predict_forest_batch(c, probe))
    assert c.bootstrap_seeds == a.bootstrap_seeds


def nearest_centroid_accuracy(train, test):
    centroids = np.stack([train.X[train.y == c].mean(axis=0) for c in range(len(train.classes))])
    pred = np.argmin(((test.X[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    return (pred == test.y).mean()


def test_separated_three_class_accuracy():
    spec = fd.SynthSpec(3, 6, 300, [[0, 0], [8, 0], [0, 8]], [1, 1, 1], [0, 4], seed=1)
    train = fd.synth_generate(spec)
    test = fd.synth_generate(fd.SynthSpec(**{**spec.__dict__, "seed": 2}))
    assert nearest_centroid_accuracy(train, test) >= 0.99
    f = fr.fit_forest(train, fr.ForestParams(n_trees=25, seed=0))
    assert (fr.predict_forest_batch(f, test.X) == test.y).mean() >= 0.95


def hand_forest(leaf_classes, n_classes=4):
    trees = [fr.Leaf(np.eye(n_classes)[c] * 3) for c in leaf_classes]
    return fr.ForestModel(trees, 1, list(fd.make_classes(["Benign", "a", "b", "c"])), [0] * len(trees), 1)


def test_vote_rules():
    assert fr.predict_forest(hand_forest([2, 2, 2]), np.zeros(1)).id == 2
    assert fr.predict_forest(hand_forest([3, 1]), np.zeros(1)).id == 1
    assert fr.predict_forest(hand_forest([3]), np.zeros(1)).id == 3


# -- importance ------------------------------------------------------------------------


def independent_mdi(f):
    raw = np.zeros(f.feature_count)
    for t in f.trees:
        stack = [t]
        while stack:
            n = stack.pop()
            if isinstance(n, fr.Internal):
                raw[n.feature_index] += n.sample_fraction * n.node_impurity_decrease
                stack += [n.left, n.right]
    raw /= f.n_trees
    return raw / raw.sum()


def test_mdi_matches_independent_traversal():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 6))
    d = dataset(X, (X[:, 1] + X[:, 4] > 0).astype(int))
    f = fr.fit_forest(d, fr.ForestParams(n_trees=10, seed=1))
    r = fr.mdi_importances(f)
    assert np.abs(r.scores - independent_mdi(f)).max() < 1e-12
    assert abs(r.scores.sum() - 1) < 1e-9 and (r.scores >= 0).all()


def test_unused_feature_scores_zero_and_perfect_feature_scores_one():
    X = np.column_stack([np.zeros(10), np.arange(10.0)])
    d = dataset(X, (np.arange(10) >= 5).astype(int))
    f = fr.fit_forest(d, fr.ForestParams(n_trees=1, max_features_per_split=2, bootstrap=False))
    r = fr.mdi_importances(f)
    assert r.scores.tolist() == [0.0, 1.0]


def test_informative_dims_rank_above_noise():
    spec = fd.SynthSpec(
        3, 30, 300,
        [[0, 0, 0, 0, 0], [4, 0, 4, 0, 4], [0, 4, 0, 4, 4]],
        [1, 1, 1], [2, 7, 13, 21, 28], seed=3,
    )
    f = fr.fit_forest(fd.synth_generate(spec), fr.ForestParams(n_trees=30, seed=0))
    ranking = fr.mdi_importances(f).ranking
    assert set(ranking[:5]) == set(spec.informative_dims)


def test_select_top_k():
    r = fr.ImportanceReport(np.linspace(1, 0, 80) / 40, list(range(80)))
    assert len(fr.select_top_k(r, 20)) == 20
    assert fr.select_top_k(r, 80) == r.ranking
    rng = np.random.default_rng(0)
    s = rng.random(7)
    r2 = fr.ImportanceReport(s, sorted(range(7), key=lambda j: -s[j]))
    assert fr.select_top_k(r2, 1) == [int(np.argmax(s))]
    with pytest.raises(ValueError):
        fr.select_top_k(r2, 0)
