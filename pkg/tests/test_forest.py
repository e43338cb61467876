import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from habitat.forest import (FORMAT_VERSION, ForestError, ForestFormatError, Hyperparams,
                            RandomForest, Tree, best_split, bootstrap_indices,
                            drop_least_important, fit_forest, fit_tree, gini, grid_search,
                            importance_mdi, importance_permutation, oob_predictions, oob_score,
                            parse_forest, predict_class, predict_proba, predict_proba_batch,
                            serialize_forest, split_seed, stratified_folds, tree_seed,
                            write_score_table)
from habitat.sampling import LabeledDataset


def make_data(n=300, p=4, seed=0, informative=2, noise=0.3):
    """Labels from a noisy linear rule on the first ``informative`` columns."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    score = X[:, :informative].sum(axis=1) + noise * rng.normal(size=n)
    y = (score > 0).astype(int)
    return LabeledDataset(X, y, [f"x{i}" for i in range(p)])


# --- gini and split search ---------------------------------------------------

@pytest.mark.parametrize("counts, expected", [((10, 0), 0.0), ((5, 5), 0.5), ((3, 1), 0.375)])
def test_gini(counts, expected):
    assert gini(counts) == expected


def test_gini_empty():
    with pytest.raises(ForestError):
        gini((0, 0))


def _ds(X, y):
    X = np.asarray(X, float).reshape(len(y), -1)
    return LabeledDataset(X, y, [f"f{i}" for i in range(X.shape[1])])


def test_best_split_simple():
    s = best_split(_ds([1, 2, 3, 4], [0, 0, 1, 1]), range(4), [0])
    assert (s.feature, s.threshold) == (0, 2.5)
    assert s.impurity_decrease == pytest.approx(0.5, abs=1e-15)


def test_best_split_pure_and_useless():
    assert best_split(_ds([1, 2, 3], [1, 1, 1]), range(3), [0]) is None
    assert best_split(_ds([1, 1, 2, 2], [0, 1, 0, 1]), range(4), [0]) is None


def test_best_split_min_samples_leaf():
    d = _ds([1, 2, 3, 4, 5, 6], [0, 1, 1, 1, 1, 1])
    assert best_split(d, range(6), [0]).threshold == 1.5
    assert best_split(d, range(6), [0], min_samples_leaf=2).threshold == 2.5
    assert best_split(d, range(6), [0], min_samples_leaf=4) is None


def _gini_frac(n0, n1):
    n = n0 + n1
    return 1 - Fraction(n0, n) ** 2 - Fraction(n1, n) ** 2


def oracle_split(X, y, idx):
    """Exhaustive enumeration in exact arithmetic; ties to (feature, threshold)."""
    yi = y[idx]
    n = len(idx)
    parent = _gini_frac(int((yi == 0).sum()), int((yi == 1).sum()))
    best = None
    for f in range(X.shape[1]):
        xs = sorted(set(X[idx, f].tolist()))
        for lo, hi in zip(xs[:-1], xs[1:]):
            thr = (lo + hi) / 2
            if not lo <= thr < hi:
                thr = lo
            left = X[idx, f] <= thr
            nl, nr = int(left.sum()), int((~left).sum())
            gl = _gini_frac(int((yi[left] == 0).sum()), int((yi[left] == 1).sum()))
            gr = _gini_frac(int((yi[~left] == 0).sum()), int((yi[~left] == 1).sum()))
            delta = parent - Fraction(nl, n) * gl - Fraction(nr, n) * gr
            if delta > 0 and (best is None or delta > best[0]):
                best = (delta, f, thr)
    return best


def test_fit_tree_root_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 13))
        p = int(rng.integers(1, 4))
        X = rng.integers(0, 5, size=(n, p)).astype(float) / rng.choice([1, 3, 7])
        y = rng.integers(0, 2, n)
        data = _ds(X, y)
        idx = rng.integers(0, n, n)
        tree = fit_tree(data, idx, Hyperparams(1, p, 22), seed=int(rng.integers(2**32)))
        want = oracle_split(data.X, data.y, idx)
        if want is None:
            assert tree.is_leaf(0)
        else:
            assert (tree.feature[0], tree.threshold[0]) == (want[1], want[2])
            assert tree.decrease[0] == pytest.approx(float(want[0]), abs=1e-12)


def test_stump_matches_oracle_on_separable_set():
    X = np.array([[0.1, 5], [0.4, 3], [0.35, 9], [0.8, 1], [0.9, 4], [0.7, 2]])
    y = np.array([0, 0, 0, 1, 1, 1])
    tree = fit_tree(_ds(X, y), np.arange(6), Hyperparams(1, 2, 1), seed=0)
    want = oracle_split(X, y, np.arange(6))
    assert tree.n_nodes == 3
    assert (tree.feature[0], tree.threshold[0]) == (want[1], want[2]) == (0, 0.55)


# --- trees -------------------------------------------------------------------

def test_fit_tree_pure_bootstrap_is_leaf():
    d = _ds([1, 2, 3], [0, 1, 1])
    t = fit_tree(d, [1, 2, 2], Hyperparams(1, 1, 5), seed=0)
    assert t.n_nodes == 1 and t.counts[0].tolist() == [0, 3]


def test_fit_tree_deterministic_and_empty():
    d = make_data(200)
    a = fit_tree(d, np.arange(200), Hyperparams(1, 2, 10), seed=5)
    b = fit_tree(d, np.arange(200), Hyperparams(1, 2, 10), seed=5)
    assert a.structurally_equal(b)
    with pytest.raises(ForestError):
        fit_tree(d, [], Hyperparams(1, 2, 10), seed=5)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 5))
def test_tree_invariants(seed, depth, leaf):
    d = make_data(80, 3, seed % 1000)
    boot = bootstrap_indices(len(d), seed)
    t = fit_tree(d, boot, Hyperparams(1, 2, depth, min_samples_leaf=leaf), seed)
    assert t.depth() <= depth
    leaves = t.feature < 0
    assert np.all(t.counts[leaves].sum(axis=1) >= leaf)
    internal = ~leaves
    assert np.all(t.left[internal] > np.flatnonzero(internal))
    # children partition the parent's samples
    assert np.array_equal(t.counts[t.left[internal]] + t.counts[t.right[internal]],
                          t.counts[internal])
    assert t.counts[0].sum() == len(d)


def test_training_accuracy_on_separable_data():
    X = np.random.default_rng(1).uniform(size=(200, 2))
    y = (X[:, 0] + X[:, 1] > 1).astype(int)
    d = _ds(X, y)
    boot = bootstrap_indices(200, 3)
    t = fit_tree(d, boot, Hyperparams(1, 2, 1000), seed=1)
    p = t.predict_proba(X[boot])
    assert np.all((p >= 0.5) == y[boot])


# --- forests -----------------------------------------------------------------

def test_single_tree_forest_reduces_to_fit_tree():
    d = make_data(150)
    f = fit_forest(d, Hyperparams(1, 2, 10), master_seed=9)
    s = tree_seed(9, 0)
    t = fit_tree(d, bootstrap_indices(150, s), Hyperparams(1, 2, 10), split_seed(s))
    assert f.trees[0].structurally_equal(t)
    boot = bootstrap_indices(150, s)
    assert f.oob_indices[0].tolist() == sorted(set(range(150)) - set(boot.tolist()))


def test_reference_configuration_accepted():
    p = Hyperparams(500, 2, 22)
    p.check(10)
    assert (p.min_samples_split, p.min_samples_leaf) == (2, 1)
    with pytest.raises(ForestError):
        Hyperparams(0, 2, 22)
    with pytest.raises(ForestError):
        p.check(1)


def test_forest_thread_independence():
    d = make_data(200)
    params = Hyperparams(40, 2, 22)
    one = serialize_forest(fit_forest(d, params, 3, threads=1))
    assert serialize_forest(fit_forest(d, params, 3, threads=4)) == one
    assert serialize_forest(fit_forest(d, params, 4, threads=1)) != one


def test_forest_needs_both_classes():
    with pytest.raises(ForestError):
        fit_forest(_ds([1, 2], [1, 1]), Hyperparams(2, 1, 3), 0)


def _stump(counts_left, counts_right, thr=0.0):
    return Tree(np.array([0, -1, -1]), np.array([thr, 0, 0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]),
                np.array([np.add(counts_left, counts_right), counts_left, counts_right]),
                np.array([0.1, 0, 0]))


def _forest(trees, p=1):
    return RandomForest(trees, Hyperparams(len(trees), 1, 5), [f"x{i}" for i in range(p)],
                        list(range(len(trees))), [np.array([], int)] * len(trees), 4)


def test_predict_proba_leaf_fraction():
    f = _forest([_stump((1, 3), (1, 3))])
    assert predict_proba(f, [0.0]) == 0.75
    pure = _forest([_stump((0, 2), (0, 5))] * 3)
    assert predict_proba(pure, [1.0]) == 1.0


def test_predict_class_tie_goes_to_presence():
    f = _forest([_stump((1, 1), (1, 1))])
    assert predict_proba(f, [0.0]) == 0.5
    assert predict_class(f, [0.0], 0.5) == 1
    assert predict_class(f, [[0.0], [1.0]], 0.6).tolist() == [0, 0]
    with pytest.raises(ForestError):
        predict_class(f, [0.0], 1.0)


def test_predict_dimension_and_nodata_checks():
    f = _forest([_stump((1, 1), (1, 1))])
    with pytest.raises(ForestError):
        predict_proba(f, [0.0, 1.0])
    with pytest.raises(ForestError):
        predict_proba(f, [np.nan])


def test_forest_proba_is_mean_of_trees():
    d = make_data(200)
    f = fit_forest(d, Hyperparams(25, 2, 8), 1)
    X = np.random.default_rng(2).normal(size=(100, 4))
    per_tree = np.array([t.predict_proba(X) for t in f.trees])
    got = predict_proba_batch(f, X)
    np.testing.assert_allclose(got, per_tree.mean(axis=0), rtol=0, atol=1e-15)
    assert np.all((got >= 0) & (got <= 1))
    assert predict_class(f, X, 0.5).tolist() == (got >= 0.5).astype(int).tolist()
    # adding a pure-presence tree never lowers a probability
    more = _forest(f.trees + [_stump((0, 1), (0, 1))], 4)
    assert np.all(predict_proba_batch(more, X) >= got - 1e-15)


# --- importance --------------------------------------------------------------

def test_mdi_properties():
    d = make_data(300, 5)
    f = fit_forest(d, Hyperparams(30, 2, 22), 0)
    imp = importance_mdi(f)
    assert np.all(imp >= 0)
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)
    assert set(np.argsort(imp)[-2:]) == {0, 1}


def test_mdi_single_stump_and_unused_feature():
    f = _forest([_stump((3, 1), (0, 4))], 3)
    f.trees[0].feature[0] = 1
    assert importance_mdi(f).tolist() == [0.0, 1.0, 0.0]


def test_permutation_importance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    y = (X[:, 1] > 0).astype(int)
    d = LabeledDataset(X, y, ["noise_a", "signal", "noise_b"])
    train, test = d.take(np.arange(300)), d.take(np.arange(300, 400))
    f = fit_forest(train, Hyperparams(30, 1, 22), 0)
    imp = importance_permutation(f, test, n_repeats=20, rng_seed=1)
    assert np.argmax(imp) == 1 and imp[1] > 0.3
    assert abs(imp[0]) < 0.02 and abs(imp[2]) < 0.02
    assert np.array_equal(imp, importance_permutation(f, test, 20, rng_seed=1))
    ident = importance_permutation(f, test, 3, shuffle=lambda g, n: np.arange(n))
    assert ident.tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ForestError):
        importance_permutation(f, test.take([]), 2)


TABLE1 = ["precipitation", "tmin", "tmax", "elevation", "dist_rivers", "dist_roads",
          "lulc=1", "lulc=2", "lulc=3", "npp", "lai", "ndvi"]


def test_drop_least_important():
    d = LabeledDataset(np.zeros((2, len(TABLE1))), [0, 1], TABLE1)
    imp = np.array([0.2, 0.1, 0.1, 0.15, 0.01, 0.02, 0.005, 0.005, 0.01, 0.1, 0.1, 0.1])
    assert drop_least_important(d, imp, 0).feature_names == TABLE1
    out = drop_least_important(d, imp, 3)
    assert out.feature_names == ["precipitation", "tmin", "tmax", "elevation", "npp", "lai",
                                 "ndvi"]
    assert set(TABLE1) - set(out.feature_names) == {
        "dist_rivers", "dist_roads", "lulc=1", "lulc=2", "lulc=3"}
    with pytest.raises(ForestError):
        drop_least_important(d, imp, 10)


def test_drop_ties_by_feature_index():
    d = LabeledDataset(np.zeros((2, 4)), [0, 1], ["a", "b", "c", "d"])
    assert drop_least_important(d, [0.25] * 4, 2).feature_names == ["c", "d"]


# --- out-of-bag --------------------------------------------------------------

def test_oob_bookkeeping():
    d = make_data(100)
    f = fit_forest(d, Hyperparams(20, 2, 22), 2)
    for s, oob in zip(f.tree_seeds, f.oob_indices):
        boot = set(bootstrap_indices(100, s).tolist())
        assert not boot & set(oob.tolist())
        assert boot | set(oob.tolist()) == set(range(100))
    _, cover = oob_predictions(f, d)
    assert cover.sum() == sum(len(o) for o in f.oob_indices)


def test_oob_score_tracks_holdout():
    d = make_data(1000, 4, seed=3)
    train, test = d.take(np.arange(500)), d.take(np.arange(500, 1000))
    f = fit_forest(train, Hyperparams(100, 2, 22), 1)
    holdout = np.mean((predict_proba_batch(f, test.X) >= 0.5) == test.y)
    assert abs(oob_score(f, train) - holdout) <= 0.1


def test_oob_requires_coverage():
    d = _ds([1, 2], [0, 1])
    f = _forest([_stump((1, 0), (0, 1))])
    f.n_train = 2
    with pytest.raises(ForestError):
        oob_score(f, d)


# --- grid search -------------------------------------------------------------

def test_stratified_folds_balance():
    y = np.r_[np.zeros(23, int), np.ones(17, int)]
    fold = stratified_folds(y, 5, 0)
    for k in range(5):
        assert abs((y[fold == k] == 1).sum() - 17 / 5) < 1
        assert abs((y[fold == k] == 0).sum() - 23 / 5) < 1


def test_grid_search_single_combination():
    d = make_data(80)
    best, rows = grid_search(d, {"n_estimators": [5], "max_features": [1], "max_depth": [3]},
                             folds=3, master_seed=0)
    assert best == Hyperparams(5, 1, 3)
    assert len(rows) == 1 and len(rows[0].fold_f1) == 3


def test_grid_search_table_and_reference_row():
    d = make_data(120, 3, seed=4)
    grid = {"n_estimators": [10, 500], "max_features": [1, 2], "max_depth": [4, 22]}
    best, rows = grid_search(d, grid, folds=3, master_seed=1)
    assert len(rows) == 8
    combos = [(r.params.n_estimators, r.params.max_features, r.params.max_depth) for r in rows]
    assert (500, 2, 22) in combos
    top = max(r.mean_f1 for r in rows)
    assert best in [r.params for r in rows if r.mean_f1 == top]
    winners = sorted((r.params for r in rows if r.mean_f1 == top),
                     key=lambda p: (p.n_estimators, p.max_depth, p.max_features))
    assert best == winners[0]
    table = write_score_table(rows).splitlines()
    assert len(table) == 9 and table[0].startswith("n_estimators\tmax_features\tmax_depth")
    again, rows2 = grid_search(d, grid, folds=3, master_seed=1)
    assert again == best and [r.mean_f1 for r in rows2] == [r.mean_f1 for r in rows]


def test_grid_search_prefers_smaller_model_on_ties():
    X = np.r_[np.zeros(20), np.ones(20)].reshape(-1, 1)
    d = _ds(X, np.r_[np.zeros(20, int), np.ones(20, int)])
    best, rows = grid_search(d, {"n_estimators": [9, 3], "max_features": [1],
                                 "max_depth": [5, 2]}, folds=4)
    assert all(r.mean_f1 == 1.0 for r in rows)
    assert best == Hyperparams(3, 1, 2)


def test_grid_search_errors():
    d = _ds(np.arange(6), [0, 0, 0, 0, 0, 1])
    with pytest.raises(ForestError, match="single class"):
        grid_search(d, {"n_estimators": [2]}, folds=3)
    with pytest.raises(ForestError):
        grid_search(make_data(30), {"n_estimators": []}, folds=3)


# --- serialization -----------------------------------------------------------

@pytest.fixture(scope="module")
def big_forest():
    d = make_data(150, 4, seed=8)
    return fit_forest(d, Hyperparams(500, 2, 22), 11), d


def test_round_trip_500_trees(big_forest):
    f, d = big_forest
    blob = serialize_forest(f)
    g = parse_forest(blob)
    assert serialize_forest(g) == blob
    X = np.random.default_rng(0).normal(size=(1000, 4))
    assert np.array_equal(predict_proba_batch(f, X), predict_proba_batch(g, X))
    assert g.tree_seeds == f.tree_seeds and g.master_seed == f.master_seed
    assert all(np.array_equal(a, b) for a, b in zip(g.oob_indices, f.oob_indices))
    assert oob_score(g, d) == oob_score(f, d)


def test_parse_empty_and_bad_magic():
    with pytest.raises(ForestFormatError) as err:
        parse_forest(b"")
    assert err.value.offset == 0
    with pytest.raises(ForestFormatError):
        parse_forest(b"NOTAFOREST")


def test_version_mismatch():
    blob = bytearray(serialize_forest(_forest([_stump((1, 0), (0, 1))])))
    blob[5:7] = struct.pack("<H", FORMAT_VERSION + 1)
    with pytest.raises(ForestFormatError, match="version") as err:
        parse_forest(bytes(blob))
    assert err.value.offset == 5


def test_corrupted_length_field_positioned():
    blob = bytearray(serialize_forest(_forest([_stump((1, 0), (0, 1))] * 2)))
    meta_len = struct.unpack("<I", blob[7:11])[0]
    tree_at = 11 + meta_len + 4
    blob[tree_at:tree_at + 4] = struct.pack("<I", 10_000)
    with pytest.raises(ForestFormatError) as err:
        parse_forest(bytes(blob))
    assert err.value.offset == tree_at + 4
    assert str(tree_at + 4) in str(err.value)


def test_truncation_and_byte_flip_fuzz():
    f = fit_forest(make_data(60), Hyperparams(3, 2, 6), 0)
    blob = serialize_forest(f)
    for cut in range(len(blob)):
        with pytest.raises(ForestFormatError):
            parse_forest(blob[:cut])
    rng = np.random.default_rng(1)
    for _ in range(3000):
        b = bytearray(blob)
        for pos in rng.integers(0, len(b), int(rng.integers(1, 4))):
            b[pos] = int(rng.integers(0, 256))
        try:
            g = parse_forest(bytes(b))
        except ForestFormatError as exc:
            assert 0 <= exc.offset <= len(b)
        else:
            predict_proba_batch(g, np.zeros((2, 4)))
