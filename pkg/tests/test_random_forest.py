import numpy as np
import pytest

from fdd import forest, synth
from fdd.forest import Forest, ForestConfig, _Tree
from oracles import brute_force_rf_gap


def _single_leaf_forest(inbag_row, n_classes=2):
    """Forest with one tree whose every sample lands in one leaf."""
    n = len(inbag_row)
    tree = _Tree("classification", n_classes)
    tree._new_node()
    tree.value[0] = np.ones(n_classes)
    tree.finalize()
    inbag = np.asarray([inbag_row], dtype=np.int32)
    leaf_ids = np.zeros((1, n), dtype=np.int32)
    return Forest([tree], inbag, leaf_ids, "classification", n_classes, ForestConfig(n_trees=1))


def test_rf_gap_hand_case_single_tree():
    # bootstrap multiset {0, 0, 2}: counts (2, 0, 1); sample 1 is OOB
    f = _single_leaf_forest([2, 0, 1])
    assert forest.rf_gap(f, 1, 0) == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert forest.rf_gap(f, 1, 2) == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert forest.rf_gap(f, 1, 1) == 0.0


def test_rf_gap_zero_when_no_shared_leaf():
    tree = _Tree("classification", 2)
    tree._new_node()
    tree.finalize()
    f = _single_leaf_forest([2, 0, 1])
    f.leaf_ids = np.asarray([[0, 1, 0]], dtype=np.int32)  # sample 1 isolated
    assert forest.rf_gap(f, 1, 0) == 0.0


def test_rf_gap_never_oob_errors():
    f = _single_leaf_forest([1, 1, 1])
    with pytest.raises(ValueError, match="more trees"):
        forest.rf_gap(f, 0, 1)


def test_fit_forest_oob_accuracy_on_separated_gaussians():
    X, y = synth.make_blobs(200, [[-2.0, 0.0], [2.0, 0.0]], spread=0.7, seed=0)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=60, seed=1))
    pred, untied = f.oob_predictions()
    acc = (pred == y).mean()
    assert acc >= 0.95, acc


def test_pure_leaves_predict_with_probability_one():
    X, y = synth.make_blobs(60, [[-5.0, 0.0], [5.0, 0.0]], spread=0.3, seed=2)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=5, seed=0))
    tree = f.trees[0]
    for node in range(len(tree.feature)):
        if tree.feature[node] == -1:
            dist = tree.leaf_distribution(node)
            assert dist.max() == pytest.approx(1.0)


def test_same_seed_identical_structures():
    X, y = synth.make_blobs(80, [[-1.0, 0.0], [1.0, 0.0]], spread=0.8, seed=3)
    a = forest.fit_forest(X, y, ForestConfig(n_trees=10, seed=5))
    b = forest.fit_forest(X, y, ForestConfig(n_trees=10, seed=5))
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.feature, tb.feature)
        assert np.array_equal(ta.threshold, tb.threshold)
    assert np.array_equal(a.inbag_counts, b.inbag_counts)


def test_exhaustive_oracle_30_samples_10_trees():
    X, y = synth.make_blobs(30, [[-1.5, 0.0], [1.5, 0.0]], spread=1.0, seed=4)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=10, seed=6))
    K = forest.proximity_matrix(f, zero_diagonal=False)
    for i in range(30):
        for j in range(30):
            assert abs(K.K[i, j] - brute_force_rf_gap(f, i, j)) < 1e-12


def test_proximity_rows_sum_to_one():
    X, y = synth.make_blobs(90, [[-2.0, 0.0], [2.0, 0.0]], spread=1.0, seed=7)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=50, seed=8))
    K = forest.proximity_matrix(f, zero_diagonal=False)
    assert np.abs(K.K.sum(axis=1) - 1.0).max() < 1e-12
    assert (K.K >= 0).all() and np.isfinite(K.K).all()


def test_proximity_generally_asymmetric():
    X, y = synth.make_blobs(60, [[-1.0, 0.0], [1.0, 0.0]], spread=1.0, seed=9)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=30, seed=10))
    K = forest.proximity_matrix(f).K
    assert np.abs(K - K.T).max() > 1e-6


def test_proximity_prediction_matches_oob_on_three_datasets():
    datasets = [
        synth.make_blobs(150, [[-2.0, 0.0], [2.0, 0.0]], spread=1.2, seed=11),
        synth.make_blobs(200, [[-1.5, 1.0], [1.5, -1.0], [0.0, 2.5]], spread=0.9, seed=12),
        synth.make_two_moons(180, noise=0.15, seed=13),
    ]
    for X, y in datasets:
        f = forest.fit_forest(X, y, ForestConfig(n_trees=60, seed=14))
        K = forest.proximity_matrix(f, zero_diagonal=False)
        pred_forest, untied = f.oob_predictions()
        pred_prox = forest.proximity_predict(K, y)
        assert untied.sum() > 0
        assert (pred_prox[untied] == pred_forest[untied]).all()


def test_regression_proximity_prediction_matches_oob_mean():
    rng = np.random.default_rng(15)
    X = rng.normal(size=(120, 3))
    y = X[:, 0] * 2.0 + np.sin(X[:, 1]) + 0.1 * rng.normal(size=120)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=60, task="regression", seed=16))
    K = forest.proximity_matrix(f, zero_diagonal=False)
    pred_prox = forest.proximity_predict(K, y, task="regression")
    pred_oob = f.oob_scores()
    assert np.abs(pred_prox - pred_oob).max() < 1e-12


def test_regression_uniform_row_averages_targets():
    K = forest.ProximityMatrix(np.array([[0.5, 0.5], [0.5, 0.5]]))
    pred = forest.proximity_predict(K, np.array([0.0, 1.0]), task="regression")
    assert np.allclose(pred, [0.5, 0.5])


def test_proximity_predict_zero_row_abstains():
    K = forest.ProximityMatrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError, match="all zero"):
        forest.proximity_predict(K, np.array([0, 1]))


def test_constant_labels_rejected():
    X = np.random.default_rng(0).normal(size=(20, 2))
    with pytest.raises(ValueError, match="constant"):
        forest.fit_forest(X, np.zeros(20, dtype=int), ForestConfig(n_trees=5))


def test_n_trees_validation():
    X, y = synth.make_blobs(20, [[-1, 0], [1, 0]], 0.5, seed=0)
    with pytest.raises(ValueError, match="n_trees"):
        forest.fit_forest(X, y, ForestConfig(n_trees=0))


def test_never_oob_raises_in_matrix():
    X, y = synth.make_blobs(12, [[-3, 0], [3, 0]], 0.3, seed=1)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=1, seed=2))
    in_bag_everywhere = (f.inbag_counts > 0).all(axis=0)
    assert in_bag_everywhere.any()  # with one tree some sample is always in-bag
    with pytest.raises(ValueError, match="never out-of-bag"):
        forest.proximity_matrix(f)


def test_oos_proximity_rows_sum_to_one():
    X, y = synth.make_blobs(80, [[-2, 0], [2, 0]], 0.8, seed=3)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=40, seed=4))
    Q = np.random.default_rng(5).normal(size=(7, 2))
    P = forest.oos_proximity(f, Q)
    assert P.shape == (7, 80)
    assert np.abs(P.sum(axis=1) - 1.0).max() < 1e-12


def test_oos_proximity_of_training_point_matches_leaf_distribution():
    X, y = synth.make_blobs(50, [[-2, 0], [2, 0]], 0.6, seed=6)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=30, seed=7))
    P = forest.oos_proximity(f, X[3:4])
    # the duplicated query follows sample 3's leaves in every tree, so its row
    # averages the same leaf distributions over all trees
    expected = np.zeros(50)
    for t in range(f.n_trees):
        c = f.inbag_counts[t].astype(float)
        L = f.leaf_ids[t]
        mass = np.bincount(L, weights=c)
        expected += (L == L[3]) * c / mass[L[3]]
    expected /= f.n_trees
    assert np.abs(P[0] - expected).max() < 1e-12


def test_forest_checkpoint_round_trip(tmp_path):
    X, y = synth.make_blobs(40, [[-2, 0], [2, 0]], 0.7, seed=8)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=12, seed=9))
    path = tmp_path / "forest.pkl"
    forest.save_forest(f, path)
    g = forest.load_forest(path)
    assert np.array_equal(f.predict_scores(X), g.predict_scores(X))
    assert np.array_equal(forest.proximity_matrix(f).K, forest.proximity_matrix(g).K)


def test_proximity_csv_export(tmp_path):
    X, y = synth.make_blobs(20, [[-2, 0], [2, 0]], 0.5, seed=10)
    f = forest.fit_forest(X, y, ForestConfig(n_trees=20, seed=11))
    K = forest.proximity_matrix(f)
    path = tmp_path / "prox.csv"
    forest.export_proximity_csv(K, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "i,j,value"
    rebuilt = np.zeros_like(K.K)
    for line in lines[1:]:
        i, j, v = line.split(",")
        rebuilt[int(i), int(j)] = float(v)
    assert np.array_equal(rebuilt, K.K)
