import numpy as np
import pytest

from fdd import diffusion, forest, synth
from fdd.diffusion import DiffusionOperator
from oracles import brute_force_knee, procrustes_error


def _random_operator(n, seed):
    rng = np.random.default_rng(seed)
    K = rng.uniform(0.1, 1.0, size=(n, n))
    K = 0.5 * (K + K.T)
    return diffusion.row_normalize(K)


# ---------------------------------------------------------------------------
# alpha-decay kernel
# ---------------------------------------------------------------------------


def test_kernel_self_affinity_is_one():
    X = np.random.default_rng(0).normal(size=(10, 3))
    K = diffusion.alpha_decay_kernel(X, k=3, alpha=10.0)
    assert np.allclose(np.diag(K), 1.0)


def test_kernel_unit_distance_alpha_one_gives_inverse_e():
    # two points one unit apart: the 1-NN bandwidth equals the distance, and
    # the squared distance over that bandwidth is also 1
    X = np.array([[0.0, 0.0], [1.0, 0.0]])
    K = diffusion.alpha_decay_kernel(X, k=1, alpha=1.0)
    assert K[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_kernel_symmetric():
    X = np.random.default_rng(1).normal(size=(15, 4))
    K = diffusion.alpha_decay_kernel(X, k=4, alpha=3.0)
    assert np.abs(K - K.T).max() < 1e-12


def test_kernel_duplicate_points_error():
    X = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ValueError, match="duplicate points 0 and 1"):
        diffusion.alpha_decay_kernel(X, k=1, alpha=2.0)


def test_kernel_parameter_validation():
    X = np.random.default_rng(2).normal(size=(5, 2))
    with pytest.raises(ValueError, match="k="):
        diffusion.alpha_decay_kernel(X, k=5, alpha=2.0)
    with pytest.raises(ValueError, match="alpha"):
        diffusion.alpha_decay_kernel(X, k=2, alpha=0.5)


# ---------------------------------------------------------------------------
# row normalization and powers
# ---------------------------------------------------------------------------


def test_row_normalize_identity():
    op = diffusion.row_normalize(np.eye(4))
    assert np.array_equal(op.P, np.eye(4))


def test_row_normalize_arithmetic():
    op = diffusion.row_normalize(np.array([[2.0, 1.0, 1.0]] * 3))
    assert np.allclose(op.P[0], [0.5, 0.25, 0.25])


def test_row_normalize_zero_row_errors():
    K = np.array([[1.0, 1.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="row 1"):
        diffusion.row_normalize(K)


def test_row_sums_equal_one_for_random_kernels():
    rng = np.random.default_rng(3)
    for _ in range(5):
        K = rng.uniform(0.0, 1.0, size=(8, 8)) + 1e-3
        op = diffusion.row_normalize(K)
        assert np.abs(op.P.sum(axis=1) - 1.0).max() < 1e-9


def test_diffuse_identity_and_first_power():
    op = _random_operator(6, 4)
    assert np.array_equal(diffusion.diffuse(op, 1), op.P)
    assert np.array_equal(diffusion.diffuse(op, 0), np.eye(6))


def test_diffuse_hand_square():
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    P2 = diffusion.diffuse(DiffusionOperator(P), 2)
    assert np.allclose(P2, [[0.83, 0.17], [0.34, 0.66]], atol=1e-12)


def test_diffuse_preserves_stochasticity():
    op = _random_operator(10, 5)
    for t in (1, 4, 16):
        Pt = diffusion.diffuse(op, t)
        assert np.abs(Pt.sum(axis=1) - 1.0).max() < 1e-9


# ---------------------------------------------------------------------------
# stationary distribution and diffusion distance
# ---------------------------------------------------------------------------


def test_stationary_two_state_analytic():
    op = DiffusionOperator(np.array([[0.9, 0.1], [0.2, 0.8]]))
    phi = diffusion.stationary_distribution(op)
    assert np.allclose(phi, [2.0 / 3.0, 1.0 / 3.0], atol=1e-10)


def test_stationary_doubly_stochastic_uniform():
    P = np.array([[0.5, 0.3, 0.2], [0.3, 0.4, 0.3], [0.2, 0.3, 0.5]])
    phi = diffusion.stationary_distribution(DiffusionOperator(P))
    assert np.allclose(phi, 1.0 / 3.0, atol=1e-10)


def test_stationary_random_ergodic_chains():
    for seed in range(5):
        op = _random_operator(12, 100 + seed)
        phi = diffusion.stationary_distribution(op)
        assert np.abs(phi @ op.P - phi).max() < 1e-10
        assert phi.sum() == pytest.approx(1.0, abs=1e-12)
        assert (phi > 0).all()


def test_stationary_reducible_chain_errors():
    P = np.array(
        [[0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5], [0.0, 0.0, 0.5, 0.5]]
    )
    with pytest.raises(ValueError, match="irreducible"):
        diffusion.stationary_distribution(DiffusionOperator(P))


def test_diffusion_distance_self_is_zero():
    op = _random_operator(7, 6)
    phi = diffusion.stationary_distribution(op)
    assert diffusion.diffusion_distance(op, 3, 2, 2, phi) == 0.0


def test_diffusion_distance_symmetric_in_arguments():
    op = _random_operator(7, 7)
    phi = diffusion.stationary_distribution(op)
    assert diffusion.diffusion_distance(op, 2, 1, 4, phi) == pytest.approx(
        diffusion.diffusion_distance(op, 2, 4, 1, phi), abs=1e-15
    )


def test_diffusion_distance_three_state_direct_formula():
    op = _random_operator(3, 8)
    phi = diffusion.stationary_distribution(op)
    t = 3
    Pt = op.P @ op.P @ op.P
    for i in range(3):
        for j in range(3):
            expected = np.sqrt(sum((Pt[i, k] - Pt[j, k]) ** 2 / phi[k] for k in range(3)))
            assert abs(diffusion.diffusion_distance(op, t, i, j, phi) - expected) < 1e-12


def test_diffusion_distance_zero_weight_errors():
    op = _random_operator(3, 9)
    with pytest.raises(ValueError, match="not positive"):
        diffusion.diffusion_distance(op, 2, 0, 1, np.array([0.5, 0.5, 0.0]))


def test_diffusion_distance_contracts_on_reversible_chains():
    for seed in range(3):
        op = _random_operator(9, 200 + seed)
        phi = diffusion.stationary_distribution(op)
        for t in (1, 2, 4):
            for i, j in [(0, 1), (2, 7), (3, 5)]:
                d_t = diffusion.diffusion_distance(op, t, i, j, phi)
                d_t1 = diffusion.diffusion_distance(op, t + 1, i, j, phi)
                assert d_t1 <= d_t + 1e-9


# ---------------------------------------------------------------------------
# potential coordinates
# ---------------------------------------------------------------------------


def test_mds_recovers_planar_configuration():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(12, 2))
    D = np.sqrt(diffusion.pairwise_sq_dists(pts))
    coords, eigvals, clipped = diffusion.classical_mds(D, 2)
    assert procrustes_error(coords, pts) < 1e-8
    assert clipped < 1e-12


def test_mds_rank_guard():
    pts = np.zeros((4, 2))
    pts[:, 0] = [0.0, 1.0, 2.0, 3.0]  # collinear: rank 1
    D = np.sqrt(diffusion.pairwise_sq_dists(pts))
    with pytest.raises(ValueError, match="rank"):
        diffusion.classical_mds(D, 2)


def test_potential_coordinates_identical_rows_coincide():
    P = np.array([[0.4, 0.4, 0.2], [0.4, 0.4, 0.2], [0.1, 0.1, 0.8]])
    coords = diffusion.potential_coordinates(DiffusionOperator(P), 1, 1)
    assert np.abs(coords.Z[0] - coords.Z[1]).max() < 1e-9


def test_potential_coordinates_preserve_distance_ordering():
    # chain graph: the end pair must embed farther apart than adjacent pairs
    K = np.array([[1.0, 0.5, 0.05], [0.5, 1.0, 0.5], [0.05, 0.5, 1.0]])
    op = diffusion.row_normalize(K)
    coords = diffusion.potential_coordinates(op, 2, 1).Z
    d12 = abs(coords[0, 0] - coords[1, 0])
    d13 = abs(coords[0, 0] - coords[2, 0])
    assert d13 > d12


def test_potential_coordinates_columns_ordered_by_variance():
    op = _random_operator(10, 11)
    coords = diffusion.potential_coordinates(op, 2, 3)
    variances = coords.Z.var(axis=0)
    assert variances[0] >= variances[1] >= variances[2]
    assert coords.t_used == 2


def test_potential_coordinates_permutation_invariant():
    op = _random_operator(9, 12)
    perm = np.random.default_rng(13).permutation(9)
    shuffled = DiffusionOperator(op.P[np.ix_(perm, perm)])
    a = diffusion.potential_coordinates(op, 3, 2).Z
    b = diffusion.potential_coordinates(shuffled, 3, 2).Z
    da = np.sqrt(diffusion.pairwise_sq_dists(a))
    db = np.sqrt(diffusion.pairwise_sq_dists(b))
    assert np.abs(da[np.ix_(perm, perm)] - db).max() < 1e-8


# ---------------------------------------------------------------------------
# scale selection
# ---------------------------------------------------------------------------


def test_vne_identity_operator_returns_default():
    op = DiffusionOperator(np.eye(5))
    assert diffusion.vne_select_t(op, 10, default_t=4) == 4


def test_vne_two_cluster_chain_knee_interior():
    X = np.concatenate(
        [np.random.default_rng(14).normal(size=(15, 2)) - [4, 0],
         np.random.default_rng(15).normal(size=(15, 2)) + [4, 0]]
    )
    K = diffusion.alpha_decay_kernel(X, k=4, alpha=2.0)
    op = diffusion.row_normalize(K)
    t_max = 20
    t = diffusion.vne_select_t(op, t_max)
    assert 2 <= t <= t_max - 1


def test_vne_knee_matches_brute_force_on_convex_curve():
    values = 10.0 * np.exp(-0.35 * np.arange(25)) + 1.0
    assert diffusion.knee_point(values) == brute_force_knee(values)


def test_entropy_curve_decreasing_for_ergodic_chain():
    op = _random_operator(10, 16)
    H = diffusion.von_neumann_entropy_curve(op, 12)
    assert all(H[i + 1] <= H[i] + 1e-12 for i in range(len(H) - 1))


# ---------------------------------------------------------------------------
# supervised pipeline property
# ---------------------------------------------------------------------------


def _one_nn_agreement(Z, y):
    d2 = diffusion.pairwise_sq_dists(Z)
    np.fill_diagonal(d2, np.inf)
    return (y[np.argmin(d2, axis=1)] == y).mean()


def test_supervised_coords_beat_raw_features_on_noisy_clusters():
    rng = np.random.default_rng(17)
    X, y = synth.make_blobs(150, [[-1.2, 0.0], [1.2, 0.0]], spread=1.0, seed=18)
    X = np.hstack([X, 3.0 * rng.normal(size=(150, 6))])  # heavy nuisance
    f = forest.fit_forest(X, y, forest.ForestConfig(n_trees=60, seed=19))
    K = forest.proximity_matrix(f)
    op = diffusion.operator_from_proximity(K)
    coords = diffusion.potential_coordinates(op, 4, 2)
    assert _one_nn_agreement(coords.Z, y) >= _one_nn_agreement(X, y)


def test_operator_from_proximity_modes():
    X, y = synth.make_blobs(60, [[-2, 0], [2, 0]], spread=0.8, seed=20)
    f = forest.fit_forest(X, y, forest.ForestConfig(n_trees=40, seed=21))
    K = forest.proximity_matrix(f)
    a = diffusion.operator_from_proximity(K, mode="affinity")
    assert a.kernel == "rf_gap"
    b = diffusion.operator_from_proximity(K, mode="distance", k=5, alpha=10.0)
    assert b.kernel == "rf_gap_distance"
    with pytest.raises(ValueError, match="mode"):
        diffusion.operator_from_proximity(K, mode="nope")
