import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcsi.datagen import BiasedDataset, GenConfig, generate_synthetic
from bcsi.influence import (
    InfluenceRecord, LastLayerHessian, ScoreConfig, SolveError, assemble_hessian, bcsi_scores, cross_influence,
    gradnorm_scores, if_train, if_train_all, loss_scores, read_scores, self_influence, self_influence_all,
    si_scores, solve, write_scores,
)
from bcsi.nn import MlpParams, init_mlp, last_layer_grad

from conftest import (
    last_layer_theta, make_dataset, mean_ce_of_last_layer, oracle_grad, oracle_hessian, tiny_instance,
)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def fd_hessian(params, ds, step=1e-4):
    theta = last_layer_theta(params)
    P = theta.size
    f = lambda t: mean_ce_of_last_layer(params, ds, t)
    H = np.zeros((P, P))
    for i in range(P):
        for j in range(P):
            e_i, e_j = np.eye(P)[i] * step, np.eye(P)[j] * step
            H[i, j] = (f(theta + e_i + e_j) - f(theta + e_i - e_j) - f(theta - e_i + e_j) + f(theta - e_i - e_j)) / (4 * step**2)
    return H


class TestAssembleHessian:
    def test_matches_finite_differences(self):
        params = init_mlp([3, 2, 2], 4)
        ds = make_dataset(3, 3, 2, 5)
        H = assemble_hessian(params, ds, damping=0.0)
        assert np.max(np.abs(H.matrix - fd_hessian(params, ds))) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        params, ds = tiny_instance(seed)
        H = assemble_hessian(params, ds)
        np.testing.assert_allclose(H.matrix, oracle_hessian(params, ds, H.damping), rtol=1e-12, atol=1e-14)

    def test_zero_features(self):
        # single layer on zero inputs: h = 0, only the bias block carries curvature
        params = MlpParams((np.zeros((3, 2)),), (np.array([0.1, -0.2, 0.3]),))
        ds = BiasedDataset(np.arange(2), np.zeros((2, 2)), np.array([0, 1]), np.array([0, 1]), 3, 0.0)
        H = assemble_hessian(params, ds, damping=0.5)
        z = params.biases[0]
        p = np.exp(z) / np.exp(z).sum()
        expected = 0.5 * np.eye(9)
        expected[6:, 6:] += np.diag(p) - np.outer(p, p)
        np.testing.assert_allclose(H.matrix, expected, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetric(self, seed):
        params, ds = tiny_instance(seed)
        m = assemble_hessian(params, ds).matrix
        assert np.max(np.abs(m - m.T)) <= 1e-12

    def test_default_damping_is_relative(self):
        params, ds = tiny_instance(1)
        raw = assemble_hessian(params, ds, damping=0.0).matrix
        H = assemble_hessian(params, ds)
        assert H.damping == pytest.approx(1e-3 * np.trace(raw) / raw.shape[0], rel=1e-12)

    def test_gce_curvature_matches_finite_differences(self):
        params = init_mlp([2, 3, 2], 7)
        ds = make_dataset(4, 2, 2, 1)
        H = assemble_hessian(params, ds, loss_kind="gce", damping=0.0)
        step = 1e-5
        theta = last_layer_theta(params)
        C, Hd = params.num_classes, params.hidden_dim

        def mean_grad(t):
            p = MlpParams(params.weights[:-1] + (t[: C * Hd].reshape(C, Hd),), params.biases[:-1] + (t[C * Hd:],))
            return np.mean([last_layer_grad(p, x, int(y), "gce") for x, y in zip(ds.features, ds.labels)], axis=0)

        fd = np.column_stack([(mean_grad(theta + step * e) - mean_grad(theta - step * e)) / (2 * step) for e in np.eye(theta.size)])
        assert np.max(np.abs(H.matrix - fd)) <= 1e-6


class TestSolve:
    def test_scaled_identity(self):
        params = init_mlp([2, 3, 2], 0)
        empty = BiasedDataset(np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros(0), 2, 0.0)
        H = assemble_hessian(params, empty, damping=2.0)
        g = np.eye(H.size)[0]
        np.testing.assert_allclose(solve(H, g), 0.5 * g, rtol=1e-15)

    def test_zero_rhs(self):
        params, ds = tiny_instance(0)
        H = assemble_hessian(params, ds)
        assert np.all(solve(H, np.zeros(H.size)) == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_spd_residual(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(10, 10))
        H = LastLayerHessian(A @ A.T + 1e-3 * np.eye(10), 1e-3, 0)
        g = rng.normal(size=10)
        x = solve(H, g)
        assert np.linalg.norm(H.matrix @ x - g) / np.linalg.norm(g) <= 1e-8

    def test_conjugate_gradient_path(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(40, 40))
        H = LastLayerHessian(A @ A.T + np.eye(40), 1.0, 0)
        g = rng.normal(size=40)
        x = solve(H, g, dense_max=0)
        assert np.linalg.norm(H.matrix @ x - g) / np.linalg.norm(g) <= 1e-8

    def test_singular_asks_for_damping(self):
        params = init_mlp([2, 3, 2], 0)
        empty = BiasedDataset(np.zeros(0), np.zeros((0, 2)), np.zeros(0), np.zeros(0), 2, 0.0)
        H = assemble_hessian(params, empty, damping=0.0)
        with pytest.raises(SolveError, match="increase damping"):
            solve(H, np.ones(H.size))


class TestInfluenceOracles:
    @pytest.mark.parametrize("seed", range(8))
    def test_against_dense_inverse(self, seed):
        params, ds = tiny_instance(seed)
        H = assemble_hessian(params, ds)
        Hinv = np.linalg.inv(oracle_hessian(params, ds, H.damping))
        grads = [oracle_grad(params, x, int(y)) for x, y in zip(ds.features, ds.labels)]
        gbar = np.mean(grads, axis=0)
        for i, z in enumerate(ds.samples):
            assert rel(self_influence(params, H, z), grads[i] @ Hinv @ grads[i]) <= 1e-9
            assert rel(if_train(params, H, z, ds), grads[i] @ Hinv @ gbar) <= 1e-9
            j = (i + 1) % len(ds)
            assert rel(cross_influence(params, H, z, ds.sample(j)), grads[j] @ Hinv @ grads[i]) <= 1e-9

    def test_identity_hessian(self):
        params, ds = tiny_instance(2)
        P = params.last_layer_size
        H = LastLayerHessian(np.eye(P), 1.0, 0)
        z = ds.sample(0)
        g = last_layer_grad(params, z.features, z.label)
        assert self_influence(params, H, z) == pytest.approx(g @ g, rel=1e-14)

    def test_perfect_prediction_scores_zero(self):
        W = np.array([[1000.0, 0.0], [0.0, 1000.0]])
        params = MlpParams((W,), (np.zeros(2),))
        ds = BiasedDataset(np.arange(2), np.eye(2), np.array([0, 1]), np.array([0, 1]), 2, 0.0)
        H = assemble_hessian(params, ds, damping=1.0)
        assert self_influence(params, H, ds.sample(0)) == 0.0
        assert loss_scores(params, ds)[0].score == 0.0
        assert gradnorm_scores(params, ds)[0].score == 0.0

    def test_cross_diagonal_and_symmetry(self):
        params, ds = tiny_instance(4)
        H = assemble_hessian(params, ds)
        a, b = ds.sample(0), ds.sample(1)
        assert cross_influence(params, H, a, a) == pytest.approx(self_influence(params, H, a), rel=1e-12)
        assert abs(cross_influence(params, H, a, b) - cross_influence(params, H, b, a)) <= 1e-10

    def test_if_train_singleton_and_pair(self):
        params, ds = tiny_instance(5, n=2)
        H = assemble_hessian(params, ds)
        a, b = ds.sample(0), ds.sample(1)
        single = ds.subset([0])
        assert if_train(params, H, a, single) == pytest.approx(self_influence(params, H, a), rel=1e-12)
        pair = 0.5 * (cross_influence(params, H, a, a) + cross_influence(params, H, a, b))
        assert abs(if_train(params, H, a, ds) - pair) <= 1e-10

    def test_if_train_vs_pairwise_loop(self):
        params, ds = tiny_instance(6, n=5)
        H = assemble_hessian(params, ds)
        for z in ds.samples:
            naive = np.mean([cross_influence(params, H, z, zp) for zp in ds.samples])
            assert rel(if_train(params, H, z, ds), naive) <= 1e-9

    def test_vectorized_matches_scalar(self):
        params, ds = tiny_instance(7)
        H = assemble_hessian(params, ds)
        si = self_influence_all(params, H, ds)
        it = if_train_all(params, H, ds)
        for i, z in enumerate(ds.samples):
            assert si[i] == pytest.approx(self_influence(params, H, z), rel=1e-10)
            assert it[i] == pytest.approx(if_train(params, H, z, ds), rel=1e-10, abs=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([1e-6, 1e-3, 1.0]))
    def test_nonnegative(self, seed, damping):
        params, ds = tiny_instance(seed)
        H = assemble_hessian(params, ds, damping=damping)
        assert np.all(self_influence_all(params, H, ds) >= -1e-12)

    def test_damping_scale_keeps_scores_valid(self):
        params, ds = tiny_instance(9)
        base = assemble_hessian(params, ds)
        for d in (base.damping, 10 * base.damping):
            s = self_influence_all(params, assemble_hessian(params, ds, damping=d), ds)
            assert np.all(np.isfinite(s)) and np.all(s >= -1e-12)

    def test_dim_mismatch(self):
        params, ds = tiny_instance(1)
        H = LastLayerHessian(np.eye(params.last_layer_size + 1), 1.0, 0)
        with pytest.raises(ValueError):
            self_influence(params, H, ds.sample(0))


class TestBaselineScores:
    def test_loss_symmetric(self):
        params = MlpParams((np.zeros((2, 2)),), (np.zeros(2),))
        ds = BiasedDataset(np.arange(1), np.zeros((1, 2)), np.array([0]), np.array([0]), 2, 0.0)
        assert loss_scores(params, ds)[0].score == pytest.approx(np.log(2), abs=1e-15)

    def test_gradnorm_order_matches_recomputation(self):
        params, ds = tiny_instance(3, n=10)
        recs = gradnorm_scores(params, ds)
        norms = [np.linalg.norm(oracle_grad(params, x, int(y))) for x, y in zip(ds.features, ds.labels)]
        assert [r.sample_id for r in sorted(recs, key=lambda r: -r.score)] == list(np.argsort(-np.array(norms), kind="stable"))


class TestTrainedScores:
    def test_bcsi_deterministic_and_total(self):
        ds = generate_synthetic(GenConfig(n_per_class=40, seed=2))
        cfg = ScoreConfig(seed=5)
        a = bcsi_scores(ds, [10, 16, 5], cfg)
        b = bcsi_scores(ds, [10, 16, 5], cfg)
        assert a == b
        assert len(a) == len(ds)
        assert {r.method for r in a} == {"BCSI"} and {r.epoch_t for r in a} == {5}

    def test_si_deterministic_and_total(self):
        ds = generate_synthetic(GenConfig(n_per_class=40, seed=2))
        cfg = ScoreConfig(loss="ce", epochs=10, seed=1)
        a = si_scores(ds, [10, 16, 5], cfg)
        assert a == si_scores(ds, [10, 16, 5], cfg)
        assert len(a) == len(ds) and a[0].method == "SelfInfluence"

    def test_bcsi_rejects_test_split(self):
        ds = make_dataset(10, 3, 2, 0)
        test = BiasedDataset(ds.ids, ds.features, ds.labels, ds.bias_attrs, 2, 0.5, "test")
        with pytest.raises(ValueError):
            bcsi_scores(test, [3, 2])

    def test_csv_round_trip(self, tmp_path):
        recs = [InfluenceRecord(3, 0.1 + 0.2, "BCSI", 7, 5), InfluenceRecord(4, 1e-300, "BCSI", 7, 5)]
        write_scores(recs, tmp_path / "s.csv")
        assert read_scores(tmp_path / "s.csv") == recs
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "sample_id,method,epoch_t,run_seed,score"
        assert lines[1] == "3,BCSI,5,7,0.30000000000000004"


class TestChunking:
    def test_chunked_scores_match_single_batch(self, toy_train):
        params = init_mlp([10, 12, 5], 0)
        H = assemble_hessian(params, toy_train)
        np.testing.assert_allclose(
            self_influence_all(params, H, toy_train, chunk=7), self_influence_all(params, H, toy_train), rtol=1e-12
        )
        np.testing.assert_allclose(
            if_train_all(params, H, toy_train, chunk=7), if_train_all(params, H, toy_train), rtol=1e-10
        )
