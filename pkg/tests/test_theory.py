import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evarl.errors import DegenerateInputError
from evarl.mdp import TabularMdp, exact_values, optimal_values, sample_random_mdp
from evarl.predictors import AssessmentDataset, LinearPredictor, predictor_value_mse
from evarl.theory import (
    SWEEP_COLUMNS,
    bounded_variant,
    brute_force_policy_frontier,
    build_vectorized,
    dump_instance,
    nullspace_basis,
    prediction_mse_scalar,
    prediction_mse_vectorized,
    projected_gradient_hard,
    random_problem,
    rbf_index_similarity,
    run_beta_sweep_experiment,
    soft_residual,
    solve_hard_relaxed,
    solve_soft_relaxed,
    verify_theorem1_roundtrip,
)


def identity_problem(mu, objective=None):
    n = len(mu)
    p = build_vectorized(n, range(n), np.eye(n), mu)
    return p.with_(Q=np.eye(n), objective=objective)


seeds = st.integers(0, 2**31 - 1)


class TestBuild:
    def test_full_identity_similarity_gives_zero(self):
        p = build_vectorized(4, range(4), np.eye(4), np.full(4, 0.25))
        np.testing.assert_array_equal(p.Q, 0.0)

    def test_all_ones_similarity_uniform_rows(self):
        p = build_vectorized(5, [1, 3], np.ones((5, 5)), np.full(5, 0.2))
        W = p.weights
        np.testing.assert_allclose(W[:, [1, 3]], 0.5)
        np.testing.assert_array_equal(W[:, [0, 2, 4]], 0.0)

    def test_only_assessment_columns_filled(self):
        p = build_vectorized(4, [2], rbf_index_similarity(4), np.full(4, 0.25))
        assert np.count_nonzero(p.F[:, [0, 1, 3]]) == 0
        assert list(p.canonical_order) == [2, 0, 1, 3]

    def test_zero_row_rejected(self):
        with pytest.raises(DegenerateInputError):
            build_vectorized(3, [0], np.eye(3), np.full(3, 1 / 3))

    def test_callable_similarity(self):
        S = rbf_index_similarity(4)
        a = build_vectorized(4, [0, 3], S, np.full(4, 0.25))
        b = build_vectorized(4, [0, 3], lambda i, j: S[i, j], np.full(4, 0.25))
        np.testing.assert_array_equal(a.Q, b.Q)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            build_vectorized(3, [0, 0], np.ones((3, 3)), np.full(3, 1 / 3))
        with pytest.raises(ValueError):
            build_vectorized(3, [0], np.ones((3, 3)), np.array([0.5, 0.5, 0.5]))

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds)
    def test_psd_and_symmetric(self, seed):
        p = random_problem(np.random.default_rng(seed))
        np.testing.assert_allclose(p.Q, p.Q.T, atol=1e-12)
        w = np.linalg.eigvalsh(p.Q)
        assert w.min() >= -1e-10 * max(1.0, w.max())
        np.testing.assert_allclose(p.Q @ np.ones(p.n), 0.0, atol=1e-12)


class TestPredictionMse:
    def test_zero_vector(self):
        p = random_problem(np.random.default_rng(0), n=5, k=2)
        assert prediction_mse_vectorized(p, np.zeros(5)) == 0.0

    def test_nullspace_vector(self):
        p = random_problem(np.random.default_rng(1), n=5, k=2)
        assert abs(prediction_mse_vectorized(p, 3.7 * np.ones(5))) <= 1e-12

    def test_wrong_length(self):
        p = random_problem(np.random.default_rng(2), n=4, k=2)
        with pytest.raises(ValueError):
            prediction_mse_vectorized(p, np.zeros(3))

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds)
    def test_vectorized_matches_scalar(self, seed):
        rng = np.random.default_rng(seed)
        p = random_problem(rng)
        V = rng.normal(size=p.n) * 5
        assert abs(prediction_mse_vectorized(p, V) - prediction_mse_scalar(p, V)) <= 1e-12 * max(1.0, V @ V)

    @settings(max_examples=30, deadline=None)
    @given(seed=seeds)
    def test_matches_linear_predictor_on_policy_values(self, seed):
        rng = np.random.default_rng(seed)
        mdp = sample_random_mdp(5, 2, False, rng, horizon=6)
        pi = rng.dirichlet(np.ones(2), size=5)
        S = rng.random((5, 5)) + 0.05
        assess = [0, 2]
        p = build_vectorized(5, assess, S, mdp.start_dist)
        V = exact_values(mdp, pi)
        data = AssessmentDataset(np.array(assess, dtype=float), V[assess])
        rep = predictor_value_mse(LinearPredictor.from_matrix(S), mdp, pi, data)
        assert abs(rep.zeta_sq - prediction_mse_vectorized(p, V)) <= 1e-12


class TestHard:
    def test_identity_example(self):
        res = solve_hard_relaxed(identity_problem(np.array([1.0, 0.0])), 2.0)
        assert res.bounded and abs(res.objective - 2.0) <= 1e-12
        np.testing.assert_allclose(res.V, [2.0, 0.0])

    def test_zero_epsilon(self):
        res = solve_hard_relaxed(identity_problem(np.array([0.3, 0.7])), 0.0)
        assert res.objective == 0.0
        np.testing.assert_array_equal(res.V, 0.0)

    def test_structured_instance_is_unbounded(self):
        p = random_problem(np.random.default_rng(3), n=5, k=2)
        res = solve_hard_relaxed(p, 1.0)
        assert not res.bounded and res.objective == np.inf
        assert abs(p.mu @ res.direction) > 0
        np.testing.assert_allclose(p.Q @ res.direction, 0.0, atol=1e-10)

    def test_negative_epsilon(self):
        with pytest.raises(ValueError):
            solve_hard_relaxed(identity_problem(np.array([1.0, 0.0])), -1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_closed_form_matches_projected_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p = bounded_variant(random_problem(rng, n=int(rng.integers(2, 6))))
        if np.linalg.norm(p.a) < 1e-6:
            pytest.skip("objective vanishes after projection")
        eps = float(rng.uniform(0.5, 2.0))
        res = solve_hard_relaxed(p, eps)
        num, x = projected_gradient_hard(p, eps)
        assert res.bounded
        assert abs(res.objective - num) <= 1e-4 * max(1.0, abs(res.objective))
        assert abs(res.V @ p.Q @ res.V - eps * eps) <= 1e-8

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds)
    def test_tightness(self, seed):
        rng = np.random.default_rng(seed)
        p = bounded_variant(random_problem(rng))
        eps = float(rng.uniform(0.1, 3.0))
        res = solve_hard_relaxed(p, eps)
        assert res.bounded
        assert abs(res.V @ p.Q @ res.V - eps * eps) <= 1e-8 * max(1.0, eps * eps) or res.objective == 0.0


class TestSoft:
    def test_identity_example(self):
        res = solve_soft_relaxed(identity_problem(np.array([0.5, 0.5])), 0.25)
        np.testing.assert_allclose(res.V, [1.0, 1.0])

    def test_doubling_beta_halves_solution(self):
        p = bounded_variant(random_problem(np.random.default_rng(4), n=5, k=3))
        a = solve_soft_relaxed(p, 0.3).V
        b = solve_soft_relaxed(p, 0.6).V
        np.testing.assert_allclose(b, a / 2, atol=1e-12)

    def test_nullspace_shift_keeps_residual(self):
        p = bounded_variant(random_problem(np.random.default_rng(5), n=6, k=2))
        res = solve_soft_relaxed(p, 0.5)
        N = nullspace_basis(p.Q)
        assert N.shape[1] >= 1 and res.nullspace.shape == N.shape
        base = soft_residual(p, res.V, 0.5)
        shifted = soft_residual(p, res.V + N @ np.arange(1.0, N.shape[1] + 1) * 10, 0.5)
        assert abs(shifted - base) <= 1e-12 * 100
        assert base <= 1e-10

    def test_structured_instance_inconsistent(self):
        p = random_problem(np.random.default_rng(6), n=4, k=2)
        assert not solve_soft_relaxed(p, 1.0).bounded

    def test_beta_must_be_positive(self):
        with pytest.raises(ValueError):
            solve_soft_relaxed(identity_problem(np.array([1.0, 0.0])), 0.0)


class TestRoundtrip:
    def test_identity_exact(self):
        rep = verify_theorem1_roundtrip(identity_problem(np.array([0.25, 0.75])), 0.4)
        assert rep.passed(1e-12)

    @pytest.mark.parametrize("seed", range(100))
    def test_random_instances(self, seed):
        rng = np.random.default_rng(seed)
        p = bounded_variant(random_problem(rng))
        if np.linalg.norm(p.a) < 1e-6:
            pytest.skip("objective vanishes after projection")
        beta = float(10 ** rng.uniform(-2, 1))
        rep = verify_theorem1_roundtrip(p, beta)
        assert rep.passed(1e-8), rep
        assert rep.hard_soft_objective >= rep.soft_optimum - 1e-8

    def test_unbounded_rejected(self):
        with pytest.raises(ValueError):
            verify_theorem1_roundtrip(random_problem(np.random.default_rng(7), n=4, k=2), 1.0)


class TestFrontier:
    BETAS = [0.0, 0.01, 0.1, 1.0, 10.0, 100.0]

    def test_beta_zero_is_optimal_one_step(self):
        mdp = sample_random_mdp(4, 3, True, np.random.default_rng(0), horizon=1)
        fr = brute_force_policy_frontier(mdp, [0, 2], rbf_index_similarity(4), [0.0])
        assert abs(fr.points[0].J - mdp.start_dist @ optimal_values(mdp)) <= 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_beta_zero_is_optimal_long_horizon(self, seed):
        mdp = sample_random_mdp(5, 2, True, np.random.default_rng(seed), gamma=0.9, horizon=250)
        fr = brute_force_policy_frontier(mdp, [0, 2], rbf_index_similarity(5), [0.0])
        assert fr.mode == "enumeration"
        assert abs(fr.points[0].J - mdp.start_dist @ optimal_values(mdp)) <= 1e-8

    @settings(max_examples=40, deadline=None)
    @given(seed=seeds, deterministic=st.booleans())
    def test_monotone_and_error_bound(self, seed, deterministic):
        mdp = sample_random_mdp(5, 2, deterministic, np.random.default_rng(seed), gamma=0.9, horizon=30)
        fr = brute_force_policy_frontier(mdp, [0, 2], rbf_index_similarity(5), self.BETAS)
        assert fr.monotone()
        assert fr.error_bound_holds()

    def test_size_guard_switches_to_gradient(self):
        mdp = sample_random_mdp(4, 2, True, np.random.default_rng(1), horizon=10)
        fr = brute_force_policy_frontier(mdp, [0, 2], rbf_index_similarity(4), [0.0, 1.0], max_policies=4)
        assert fr.mode == "gradient" and len(fr.points) == 2


class TestSweep:
    def test_small_sweep_trends(self):
        res = run_beta_sweep_experiment(trials=40, betas=(0.0, 0.1, 1.0, 10.0), rng=np.random.default_rng(0),
                                        horizon=50, steps=600)
        assert res.non_increasing("mean_zeta_sq", "se_zeta_sq")
        assert res.non_increasing("mean_J", "se_J")
        for r in res.rows:
            assert r["mean_sq_J_err"] <= r["mean_zeta_sq"] + 1e-12
            assert r["n_trials"] == 40
        assert tuple(res.to_csv().splitlines()[0].split(",")) == SWEEP_COLUMNS

    def test_deterministic_and_chunk_invariant(self):
        kw = dict(trials=6, betas=(0.0, 1.0), horizon=20, steps=50)
        a = run_beta_sweep_experiment(rng=np.random.default_rng(3), **kw)
        b = run_beta_sweep_experiment(rng=np.random.default_rng(3), chunk=5, **kw)
        assert a.to_csv() == b.to_csv()


def test_dump_instance_roundtrip(tmp_path):
    mdp = sample_random_mdp(3, 2, True, np.random.default_rng(0), horizon=4)
    p = build_vectorized(3, [0, 2], rbf_index_similarity(3), mdp.start_dist)
    path = tmp_path / "case.json"
    dump_instance(mdp, p, path)
    doc = json.loads(path.read_text())
    back = TabularMdp.from_dict(doc["mdp"])
    np.testing.assert_array_equal(back.transitions, mdp.transitions)
    again = build_vectorized(3, doc["assessment"], np.array(doc["F"]), np.array(doc["mu"]))
    np.testing.assert_allclose(again.Q, p.Q, atol=1e-15)
