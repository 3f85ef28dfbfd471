import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evarl.mdp import (
    AssessmentSpec,
    TabularMdp,
    exact_performance,
    exact_values,
    make_gridworld,
    rollout_batch,
    sample_random_mdp,
)
from evarl.policy import (
    GradientEstimate,
    MlpPolicy,
    TabularSoftmaxPolicy,
    action_distribution,
    apply_update,
    evarl_gradient,
    paired_start_states,
    reinforce_gradient,
)
from evarl.predictors import AssessmentDataset, LinearPredictor

from oracles import central_difference, expected_plugin, expected_reinforce, expected_split


def chain_mdp(horizon=2, gamma=0.9):
    P = np.array([[[0.7, 0.3], [0.2, 0.8]], [[0.5, 0.5], [0.9, 0.1]]])
    R = np.array([[1.0, 0.0], [0.5, 2.0]])
    return TabularMdp(P, R, gamma, np.array([0.6, 0.4]), horizon)


def bandit():
    return TabularMdp(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), 1.0, np.ones(1), 1)


def exact_penalized(mdp, spec, predictor, beta):
    """``J - beta * sum_s mu(s) (V(s) - prediction from expected assessment returns)^2``."""

    def f(policy):
        V = exact_values(mdp, policy)
        data = AssessmentDataset.exact(spec, mdp, policy)
        err = V - predictor.predict_batch(mdp.embeddings, data)
        return float(mdp.start_dist @ V - beta * mdp.start_dist @ (err * err))

    return f


class TestSoftmaxPolicy:
    def test_uniform(self):
        np.testing.assert_array_equal(TabularSoftmaxPolicy.uniform(3, 4).table(), 0.25)

    def test_saturated(self):
        p = action_distribution(TabularSoftmaxPolicy([[10.0, -10.0]]), 0)
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-4)

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            action_distribution(TabularSoftmaxPolicy.uniform(2, 2), 2)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, seed):
        logits = np.random.default_rng(seed).normal(scale=30, size=(4, 3))
        np.testing.assert_allclose(TabularSoftmaxPolicy(logits).table().sum(1), 1.0, atol=1e-12)


class TestReinforce:
    def test_zero_returns_zero_gradient(self):
        mdp = chain_mdp().replace(rewards=np.zeros((2, 2)))
        pol = TabularSoftmaxPolicy(np.random.default_rng(0).normal(size=(2, 2)))
        batch = rollout_batch(mdp, pol, [0, 1, 1], 2, np.random.default_rng(0))
        np.testing.assert_array_equal(reinforce_gradient(pol, batch, 0.9).grads[0], 0.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_expectation_matches_performance_gradient(self, seed):
        mdp = chain_mdp()
        pol = TabularSoftmaxPolicy(np.random.default_rng(seed).normal(size=(2, 2)))
        expected = expected_reinforce(pol, mdp, lambda b: reinforce_gradient(pol, b, mdp.gamma).grads)
        fd = central_difference(lambda: exact_performance(mdp, pol), pol.parameters())
        np.testing.assert_allclose(expected[0], fd[0], atol=1e-6)

    def test_baseline_keeps_expectation(self):
        mdp = chain_mdp()
        pol = TabularSoftmaxPolicy(np.random.default_rng(1).normal(size=(2, 2)))
        b = np.array([3.0, -1.0])
        plain = expected_reinforce(pol, mdp, lambda x: reinforce_gradient(pol, x, mdp.gamma).grads)
        based = expected_reinforce(pol, mdp, lambda x: reinforce_gradient(pol, x, mdp.gamma, b).grads)
        np.testing.assert_allclose(based[0], plain[0], atol=1e-12)

    def test_mlp_expectation_matches_performance_gradient(self):
        mdp = chain_mdp()
        pol = MlpPolicy(np.array([[0.0, 1.0], [1.0, 0.5]]), 2, (4,), seed=3)
        expected = expected_reinforce(pol, mdp, lambda b: reinforce_gradient(pol, b, mdp.gamma).grads)
        fd = central_difference(lambda: exact_performance(mdp, pol), pol.parameters())
        for e, f in zip(expected, fd):
            np.testing.assert_allclose(e, f, atol=1e-6)

    def test_mlp_score_matches_tabular_on_one_hot(self):
        # a linear MLP on one-hot features is a tabular softmax
        pol = MlpPolicy(np.eye(3), 2, (), seed=0)
        tab = TabularSoftmaxPolicy(pol.layers[0][0].data + pol.layers[0][1].data)
        rng = np.random.default_rng(0)
        s, a, w = rng.integers(0, 3, 10), rng.integers(0, 2, 10), rng.normal(size=10)
        g_w, g_b = pol.score_gradient(s, a, w)
        np.testing.assert_allclose(g_w, tab.score_gradient(s, a, w)[0], atol=1e-12)
        np.testing.assert_allclose(g_b, tab.score_gradient(s, a, w)[0].sum(0), atol=1e-12)

    def test_bandit_ascent_converges(self):
        mdp = bandit()
        pol = TabularSoftmaxPolicy.uniform(1, 2)
        rng = np.random.default_rng(0)
        for _ in range(300):
            batch = rollout_batch(mdp, pol, np.zeros(16, int), 1, rng)
            apply_update(pol, reinforce_gradient(pol, batch, 1.0), 1.0)
        assert pol.table()[0, 0] > 0.97

    def test_bandit_exact_ascent_monotone(self):
        mdp = bandit()
        pol = TabularSoftmaxPolicy.uniform(1, 2)
        prev = exact_performance(mdp, pol)
        for _ in range(50):
            g = expected_reinforce(pol, mdp, lambda b: reinforce_gradient(pol, b, 1.0).grads)
            apply_update(pol, GradientEstimate(g), 0.5)
            cur = exact_performance(mdp, pol)
            assert cur > prev
            prev = cur

    def test_entropy_gradient(self):
        pol = TabularSoftmaxPolicy(np.random.default_rng(0).normal(size=(3, 4)))
        states = np.array([0, 1, 1, 2])

        def mean_entropy():
            p = pol.table()[states]
            return float(-(p * np.log(p)).sum(1).mean())

        fd = central_difference(mean_entropy, pol.parameters())
        np.testing.assert_allclose(pol.entropy_gradient(states)[0], fd[0], atol=1e-8)


class TestApplyUpdate:
    def test_zero_lr(self):
        pol = TabularSoftmaxPolicy(np.ones((2, 2)))
        apply_update(pol, GradientEstimate([np.ones((2, 2))]), 0.0)
        np.testing.assert_array_equal(pol.logits, 1.0)

    def test_two_half_steps(self):
        g = GradientEstimate([np.random.default_rng(0).normal(size=(2, 3))])
        a, b = TabularSoftmaxPolicy(np.zeros((2, 3))), TabularSoftmaxPolicy(np.zeros((2, 3)))
        apply_update(a, g, 0.5)
        apply_update(a, g, 0.5)
        apply_update(b, g, 1.0)
        np.testing.assert_allclose(a.logits, b.logits, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_update(TabularSoftmaxPolicy(np.zeros((2, 2))), GradientEstimate([np.zeros(3)]), 0.1)


class TestEvarlGradient:
    def setup_method(self):
        self.mdp = sample_random_mdp(2, 2, True, np.random.default_rng(4), gamma=0.9, horizon=2)
        self.spec = AssessmentSpec([1], horizon=2, gamma=1.0)
        self.pred = LinearPredictor(sigma=1.0)
        self.pol = TabularSoftmaxPolicy(np.random.default_rng(0).normal(size=(2, 2)))

    def batches(self, rng, n_pairs=4):
        starts = paired_start_states(self.mdp.start_dist, n_pairs, rng)
        deploy = rollout_batch(self.mdp, self.pol, starts, 2, rng)
        env = self.spec.environment(self.mdp)
        assess = [rollout_batch(env, self.pol, self.spec.start_states, 2, rng) for _ in range(2)]
        return deploy, assess

    def test_beta_zero_is_reinforce_bitwise(self):
        deploy, assess = self.batches(np.random.default_rng(0))
        a = evarl_gradient(self.pol, self.mdp, self.spec, deploy, assess, self.pred, 0.0)
        b = reinforce_gradient(self.pol, deploy, self.mdp.gamma)
        assert a.grads[0].tobytes() == b.grads[0].tobytes()

    def test_negative_beta_rejected(self):
        deploy, assess = self.batches(np.random.default_rng(0))
        with pytest.raises(ValueError):
            evarl_gradient(self.pol, self.mdp, self.spec, deploy, assess, self.pred, -0.1)

    def test_unpaired_rejected(self):
        deploy, assess = self.batches(np.random.default_rng(0))
        odd = deploy.subset([0, 1, 2])
        with pytest.raises(ValueError):
            evarl_gradient(self.pol, self.mdp, self.spec, odd, assess, self.pred, 0.1)

    def test_perfect_predictor_no_penalty(self):
        class Oracle:
            def predict_with_return_grad(self, queries, data):
                n = len(queries)
                return self.targets[:n], np.ones((n, data.k))

        deploy, assess = self.batches(np.random.default_rng(1))
        oracle = Oracle()
        oracle.targets = deploy.returns(self.mdp.gamma)
        for pairing, sets in (("split", assess), ("plugin", assess[:1])):
            g = evarl_gradient(self.pol, self.mdp, self.spec, deploy, sets, oracle, 0.5, pairing=pairing)
            pg = reinforce_gradient(self.pol, deploy, self.mdp.gamma)
            np.testing.assert_allclose(g.grads[0], pg.grads[0], atol=1e-12)
            assert g.diagnostics["mean_penalty"] == 0.0

    @pytest.mark.parametrize("beta", [0.05, 0.5])
    def test_split_expectation_matches_exact_objective(self, beta):
        expected = expected_split(
            self.pol, self.mdp, self.spec,
            lambda d, A: evarl_gradient(self.pol, self.mdp, self.spec, d, A, self.pred, beta).grads,
        )
        fd = central_difference(lambda: exact_penalized(self.mdp, self.spec, self.pred, beta)(self.pol),
                                self.pol.parameters())
        np.testing.assert_allclose(expected[0], fd[0], atol=1e-4)

    def test_split_expectation_stochastic_two_state_assessment(self):
        mdp = chain_mdp(horizon=1)
        spec = AssessmentSpec([0, 1], horizon=1, gamma=1.0)
        pred = LinearPredictor(sigma=0.7)
        pol = TabularSoftmaxPolicy(np.random.default_rng(3).normal(size=(2, 2)))
        expected = expected_split(
            pol, mdp, spec, lambda d, A: evarl_gradient(pol, mdp, spec, d, A, pred, 0.3).grads
        )
        fd = central_difference(lambda: exact_penalized(mdp, spec, pred, 0.3)(pol), pol.parameters())
        np.testing.assert_allclose(expected[0], fd[0], atol=1e-4)

    def test_plugin_is_biased(self):
        mdp = chain_mdp(horizon=2)
        spec = AssessmentSpec([1], horizon=2, gamma=1.0)
        pol = TabularSoftmaxPolicy(np.random.default_rng(3).normal(size=(2, 2)))
        beta = 0.5
        plugin = expected_plugin(
            pol, mdp, spec,
            lambda d, A: evarl_gradient(pol, mdp, spec, d, A, self.pred, beta, pairing="plugin").grads,
        )
        fd = central_difference(lambda: exact_penalized(mdp, spec, self.pred, beta)(pol), pol.parameters())
        # the same samples feed the residual and the gradient factor, so the
        # plug-in form picks up a covariance term on stochastic returns
        assert np.max(np.abs(plugin[0] - fd[0])) > 1e-3

    def test_mlp_path_runs(self):
        mdp = make_gridworld(3, 3, goals=[(2, 2)], horizon=4)
        spec = AssessmentSpec([0, 4], horizon=3)
        pol = MlpPolicy(mdp.embeddings, 4, (8,), seed=0)
        rng = np.random.default_rng(0)
        deploy = rollout_batch(mdp, pol, paired_start_states(mdp.start_dist, 4, rng), 4, rng)
        assess = [rollout_batch(spec.environment(mdp), pol, spec.start_states, 3, rng) for _ in range(2)]
        g = evarl_gradient(pol, mdp, spec, deploy, assess, LinearPredictor(), 0.2)
        assert [x.shape for x in g.grads] == [p.shape for p in pol.parameters()]


def test_paired_start_states():
    s = paired_start_states(np.array([0.2, 0.0, 0.8]), 50, np.random.default_rng(0))
    assert len(s) == 100
    np.testing.assert_array_equal(s[0::2], s[1::2])
    assert 1 not in s
