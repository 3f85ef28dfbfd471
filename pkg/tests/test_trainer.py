import json
import os

import numpy as np
import pytest

from evarl.mdp import AssessmentSpec, exact_performance, make_gridworld
from evarl.policy import TabularSoftmaxPolicy
from evarl.predictors import LinearPredictor, TransformerPredictor
from evarl.trainer import (
    LOG_COLUMNS,
    TrainerConfig,
    TrainLog,
    TrainRecord,
    evaluate_policy,
    pretrain_predictor_from_standard_run,
    run_evarl,
    run_plain_pg,
    select_assessment_states,
)


def small_world(goal_reward=10.0):
    return make_gridworld(3, 3, goals=[(2, 2)], goal_reward=goal_reward, slip=0.1, horizon=6, gamma=0.95)


SPEC = AssessmentSpec([0, 1, 3], horizon=4)


def small_predictor(seed=0, scale=10.0):
    return TransformerPredictor(2, 3, hidden=8, heads=2, layers=1, seed=seed, return_scale=scale)


def cfg(**kw):
    base = dict(
        total_interactions=1200, batch_size=16, policy_lr=0.05, predictor_optimizer="adam",
        predictor_lr=3e-3, predictor_batch_size=32, predictor_batches_per_epoch=1,
        buffer_threshold=64, recent_policies=8, n_pred=2,
    )
    base.update(kw)
    return TrainerConfig(**base)


class TestConfig:
    def test_frozen_needs_checkpoint(self):
        with pytest.raises(ValueError, match="checkpoint"):
            TrainerConfig(predictor_mode="frozen")

    def test_threshold_must_fit_window(self):
        with pytest.raises(ValueError, match="buffer_threshold"):
            TrainerConfig(buffer_threshold=1000, recent_policies=2, batch_size=64)

    def test_split_needs_even_batch(self):
        with pytest.raises(ValueError):
            TrainerConfig(batch_size=15)

    def test_negative_beta(self):
        with pytest.raises(ValueError):
            TrainerConfig(beta=-1.0)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            TrainerConfig(predictor_mode="sometimes")


class TestTrainLog:
    def test_strictly_increasing(self):
        log = TrainLog(0, 0.0, "none")
        log.append(TrainRecord(10, 1.0, np.nan, np.nan, np.nan, False))
        with pytest.raises(ValueError):
            log.append(TrainRecord(10, 1.0, np.nan, np.nan, np.nan, False))

    def test_csv_columns(self):
        log = TrainLog(3, 0.1, "frozen")
        log.append(TrainRecord(16, 0.1 + 0.2, 1.0, 2.0, np.nan, True))
        header, row = log.to_csv().strip().split("\n")
        assert header.split(",") == list(LOG_COLUMNS)
        assert row.split(",")[3] == repr(0.1 + 0.2)


class TestRunEvarl:
    def test_beta_zero_equals_plain_pg_bitwise(self):
        mdp = small_world()
        a = run_evarl(mdp, SPEC, cfg(beta=0.0, baseline_lr=0.5), small_predictor(), TabularSoftmaxPolicy.uniform(9, 4))
        b = run_plain_pg(mdp, cfg(beta=0.0, baseline_lr=0.5), TabularSoftmaxPolicy.uniform(9, 4))
        assert a.policy.logits.tobytes() == b.policy.logits.tobytes()
        np.testing.assert_array_equal(a.log.column("episodic_return"), b.log.column("episodic_return"))
        np.testing.assert_array_equal(a.log.column("interactions"), b.log.column("interactions"))
        assert a.predictor_updates > 0 and a.penalty_steps == 0

    def test_warmup_covering_budget_never_penalizes(self):
        res = run_evarl(small_world(), SPEC, cfg(beta=0.5, warmup_interactions=10**6), small_predictor(),
                        TabularSoftmaxPolicy.uniform(9, 4))
        assert res.penalty_steps == 0
        assert not any(r.used_penalty for r in res.log.records)

    def test_penalty_used_after_predictor_available(self):
        res = run_evarl(small_world(), SPEC, cfg(beta=0.5), small_predictor(), TabularSoftmaxPolicy.uniform(9, 4))
        flags = [r.used_penalty for r in res.log.records]
        assert not flags[0] and flags[-1]
        first = flags.index(True)
        assert all(flags[first:])

    def test_linear_predictor_penalizes_immediately(self):
        res = run_evarl(small_world(), SPEC, cfg(beta=0.5), LinearPredictor(sigma=0.5), TabularSoftmaxPolicy.uniform(9, 4))
        assert res.penalty_steps == len(res.log.records)

    def test_budget_counts_deployment_steps(self):
        res = run_evarl(small_world(), SPEC, cfg(beta=0.1), small_predictor(), TabularSoftmaxPolicy.uniform(9, 4))
        inter = res.log.column("interactions")
        np.testing.assert_array_equal(np.diff(inter), 16 * 6)
        assert inter[-1] >= 1200 and inter[-2] < 1200

    def test_buffer_keeps_recent_policies(self):
        res = run_evarl(small_world(), SPEC, cfg(beta=0.1), small_predictor(), TabularSoftmaxPolicy.uniform(9, 4))
        n = len(res.log.records)
        assert res.buffer.policy_indices == list(range(n - 8, n))

    def test_deterministic(self):
        runs = [
            run_evarl(small_world(), SPEC, cfg(beta=0.1, seed=4), small_predictor(), TabularSoftmaxPolicy.uniform(9, 4))
            for _ in range(2)
        ]
        assert runs[0].log.to_csv() == runs[1].log.to_csv()

    def test_seeds_differ(self):
        a = run_plain_pg(small_world(), cfg(seed=0), TabularSoftmaxPolicy.uniform(9, 4))
        b = run_plain_pg(small_world(), cfg(seed=1), TabularSoftmaxPolicy.uniform(9, 4))
        assert a.log.to_csv() != b.log.to_csv()

    def test_plain_pg_improves(self):
        mdp = small_world()
        res = run_plain_pg(mdp, cfg(total_interactions=6000, policy_lr=0.05, baseline_lr=0.5),
                           TabularSoftmaxPolicy.uniform(9, 4))
        assert exact_performance(mdp, res.policy) > exact_performance(mdp, TabularSoftmaxPolicy.uniform(9, 4)) + 1.0

    def test_frozen_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            run_evarl(small_world(), SPEC, cfg(predictor_mode="frozen", predictor_checkpoint=str(tmp_path / "x.json")),
                      None, TabularSoftmaxPolicy.uniform(9, 4))

    def test_frozen_predictor_unchanged(self, tmp_path):
        pred = small_predictor(seed=3)
        path = tmp_path / "pred.json"
        pred.save(path)
        res = run_evarl(small_world(), SPEC, cfg(beta=0.2, predictor_mode="frozen", predictor_checkpoint=str(path)),
                        None, TabularSoftmaxPolicy.uniform(9, 4))
        for a, b in zip(pred.parameters(), res.predictor.parameters()):
            assert a.data.tobytes() == b.data.tobytes()
        assert res.predictor_updates == 0 and res.penalty_steps == len(res.log.records)

    def test_checkpoints_reload_bitwise(self, tmp_path):
        res = run_evarl(small_world(), SPEC,
                        cfg(beta=0.1, total_interactions=960, checkpoint_every=5, checkpoint_dir=str(tmp_path)),
                        small_predictor(), TabularSoftmaxPolicy.uniform(9, 4))
        assert len(res.log.records) == 10
        assert sorted(os.listdir(tmp_path)) == ["checkpoint_000005.json", "checkpoint_000010.json"]
        doc = json.loads((tmp_path / "checkpoint_000010.json").read_text())
        back = TransformerPredictor.from_dict(doc["predictor"])
        for a, b in zip(res.predictor.parameters(), back.parameters()):
            assert a.data.tobytes() == b.data.tobytes()
        logits = np.asarray(doc["policy"]["params"][0]["data"]).reshape(9, 4)
        assert logits.tobytes() == res.policy.logits.tobytes()


class TestPretrain:
    def test_pretraining_fits_its_buffer(self):
        mdp = make_gridworld(3, 3, goals=[(2, 2)], goal_reward=100.0, slip=0.0, horizon=6, gamma=0.95)
        pred, rep, _ = pretrain_predictor_from_standard_run(
            mdp, SPEC, 3000, small_predictor(scale=100.0), seed=0, policy_lr=0.05, batch_size=16,
            epochs=60, predictor_batch_size=64, lr=3e-3,
        )
        assert rep.final_mse * 10 <= rep.initial_mse
        assert rep.heldout_mae < rep.constant_mae


def test_select_assessment_states():
    mdp = small_world()
    states = select_assessment_states(mdp, TabularSoftmaxPolicy.uniform(9, 4), 4, np.random.default_rng(0))
    assert len(states) == 4 == len(set(states)) and states == sorted(states)
    with pytest.raises(ValueError):
        select_assessment_states(mdp, TabularSoftmaxPolicy.uniform(9, 4), 10, np.random.default_rng(0))


def test_evaluate_policy_without_predictor():
    mdp = small_world()
    pol = TabularSoftmaxPolicy.uniform(9, 4)
    J, mae = evaluate_policy(mdp, SPEC, pol, None, np.random.default_rng(0))
    assert J == exact_performance(mdp, pol) and np.isnan(mae)
