"""Training loop alternating predictor fitting and policy updates.

Random streams are split per purpose (deployment rollouts, assessment
rollouts, predictor minibatches) so that switching the predictability
penalty on or off never perturbs the deployment stream: with ``beta = 0``
the policy parameters follow exactly the plain policy-gradient run.
Only deployment steps count toward the interaction budget.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .mdp import AssessmentSpec, TabularMdp, exact_performance, exact_values, rollout_batch
from .policy import (
    GradientEstimate,
    apply_update,
    evarl_gradient,
    paired_start_states,
    reinforce_gradient,
)
from .predictors import (
    AssessmentDataset,
    PredictorBuffer,
    TransformerPredictor,
    buffer_mse,
    make_optimizer,
    train_predictor,
)

MODES = ("co-learned", "frozen", "none")
LOG_COLUMNS = (
    "interactions", "seed", "beta", "episodic_return", "pred_mae", "pred_mse",
    "predictor_loss", "mode",
)


@dataclass
class TrainerConfig:
    beta: float = 0.0
    policy_lr: float = 0.1
    predictor_lr: float = 1e-3
    n_pred: int = 5
    n_policy: int = 1
    warmup_interactions: int = 0
    warmup_mse_threshold: Optional[float] = None
    total_interactions: int = 200_000
    batch_size: int = 64
    deploy_horizon: Optional[int] = None
    buffer_threshold: int = 1024
    recent_policies: int = 16
    predictor_mode: str = "co-learned"
    predictor_checkpoint: Optional[str] = None
    predictor_batch_size: int = 256
    predictor_batches_per_epoch: Optional[int] = None
    predictor_optimizer: str = "sgd"
    pairing: str = "split"
    baseline_lr: Optional[float] = None
    entropy_coef: float = 0.0
    checkpoint_every: Optional[int] = None
    checkpoint_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        counts = dict(
            n_pred=self.n_pred, n_policy=self.n_policy, total_interactions=self.total_interactions,
            batch_size=self.batch_size, buffer_threshold=self.buffer_threshold,
            recent_policies=self.recent_policies, predictor_batch_size=self.predictor_batch_size,
        )
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.warmup_interactions < 0:
            raise ValueError("warmup_interactions must be non-negative")
        if self.predictor_mode not in MODES:
            raise ValueError(f"predictor_mode must be one of {MODES}")
        if self.predictor_mode == "frozen" and not self.predictor_checkpoint:
            raise ValueError("frozen predictor mode requires a predictor checkpoint path")
        if self.pairing not in ("split", "plugin"):
            raise ValueError(f"unknown pairing {self.pairing!r}")
        if self.pairing == "split" and self.batch_size % 2:
            raise ValueError("split pairing needs an even batch size")
        if self.predictor_mode == "co-learned" and (
            self.buffer_threshold > self.recent_policies * self.batch_size
        ):
            raise ValueError(
                "buffer_threshold exceeds what recent_policies * batch_size records can hold"
            )
        if self.predictor_optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown predictor optimizer {self.predictor_optimizer!r}")


@dataclass
class TrainRecord:
    interactions: int
    episodic_return: float
    pred_mae: float
    pred_mse: float
    predictor_loss: float
    used_penalty: bool


@dataclass
class TrainLog:
    seed: int
    beta: float
    mode: str
    records: List[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        if self.records and rec.interactions <= self.records[-1].interactions:
            raise ValueError("interaction counts must be strictly increasing")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def rows(self):
        for r in self.records:
            yield (
                r.interactions, self.seed, self.beta, r.episodic_return, r.pred_mae,
                r.pred_mse, r.predictor_loss, self.mode,
            )

    def to_csv(self, header: bool = True) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        if header:
            w.writerow(LOG_COLUMNS)
        for row in self.rows():
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
        return out.getvalue()


@dataclass
class TrainResult:
    log: TrainLog
    policy: object
    predictor: object
    buffer: PredictorBuffer
    baseline: Optional[np.ndarray]
    penalty_steps: int
    predictor_updates: int


def rng_streams(seed: int):
    """Independent generators for deployment, assessment and predictor use."""
    seqs = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(s) for s in seqs)


def _is_trainable(predictor) -> bool:
    return isinstance(predictor, TransformerPredictor)


def collect_deployment(mdp, policy, n, horizon, rng, paired=True):
    if paired:
        starts = paired_start_states(mdp.start_dist, n // 2, rng)
    else:
        starts = rng.choice(mdp.n_states, size=n, p=mdp.start_dist)
    return rollout_batch(mdp, policy, starts, horizon, rng)


def collect_assessment(mdp, spec: AssessmentSpec, policy, rng):
    return rollout_batch(spec.environment(mdp), policy, spec.start_states, spec.horizon, rng)


def _update_baseline(baseline, batch, gamma, lr):
    T = batch.horizon
    disc = gamma ** np.arange(T)
    # undiscounted-from-t reward-to-go as the per-state target
    togo = np.cumsum((batch.rewards * disc)[:, ::-1], axis=1)[:, ::-1] / disc
    s = batch.states[:, :-1].ravel()
    err = togo.ravel() - baseline[s]
    total = np.zeros_like(baseline)
    count = np.zeros_like(baseline)
    np.add.at(total, s, err)
    np.add.at(count, s, 1.0)
    seen = count > 0
    baseline[seen] += lr * total[seen] / count[seen]


def value_error(mdp, predictor, policy, data: AssessmentDataset):
    V = exact_values(mdp, policy)
    err = V - predictor.predict_batch(mdp.embeddings, data)
    mu = mdp.start_dist
    return float(mu @ np.abs(err)), float(mu @ (err * err))


def run_evarl(
    mdp: TabularMdp,
    spec: AssessmentSpec,
    config: TrainerConfig,
    predictor,
    policy,
) -> TrainResult:
    """Run the alternating predictor/policy loop until the budget is spent.

    ``predictor_mode="none"`` gives the plain policy-gradient trainer (no
    assessment rollouts, no predictor).  In ``frozen`` mode the predictor
    parameters are loaded from ``config.predictor_checkpoint``.
    """
    cfg = config
    if cfg.predictor_mode == "frozen":
        if not os.path.exists(cfg.predictor_checkpoint):
            raise FileNotFoundError(cfg.predictor_checkpoint)
        with open(cfg.predictor_checkpoint) as fh:
            doc = json.load(fh)
        if predictor is None:
            predictor = TransformerPredictor.from_dict(doc)
        else:
            predictor.load_dict(doc)
    rng_deploy, rng_assess, rng_pred = rng_streams(cfg.seed)
    horizon = cfg.deploy_horizon or mdp.horizon
    log = TrainLog(cfg.seed, cfg.beta, cfg.predictor_mode)
    buf = PredictorBuffer(cfg.recent_policies, cfg.buffer_threshold)
    baseline = np.zeros(mdp.n_states) if cfg.baseline_lr is not None else None
    use_predictor = cfg.predictor_mode != "none"
    trainable = use_predictor and cfg.predictor_mode == "co-learned" and _is_trainable(predictor)
    opt = make_optimizer(cfg.predictor_optimizer, cfg.predictor_lr) if trainable else None
    available = use_predictor and not trainable
    mse_ok = False
    interactions = 0
    policy_index = 0
    penalty_steps = 0
    predictor_updates = 0
    n_sets = 2 if cfg.pairing == "split" else 1

    while interactions < cfg.total_interactions:
        loss = float("nan")
        if trainable and buf.has_sufficient_data():
            losses = train_predictor(
                predictor, buf, cfg.n_pred, cfg.predictor_batch_size, cfg.predictor_lr,
                rng_pred, cfg.predictor_batches_per_epoch, opt,
            )
            loss = float(np.mean(losses[-max(1, len(losses) // cfg.n_pred):]))
            available = True
            predictor_updates += 1
            if cfg.warmup_mse_threshold is not None:
                mse_ok = buffer_mse(predictor, buf) < cfg.warmup_mse_threshold
        for _ in range(cfg.n_policy):
            if interactions >= cfg.total_interactions:
                break
            deploy = collect_deployment(
                mdp, policy, cfg.batch_size, horizon, rng_deploy, cfg.pairing == "split"
            )
            assess = (
                [collect_assessment(mdp, spec, policy, rng_assess) for _ in range(n_sets)]
                if use_predictor else []
            )
            warm = interactions >= cfg.warmup_interactions or mse_ok
            interactions += deploy.actions.size
            mae = mse = float("nan")
            datasets = [
                AssessmentDataset.from_rollouts(spec, spec.environment(mdp), b) for b in assess
            ]
            if use_predictor and available:
                mae, mse = value_error(mdp, predictor, policy, datasets[0])
            if use_predictor and available and warm:
                grad = evarl_gradient(
                    policy, mdp, spec, deploy, assess, predictor, cfg.beta, baseline,
                    cfg.pairing, cfg.entropy_coef,
                )
                penalty_steps += cfg.beta > 0
            else:
                grad = reinforce_gradient(policy, deploy, mdp.gamma, baseline, cfg.entropy_coef)
            apply_update(policy, grad, cfg.policy_lr)
            if baseline is not None:
                _update_baseline(baseline, deploy, mdp.gamma, cfg.baseline_lr)
            if trainable:
                g_d = deploy.returns(mdp.gamma)
                for j, data in enumerate(datasets):
                    rows = np.arange(j, len(deploy), n_sets)
                    buf.insert_many(
                        data, mdp.embeddings[deploy.start_states[rows]], g_d[rows], policy_index
                    )
            log.append(TrainRecord(
                interactions, grad.diagnostics["mean_return"], mae, mse, loss,
                bool(use_predictor and available and warm and cfg.beta > 0),
            ))
            loss = float("nan")
            policy_index += 1
            if cfg.checkpoint_every and cfg.checkpoint_dir and policy_index % cfg.checkpoint_every == 0:
                _write_checkpoint(cfg.checkpoint_dir, policy_index, policy, predictor)
    return TrainResult(log, policy, predictor, buf, baseline, penalty_steps, predictor_updates)


def _write_checkpoint(directory, step, policy, predictor) -> None:
    os.makedirs(directory, exist_ok=True)
    doc = {"step": step, "policy": policy.to_dict()}
    if isinstance(predictor, TransformerPredictor):
        doc["predictor"] = predictor.to_dict()
    path = os.path.join(directory, f"checkpoint_{step:06d}.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def run_plain_pg(mdp, config: TrainerConfig, policy) -> TrainResult:
    """Plain policy gradient with the same seeding as :func:`run_evarl`."""
    cfg = TrainerConfig(**{**asdict(config), "predictor_mode": "none", "predictor_checkpoint": None})
    spec = AssessmentSpec([0])
    return run_evarl(mdp, spec, cfg, None, policy)


def select_assessment_states(
    mdp: TabularMdp, policy, k: int, rng: np.random.Generator, n_rollouts: int = 64
) -> List[int]:
    """Sample ``k`` distinct states visited by rollouts of a base policy.

    States are drawn in proportion to visit counts; if fewer than ``k``
    distinct states are visited the remainder are the lowest unvisited
    indices.
    """
    if not 1 <= k <= mdp.n_states:
        raise ValueError("k must be between 1 and the number of states")
    starts = rng.choice(mdp.n_states, size=n_rollouts, p=mdp.start_dist)
    batch = rollout_batch(mdp, policy, starts, mdp.horizon, rng)
    counts = np.bincount(batch.states.ravel(), minlength=mdp.n_states).astype(np.float64)
    visited = np.flatnonzero(counts)
    take = min(k, len(visited))
    chosen = list(rng.choice(visited, size=take, replace=False, p=counts[visited] / counts.sum()))
    rest = [s for s in range(mdp.n_states) if counts[s] == 0][: k - take]
    return sorted(int(s) for s in chosen + rest)


@dataclass
class PretrainReport:
    initial_mse: float
    final_mse: float
    heldout_mae: float
    constant_mae: float
    losses: List[float]
    n_records: int


def pretrain_predictor_from_standard_run(
    mdp: TabularMdp,
    spec: AssessmentSpec,
    budget: int,
    predictor: TransformerPredictor,
    seed: int = 0,
    policy=None,
    policy_lr: float = 0.1,
    batch_size: int = 64,
    epochs: int = 200,
    predictor_batch_size: int = 256,
    lr: float = 1e-3,
    optimizer: str = "adam",
    holdout_fraction: float = 0.1,
):
    """Fit ``predictor`` on records from every iterate of a plain PG run.

    The last ``holdout_fraction`` of policy iterates is held out of
    training and used to compare the predictor against the constant
    training-mean predictor.  Returns ``(predictor, report, policy)``.
    """
    from .policy import TabularSoftmaxPolicy

    if policy is None:
        policy = TabularSoftmaxPolicy.uniform(mdp.n_states, mdp.n_actions)
    rng_deploy, rng_assess, rng_pred = rng_streams(seed)
    buf = PredictorBuffer(recent_policies=None, threshold=1)
    env_a = spec.environment(mdp)
    interactions, index = 0, 0
    while interactions < budget:
        deploy = collect_deployment(mdp, policy, batch_size, mdp.horizon, rng_deploy, False)
        data = AssessmentDataset.from_rollouts(spec, env_a, collect_assessment(mdp, spec, policy, rng_assess))
        buf.insert_many(data, mdp.embeddings[deploy.start_states], deploy.returns(mdp.gamma), index)
        apply_update(policy, reinforce_gradient(policy, deploy, mdp.gamma), policy_lr)
        interactions += deploy.actions.size
        index += 1
    n_hold = max(1, int(math.ceil(holdout_fraction * index))) if holdout_fraction > 0 else 0
    train_idx = list(range(index - n_hold))
    hold_idx = list(range(index - n_hold, index))
    train_buf = buf.restricted(train_idx)
    t = train_buf.arrays()[3]
    initial = buffer_mse(predictor, train_buf)
    opt = make_optimizer(optimizer, lr)
    losses = train_predictor(predictor, train_buf, epochs, predictor_batch_size, lr, rng_pred, None, opt)
    final = buffer_mse(predictor, train_buf)
    heldout = constant = float("nan")
    if hold_idx:
        hs, hr, hq, ht, _ = buf.arrays(hold_idx)
        pred = predictor.forward(hq, hs, hr).data
        heldout = float(np.mean(np.abs(pred - ht)))
        constant = float(np.mean(np.abs(t.mean() - ht)))
    report = PretrainReport(initial, final, heldout, constant, losses, len(t))
    return predictor, report, policy


def evaluate_policy(mdp, spec, policy, predictor, rng, n_datasets: int = 20):
    """Exact return and predictor MAE averaged over fresh assessment datasets."""
    J = exact_performance(mdp, policy)
    if predictor is None:
        return J, float("nan")
    env_a = spec.environment(mdp)
    maes = [
        value_error(mdp, predictor, policy,
                    AssessmentDataset.from_rollouts(spec, env_a, collect_assessment(mdp, spec, policy, rng)))[0]
        for _ in range(n_datasets)
    ]
    return J, float(np.mean(maes))
