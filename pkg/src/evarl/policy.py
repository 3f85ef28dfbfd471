"""Categorical policies and score-function gradient estimators.

Policies expose ``table()`` (``[S, A]`` action probabilities),
``parameters()`` (arrays updated in place) and
``score_gradient(states, actions, weights)`` returning
``sum_j w_j grad log pi(a_j | s_j)`` per parameter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .mdp import AssessmentSpec, TabularMdp, TrajectoryBatch
from .predictors import AssessmentDataset


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class TabularSoftmaxPolicy:
    """``pi(a|s) = softmax(theta[s])``."""

    def __init__(self, logits):
        self.logits = np.array(logits, dtype=np.float64)
        if self.logits.ndim != 2:
            raise ValueError("logits must be a [states, actions] table")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularSoftmaxPolicy":
        return cls(np.zeros((n_states, n_actions)))

    @property
    def n_states(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def table(self) -> np.ndarray:
        return softmax_rows(self.logits)

    def parameters(self) -> List[np.ndarray]:
        return [self.logits]

    def score_gradient(self, states, actions, weights) -> List[np.ndarray]:
        s = np.asarray(states, dtype=np.int64).reshape(-1)
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        g = np.zeros_like(self.logits)
        np.add.at(g, (s, a), w)
        np.add.at(g, s, -w[:, None] * self.table()[s])
        return [g]

    def entropy_gradient(self, states) -> List[np.ndarray]:
        """Gradient of the mean action entropy over ``states``."""
        s = np.asarray(states, dtype=np.int64).reshape(-1)
        p = self.table()
        logp = np.log(np.maximum(p, 1e-300))
        H = -(p * logp).sum(axis=1, keepdims=True)
        dH = -p * (logp + H)
        g = np.zeros_like(self.logits)
        np.add.at(g, s, dH[s] / len(s))
        return [g]

    def copy(self) -> "TabularSoftmaxPolicy":
        return TabularSoftmaxPolicy(self.logits.copy())

    def to_dict(self) -> dict:
        doc = ad.params_to_dict([("logits", self.logits)])
        doc["policy"] = "tabular_softmax"
        return doc


class MlpPolicy:
    """Tanh MLP from state embeddings to action logits."""

    def __init__(self, embeddings, n_actions: int, hidden: Sequence[int] = (32,), seed: int = 0):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.n_actions = n_actions
        rng = np.random.default_rng(seed)
        sizes = [self.embeddings.shape[1], *hidden, n_actions]
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = ad.Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out)), True, f"w{i}")
            b = ad.Tensor(np.zeros(fan_out), True, f"b{i}")
            self.layers.append((w, b))

    @property
    def n_states(self) -> int:
        return self.embeddings.shape[0]

    def tensors(self) -> List[ad.Tensor]:
        return [t for layer in self.layers for t in layer]

    def parameters(self) -> List[np.ndarray]:
        return [t.data for t in self.tensors()]

    def logits(self, states=None) -> ad.Tensor:
        x = ad.Tensor(self.embeddings if states is None else self.embeddings[states])
        for i, (w, b) in enumerate(self.layers):
            x = ad.matmul(x, w) + b
            if i < len(self.layers) - 1:
                x = ad.tanh(x)
        return x

    def table(self) -> np.ndarray:
        return softmax_rows(self.logits().data)

    def log_prob_sum(self, states, actions, weights) -> ad.Tensor:
        s = np.asarray(states, dtype=np.int64).reshape(-1)
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        logp = ad.log_softmax(self.logits(s))
        taken = logp[np.arange(len(s)), a]
        return ad.tsum(taken * np.asarray(weights, dtype=np.float64).reshape(-1))

    def score_gradient(self, states, actions, weights) -> List[np.ndarray]:
        return ad.grad(self.log_prob_sum(states, actions, weights), self.tensors())

    def entropy_gradient(self, states) -> List[np.ndarray]:
        s = np.asarray(states, dtype=np.int64).reshape(-1)
        logits = self.logits(s)
        p = ad.softmax(logits)
        H = -ad.tsum(p * ad.log_softmax(logits)) * (1.0 / len(s))
        return ad.grad(H, self.tensors())

    def copy(self) -> "MlpPolicy":
        other = MlpPolicy.__new__(MlpPolicy)
        other.embeddings = self.embeddings
        other.n_actions = self.n_actions
        other.layers = [
            (ad.Tensor(w.data.copy(), True, w.name), ad.Tensor(b.data.copy(), True, b.name))
            for w, b in self.layers
        ]
        return other

    def to_dict(self) -> dict:
        doc = ad.params_to_dict([(t.name, t) for t in self.tensors()])
        doc["policy"] = "mlp"
        return doc


def action_distribution(policy, state: int) -> np.ndarray:
    table = policy.table()
    if not 0 <= int(state) < table.shape[0]:
        raise ValueError(f"invalid state {state}")
    return table[int(state)]


@dataclass
class GradientEstimate:
    grads: List[np.ndarray]
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def __add__(self, other: "GradientEstimate") -> "GradientEstimate":
        return GradientEstimate(
            [a + b for a, b in zip(self.grads, other.grads)],
            {**self.diagnostics, **other.diagnostics},
        )

    def scaled(self, c: float) -> "GradientEstimate":
        return GradientEstimate([c * g for g in self.grads], dict(self.diagnostics))


def apply_update(policy, grad: GradientEstimate, lr: float) -> None:
    """Gradient ascent step ``theta <- theta + lr * grad`` in place."""
    params = policy.parameters()
    if len(params) != len(grad.grads) or any(
        p.shape != g.shape for p, g in zip(params, grad.grads)
    ):
        raise ValueError("gradient shapes do not match policy parameters")
    if lr == 0:
        return
    for p, g in zip(params, grad.grads):
        p += lr * g


def _trajectory_weights(batch: TrajectoryBatch, per_traj: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(per_traj, dtype=np.float64)[:, None], batch.horizon, axis=1)


def reinforce_gradient(
    policy,
    batch: TrajectoryBatch,
    gamma: float,
    baseline=None,
    entropy_coef: float = 0.0,
) -> GradientEstimate:
    """Score-function estimate of the gradient of the expected discounted return.

    Uses ``sum_t grad log pi(a_t|s_t) (G_t - gamma^t b(s_t))`` with
    ``G_t = sum_{t' >= t} gamma^t' r_t'``, averaged over trajectories.
    ``baseline`` is an optional per-state array.
    """
    n, T = batch.rewards.shape
    disc = gamma ** np.arange(T)
    dr = batch.rewards * disc
    togo = np.cumsum(dr[:, ::-1], axis=1)[:, ::-1]
    if baseline is not None:
        togo = togo - disc * np.asarray(baseline, dtype=np.float64)[batch.states[:, :-1]]
    grads = policy.score_gradient(batch.states[:, :-1], batch.actions, togo / n)
    if entropy_coef:
        ent = policy.entropy_gradient(batch.states[:, :-1])
        grads = [g + entropy_coef * e for g, e in zip(grads, ent)]
    return GradientEstimate(grads, {"mean_return": float(dr.sum(axis=1).mean())})


def evarl_gradient(
    policy,
    mdp: TabularMdp,
    spec: AssessmentSpec,
    deploy: TrajectoryBatch,
    assess: Sequence[TrajectoryBatch],
    predictor,
    beta: float,
    baseline=None,
    pairing: str = "split",
    entropy_coef: float = 0.0,
) -> GradientEstimate:
    """Return gradient plus the predictability penalty gradient.

    ``assess`` holds one assessment rollout batch (``pairing="plugin"``) or
    two independent ones (``pairing="split"``), each with ``k`` rows in spec
    order.  With ``split``, deployment rows come in consecutive pairs
    sharing a start state; the residual of one member is multiplied by the
    gradient factor of the other so that the two factors are independent.
    ``plugin`` uses the same samples for both factors.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    pg = reinforce_gradient(policy, deploy, mdp.gamma, baseline, entropy_coef)
    if beta == 0:
        return pg
    n_sets = {"split": 2, "plugin": 1}.get(pairing)
    if n_sets is None:
        raise ValueError(f"unknown pairing {pairing!r}")
    if len(assess) != n_sets:
        raise ValueError(f"pairing {pairing!r} needs {n_sets} assessment batches, got {len(assess)}")
    env_a = spec.environment(mdp)
    data = [AssessmentDataset.from_rollouts(spec, env_a, b) for b in assess]
    g_d = deploy.returns(mdp.gamma)
    queries = mdp.embeddings[deploy.start_states]
    preds, dvdg = zip(*(predictor.predict_with_return_grad(queries, d) for d in data))

    n = len(deploy)
    w_deploy = np.zeros(n)
    w_assess = [np.zeros(spec.k) for _ in data]
    if pairing == "plugin":
        r = g_d - preds[0]
        c = 2.0 * beta / n
        w_deploy = -c * r * g_d
        w_assess[0] = c * (r @ dvdg[0]) * data[0].returns
        penalty = float(np.mean(r * r))
    else:
        if n % 2:
            raise ValueError("split pairing needs an even number of deployment trajectories")
        a_idx, b_idx = np.arange(0, n, 2), np.arange(1, n, 2)
        if np.any(deploy.start_states[a_idx] != deploy.start_states[b_idx]):
            raise ValueError("paired deployment trajectories must share their start state")
        r_a = g_d[a_idx] - preds[0][a_idx]
        r_b = g_d[b_idx] - preds[1][b_idx]
        c = beta / len(a_idx)  # 2 beta / P times the symmetrising 1/2
        w_deploy[b_idx] = -c * r_a * g_d[b_idx]
        w_deploy[a_idx] = -c * r_b * g_d[a_idx]
        w_assess[1] = c * (r_a @ dvdg[1][b_idx]) * data[1].returns
        w_assess[0] = c * (r_b @ dvdg[0][a_idx]) * data[0].returns
        penalty = float(np.mean(r_a * r_b))

    states = [deploy.states[:, :-1]] + [b.states[:, :-1] for b in assess]
    actions = [deploy.actions] + [b.actions for b in assess]
    weights = [_trajectory_weights(deploy, w_deploy)] + [
        _trajectory_weights(b, w) for b, w in zip(assess, w_assess)
    ]
    pen = policy.score_gradient(
        np.concatenate([s.ravel() for s in states]),
        np.concatenate([a.ravel() for a in actions]),
        np.concatenate([w.ravel() for w in weights]),
    )
    diag = dict(pg.diagnostics, mean_penalty=penalty)
    return GradientEstimate([g + p for g, p in zip(pg.grads, pen)], diag)


def paired_start_states(start_states, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n_pairs`` start states and duplicate each one consecutively."""
    p = np.asarray(start_states, dtype=np.float64)
    s = rng.choice(len(p), size=n_pairs, p=p)
    return np.repeat(s, 2)
