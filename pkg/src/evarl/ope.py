"""On- and off-policy evaluation baselines for tabular MDPs.

Estimators work on a :class:`BehaviorDataset` (trajectories plus the
behavior policy's probability of each taken action).  ``per_state`` runs an
estimator separately on the trajectories starting in each state, which is
what the value-estimate MAE benchmark compares against exact values.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .errors import UnsupportedActionError
from .mdp import TabularMdp, TrajectoryBatch, exact_values, policy_table, rollout_batch

OPE_COLUMNS = ("estimator", "mae", "se", "n_data")


@dataclass(frozen=True)
class BehaviorDataset:
    batch: TrajectoryBatch
    behavior_probs: np.ndarray
    gamma: float
    behavior_policy: Optional[np.ndarray] = None

    def __post_init__(self):
        probs = np.asarray(self.behavior_probs, dtype=np.float64)
        if probs.shape != self.batch.actions.shape:
            raise ValueError(
                f"behavior probabilities {probs.shape} do not match actions {self.batch.actions.shape}"
            )
        if np.any(probs <= 0):
            raise UnsupportedActionError("behavior probability of a taken action is zero")
        if np.any(probs > 1):
            raise ValueError("behavior probabilities must not exceed 1")
        object.__setattr__(self, "behavior_probs", probs)

    def __len__(self) -> int:
        return len(self.batch)

    @property
    def n_steps(self) -> int:
        return int(self.batch.actions.size)

    def subset(self, idx) -> "BehaviorDataset":
        return BehaviorDataset(
            self.batch.subset(idx), self.behavior_probs[idx], self.gamma, self.behavior_policy
        )

    def to_jsonl(self) -> str:
        lines = []
        for i in range(len(self)):
            lines.append(json.dumps({
                "states": self.batch.states[i].tolist(),
                "actions": self.batch.actions[i].tolist(),
                "rewards": self.batch.rewards[i].tolist(),
                "behavior_probs": self.behavior_probs[i].tolist(),
                "gamma": self.gamma,
            }))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "BehaviorDataset":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not recs:
            raise ValueError("empty dataset")
        batch = TrajectoryBatch(
            [r["states"] for r in recs], [r["actions"] for r in recs], [r["rewards"] for r in recs]
        )
        return cls(batch, [r["behavior_probs"] for r in recs], recs[0]["gamma"])


def collect_behavior_data(
    mdp: TabularMdp, behavior, start_states, horizon: int, rng: np.random.Generator
) -> BehaviorDataset:
    table = policy_table(behavior, mdp)
    batch = rollout_batch(mdp, table, start_states, horizon, rng)
    probs = table[batch.states[:, :-1], batch.actions]
    return BehaviorDataset(batch, probs, mdp.gamma, table)


def soften(policy, epsilon: float = 0.2) -> np.ndarray:
    """Mix a policy table with the uniform policy: ``(1 - eps) pi + eps / |A|``."""
    table = policy_table(policy)
    return (1.0 - epsilon) * table + epsilon / table.shape[1]


def _check_data(data: BehaviorDataset):
    if len(data) == 0:
        raise ValueError("estimators need at least one trajectory")


def _ratios(data: BehaviorDataset, policy, clip: Optional[float] = None) -> np.ndarray:
    """Cumulative per-decision weights ``w_t = prod_{k <= t} pi / pi_b``."""
    if np.any(data.behavior_probs <= 0):
        raise UnsupportedActionError("behavior probability of a taken action is zero")
    pi = policy_table(policy)
    rho = pi[data.batch.states[:, :-1], data.batch.actions] / data.behavior_probs
    w = np.cumprod(rho, axis=1)
    if clip is not None:
        w = np.minimum(w, clip)
    return w


def mc_estimate(returns) -> float:
    """Sample mean of on-policy returns (a dataset or an array of returns)."""
    if isinstance(returns, BehaviorDataset):
        returns = returns.batch.returns(returns.gamma)
    g = np.asarray(returns, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise ValueError("need at least one return")
    return float(g.mean())


def tis_estimate(data: BehaviorDataset, policy, clip: Optional[float] = None) -> float:
    """Trajectory importance sampling.  ``clip`` caps weights (diagnostic only)."""
    _check_data(data)
    w = _ratios(data, policy, clip)[:, -1]
    return float(np.mean(w * data.batch.returns(data.gamma)))


def pdis_estimate(data: BehaviorDataset, policy, clip: Optional[float] = None) -> float:
    """Per-decision importance sampling."""
    _check_data(data)
    w = _ratios(data, policy, clip)
    disc = data.gamma ** np.arange(data.batch.horizon)
    return float(np.mean((w * data.batch.rewards * disc).sum(axis=1)))


def dr_estimate(
    data: BehaviorDataset, policy, q_hat, v_hat, clip: Optional[float] = None
) -> float:
    """Doubly robust estimate with control variates ``q_hat`` and ``v_hat``.

    ``q_hat`` is ``[S, A]`` or time-indexed ``[T, S, A]``; ``v_hat`` is
    ``[S]`` or ``[T + 1, S]``.  The value after the final step is taken as
    zero.
    """
    _check_data(data)
    b = data.batch
    n, T = b.actions.shape
    t_idx = np.arange(T)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    s, a, s_next = b.states[:, :-1], b.actions, b.states[:, 1:]
    if q_hat.ndim == 3:
        q = q_hat[t_idx[None, :], s, a]
    else:
        q = q_hat[s, a]
    if v_hat.ndim == 2:
        v0 = v_hat[0, b.states[:, 0]]
        v_next = v_hat[t_idx[None, :] + 1, s_next]
    else:
        v0 = v_hat[b.states[:, 0]]
        v_next = v_hat[s_next]
    v_next = v_next.copy()
    v_next[:, -1] = 0.0
    w = _ratios(data, policy, clip)
    disc = data.gamma ** t_idx
    corr = (disc * w * (b.rewards + data.gamma * v_next - q)).sum(axis=1)
    return float(np.mean(v0 + corr))


@dataclass
class FqeResult:
    q: np.ndarray
    values: np.ndarray
    j_estimate: float
    warnings: List[str] = field(default_factory=list)


def fqe_estimate(data: BehaviorDataset, policy, mdp_shape, start_dist=None) -> FqeResult:
    """Fitted Q-evaluation by backward induction on the empirical model.

    ``mdp_shape`` is ``(n_states, n_actions)`` or a :class:`TabularMdp`.
    Unobserved pairs get ``Q = 0``; unobserved pairs with positive
    evaluation-policy mass in a visited state are reported as warnings.
    """
    _check_data(data)
    if isinstance(mdp_shape, TabularMdp):
        S, A = mdp_shape.n_states, mdp_shape.n_actions
        start_dist = mdp_shape.start_dist if start_dist is None else start_dist
    else:
        S, A = mdp_shape
    pi = policy_table(policy)
    b = data.batch
    s, a, s2 = b.states[:, :-1].ravel(), b.actions.ravel(), b.states[:, 1:].ravel()
    counts = np.zeros((S, A))
    np.add.at(counts, (s, a), 1.0)
    r_sum = np.zeros((S, A))
    np.add.at(r_sum, (s, a), b.rewards.ravel())
    trans = np.zeros((S, A, S))
    np.add.at(trans, (s, a, s2), 1.0)
    seen = counts > 0
    r_hat = np.where(seen, r_sum / np.maximum(counts, 1), 0.0)
    p_hat = trans / np.maximum(counts, 1)[:, :, None]

    msgs = []
    visited = np.zeros(S, dtype=bool)
    visited[b.states[:, :-1].ravel()] = True
    for st, ac in zip(*np.nonzero(~seen & (pi > 0) & visited[:, None])):
        msgs.append(f"uncovered pair (state {st}, action {ac}) has evaluation-policy mass {pi[st, ac]:.3g}")
    if msgs:
        warnings.warn(f"FQE coverage: {len(msgs)} uncovered state-action pairs", stacklevel=2)

    T = b.horizon
    q = np.zeros((T, S, A))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        q[t] = r_hat + data.gamma * (p_hat @ v_next)
        v_next = (pi * q[t]).sum(axis=1)
    values = v_next
    j = float(np.asarray(start_dist) @ values) if start_dist is not None else float(
        values[b.states[:, 0]].mean()
    )
    return FqeResult(q, values, j, msgs)


# -- per-state benchmark -------------------------------------------------------

Estimator = Callable[[BehaviorDataset, np.ndarray, TabularMdp], np.ndarray]


def per_state(fn: Callable[[BehaviorDataset], float], data: BehaviorDataset, n_states: int) -> np.ndarray:
    """Apply a scalar estimator to the trajectories from each start state (NaN if none)."""
    out = np.full(n_states, np.nan)
    starts = data.batch.start_states
    for st in np.unique(starts):
        out[st] = fn(data.subset(np.flatnonzero(starts == st)))
    return out


def standard_estimators(clip: Optional[float] = None) -> Dict[str, Estimator]:
    """Per-state TIS, PDIS, FQE and DR (with FQE control variates)."""

    def tis(data, pi, mdp):
        return per_state(lambda d: tis_estimate(d, pi, clip), data, mdp.n_states)

    def pdis(data, pi, mdp):
        return per_state(lambda d: pdis_estimate(d, pi, clip), data, mdp.n_states)

    def fqe(data, pi, mdp):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fqe_estimate(data, pi, mdp).values

    def dr(data, pi, mdp):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = fqe_estimate(data, pi, mdp)
        v = (pi[None] * res.q).sum(axis=2)
        v = np.concatenate([v, np.zeros((1, mdp.n_states))])
        return per_state(lambda d: dr_estimate(d, pi, res.q, v, clip), data, mdp.n_states)

    return {"TIS": tis, "PDIS": pdis, "DR": dr, "FQE": fqe}


def stratified_starts(mdp: TabularMdp, n: int) -> np.ndarray:
    """Deterministic allocation of ``n`` start states proportional to ``mu``.

    Largest-remainder rounding; states in the support of ``mu`` are listed
    in index order.
    """
    mu = mdp.start_dist
    raw = mu * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return np.repeat(np.arange(mdp.n_states), counts)


def value_mae(estimate, values, weights) -> float:
    """``sum_s mu(s) |V_hat(s) - V(s)|``; states without an estimate count as zero."""
    est = np.nan_to_num(np.asarray(estimate, dtype=np.float64), nan=0.0)
    return float(np.asarray(weights) @ np.abs(est - values))


def benchmark_mae(
    estimators: Mapping[str, Estimator],
    policy,
    mdp: TabularMdp,
    n_trajectories: int,
    rng: np.random.Generator,
    behavior=None,
    epsilon: float = 0.2,
    trials: int = 1,
    horizon: Optional[int] = None,
) -> List[dict]:
    """MAE of per-state value estimates for each estimator on shared data.

    Every trial draws one behavior dataset of ``n_trajectories`` (start
    states stratified by ``mu``) used by all estimators.  Rows carry the
    mean MAE over trials and its standard error.
    """
    pi = policy_table(policy, mdp)
    pi_b = soften(pi, epsilon) if behavior is None else policy_table(behavior, mdp)
    V = exact_values(mdp, pi)
    H = horizon or mdp.horizon
    maes = {name: [] for name in estimators}
    for _ in range(trials):
        data = collect_behavior_data(mdp, pi_b, stratified_starts(mdp, n_trajectories), H, rng)
        for name, est in estimators.items():
            maes[name].append(value_mae(est(data, pi, mdp), V, mdp.start_dist))
    rows = []
    for name, vals in maes.items():
        vals = np.asarray(vals)
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append({"estimator": name, "mae": float(vals.mean()), "se": se, "n_data": n_trajectories * H})
    return rows


def rows_to_csv(rows: List[dict], columns=OPE_COLUMNS) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return out.getvalue()
