"""Finite-horizon tabular MDPs, rollouts and exact policy evaluation.

A :class:`TabularMdp` is used both as the deployment environment and,
together with an :class:`AssessmentSpec`, as the assessment environment.
All value computations are finite-horizon backward induction; long
horizons stand in for discounted infinite-horizon problems.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PROB_ATOL = 1e-12

# gridworld action order
UP, RIGHT, DOWN, LEFT = range(4)
_MOVES = {UP: (0, -1), RIGHT: (1, 0), DOWN: (0, 1), LEFT: (-1, 0)}


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with explicit tensors.

    Attributes:
        transitions: ``[S, A, S']`` probabilities.
        rewards: ``[S, A]`` expected immediate rewards.
        gamma: discount in ``[0, 1]``.
        start_dist: ``[S]`` start-state distribution.
        horizon: number of decision steps ``T``.
        embeddings: ``[S, d]`` state observations fed to function approximators.
            Defaults to the state index as a 1-d feature.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    start_dist: np.ndarray
    horizon: int
    embeddings: Optional[np.ndarray] = None

    def __post_init__(self):
        P = np.ascontiguousarray(self.transitions, dtype=np.float64)
        R = np.ascontiguousarray(self.rewards, dtype=np.float64)
        mu = np.ascontiguousarray(self.start_dist, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transitions must have shape [S, A, S], got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValueError("MDP needs at least one state and one action")
        if R.shape != (S, A):
            raise ValueError(f"rewards must have shape {(S, A)}, got {R.shape}")
        if mu.shape != (S,):
            raise ValueError(f"start_dist must have shape {(S,)}, got {mu.shape}")
        if np.any(P < 0) or np.any(mu < 0):
            raise ValueError("probabilities must be nonnegative")
        row_err = np.max(np.abs(P.sum(axis=2) - 1.0))
        if row_err > PROB_ATOL:
            raise ValueError(f"transition rows must sum to 1 (max error {row_err:.3e})")
        if abs(mu.sum() - 1.0) > PROB_ATOL:
            raise ValueError(f"start_dist must sum to 1 (sum={mu.sum()!r})")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if int(self.horizon) < 1:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.embeddings is None:
            emb = np.arange(S, dtype=np.float64)[:, None]
        else:
            emb = np.ascontiguousarray(self.embeddings, dtype=np.float64)
            if emb.ndim == 1:
                emb = emb[:, None]
            if emb.shape[0] != S:
                raise ValueError(f"embeddings need {S} rows, got {emb.shape}")
        for arr in (P, R, mu, emb):
            arr.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "start_dist", mu)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def replace(self, **changes) -> "TabularMdp":
        return dataclasses.replace(self, **changes)

    def check_state(self, state) -> int:
        s = int(state)
        if not 0 <= s < self.n_states or s != state:
            raise ValueError(f"invalid state index {state!r} for {self.n_states} states")
        return s

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "evarl.tabular_mdp",
            "version": 1,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "embedding_dim": self.embeddings.shape[1],
            "gamma": self.gamma,
            "horizon": self.horizon,
            "transitions": self.transitions.ravel().tolist(),
            "rewards": self.rewards.ravel().tolist(),
            "start_dist": self.start_dist.tolist(),
            "embeddings": self.embeddings.ravel().tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        if doc.get("format") != "evarl.tabular_mdp":
            raise ValueError("not a tabular MDP document")
        S, A, d = doc["n_states"], doc["n_actions"], doc["embedding_dim"]
        return cls(
            transitions=np.asarray(doc["transitions"], dtype=np.float64).reshape(S, A, S),
            rewards=np.asarray(doc["rewards"], dtype=np.float64).reshape(S, A),
            gamma=doc["gamma"],
            start_dist=np.asarray(doc["start_dist"], dtype=np.float64),
            horizon=doc["horizon"],
            embeddings=np.asarray(doc["embeddings"], dtype=np.float64).reshape(S, d),
        )

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class AssessmentSpec:
    """Assessment environment: ``k`` fixed start states plus horizon and discount.

    ``mdp`` overrides the dynamics; by default the deployment MDP is reused.
    """

    start_states: tuple
    horizon: int = 10
    gamma: float = 1.0
    mdp: Optional[TabularMdp] = field(default=None, compare=False)

    def __post_init__(self):
        states = tuple(int(s) for s in self.start_states)
        if len(states) < 1:
            raise ValueError("assessment needs at least one start state")
        if len(set(states)) != len(states):
            raise ValueError(f"assessment start states must be distinct: {states}")
        if self.horizon < 1:
            raise ValueError("assessment horizon must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("assessment gamma must lie in [0, 1]")
        object.__setattr__(self, "start_states", states)

    @property
    def k(self) -> int:
        return len(self.start_states)

    def environment(self, deploy: TabularMdp) -> TabularMdp:
        """The MDP assessment rollouts run in, with this spec's gamma and horizon."""
        base = deploy if self.mdp is None else self.mdp
        if base.n_actions != deploy.n_actions:
            raise ValueError("assessment and deployment action spaces differ")
        for s in self.start_states:
            base.check_state(s)
        return base.replace(gamma=self.gamma, horizon=self.horizon)

    def embeddings(self, deploy: TabularMdp) -> np.ndarray:
        return self.environment(deploy).embeddings[list(self.start_states)]


@dataclass(frozen=True)
class Trajectory:
    """States ``s_0..s_T``, actions ``a_0..a_{T-1}`` and rewards ``r_0..r_{T-1}``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if not (len(states) == len(actions) + 1 == len(rewards) + 1):
            raise ValueError(
                f"inconsistent trajectory lengths: {len(states)} states, "
                f"{len(actions)} actions, {len(rewards)} rewards"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    @property
    def horizon(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class TrajectoryBatch:
    """``N`` equal-length trajectories stored as arrays ``[N, T+1]``, ``[N, T]``, ``[N, T]``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if states.ndim != 2 or actions.shape != rewards.shape or states.shape != (
            actions.shape[0],
            actions.shape[1] + 1,
        ):
            raise ValueError(
                f"inconsistent batch shapes {states.shape}, {actions.shape}, {rewards.shape}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def start_states(self) -> np.ndarray:
        return self.states[:, 0]

    def subset(self, idx) -> "TrajectoryBatch":
        return TrajectoryBatch(self.states[idx], self.actions[idx], self.rewards[idx])

    def returns(self, gamma: float) -> np.ndarray:
        disc = gamma ** np.arange(self.horizon)
        return self.rewards @ disc

    @classmethod
    def stack(cls, trajectories: Sequence[Trajectory]) -> "TrajectoryBatch":
        if isinstance(trajectories, TrajectoryBatch):
            return trajectories
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("cannot stack an empty trajectory list")
        return cls(
            np.stack([t.states for t in trajectories]),
            np.stack([t.actions for t in trajectories]),
            np.stack([t.rewards for t in trajectories]),
        )

    @classmethod
    def concat(cls, batches: Sequence["TrajectoryBatch"]) -> "TrajectoryBatch":
        return cls(
            np.concatenate([b.states for b in batches]),
            np.concatenate([b.actions for b in batches]),
            np.concatenate([b.rewards for b in batches]),
        )


def policy_table(policy, mdp: Optional[TabularMdp] = None) -> np.ndarray:
    """Return ``pi(a|s)`` as an ``[S, A]`` array for a policy object or array."""
    if hasattr(policy, "table"):
        table = policy.table()
    else:
        table = np.asarray(policy, dtype=np.float64)
    if mdp is not None and table.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy table shape {table.shape} does not match MDP "
            f"{(mdp.n_states, mdp.n_actions)}"
        )
    return table


def _sample_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    # inverse-CDF sampling; the clip guards against cdf[-1] < 1 by rounding
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def rollout_batch(
    mdp: TabularMdp,
    policy,
    start_states,
    horizon: int,
    rng: np.random.Generator,
) -> TrajectoryBatch:
    """Roll out ``policy`` from each start state for exactly ``horizon`` steps."""
    start = np.asarray(start_states, dtype=np.int64).reshape(-1)
    if np.any((start < 0) | (start >= mdp.n_states)):
        raise ValueError(f"invalid start state in {start.tolist()}")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    pi_cdf = np.cumsum(policy_table(policy, mdp), axis=1)
    p_cdf = np.cumsum(mdp.transitions, axis=2)
    n = len(start)
    states = np.empty((n, horizon + 1), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon), dtype=np.float64)
    states[:, 0] = start
    for t in range(horizon):
        s = states[:, t]
        a = _sample_rows(pi_cdf[s], rng.random(n))
        actions[:, t] = a
        rewards[:, t] = mdp.rewards[s, a]
        states[:, t + 1] = _sample_rows(p_cdf[s, a], rng.random(n))
    return TrajectoryBatch(states, actions, rewards)


def rollout(mdp: TabularMdp, policy, start_state: int, horizon: int, rng) -> Trajectory:
    s = mdp.check_state(start_state)
    return rollout_batch(mdp, policy, [s], horizon, rng)[0]


def discounted_return(traj: Trajectory, gamma: float) -> float:
    """``sum_t gamma^t r_t``."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    r = np.asarray(traj.rewards, dtype=np.float64)
    return float(r @ (gamma ** np.arange(len(r))))


def value_tables(mdp: TabularMdp, policy, horizon: Optional[int] = None):
    """Backward induction; returns ``(V, Q)`` with shapes ``[T+1, S]`` and ``[T, S, A]``.

    ``V[t]`` is the value with ``T - t`` steps remaining, ``V[T] = 0``.
    """
    T = mdp.horizon if horizon is None else int(horizon)
    pi = policy_table(policy, mdp)
    V = np.zeros((T + 1, mdp.n_states))
    Q = np.zeros((T, mdp.n_states, mdp.n_actions))
    for t in range(T - 1, -1, -1):
        Q[t] = mdp.rewards + mdp.gamma * (mdp.transitions @ V[t + 1])
        V[t] = np.sum(pi * Q[t], axis=1)
    return V, Q


def exact_values(mdp: TabularMdp, policy) -> np.ndarray:
    return value_tables(mdp, policy)[0][0]


def exact_q_values(mdp: TabularMdp, policy) -> np.ndarray:
    return value_tables(mdp, policy)[1][0]


def exact_performance(mdp: TabularMdp, policy) -> float:
    return float(mdp.start_dist @ exact_values(mdp, policy))


def optimal_values(mdp: TabularMdp) -> np.ndarray:
    """Finite-horizon optimal ``V_0`` by value iteration over the horizon."""
    V = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        V = np.max(mdp.rewards + mdp.gamma * (mdp.transitions @ V), axis=1)
    return V


def make_gridworld(
    width: int,
    height: int,
    goals: Sequence[tuple] = (),
    step_reward: float = 0.0,
    goal_reward: float = 1.0,
    slip: float = 0.0,
    horizon: int = 20,
    gamma: float = 0.95,
    start_cells: Optional[Sequence[tuple]] = None,
) -> TabularMdp:
    """Slippery gridworld with absorbing goal cells.

    State ``s = y * width + x``.  Actions are up/right/down/left; with
    probability ``slip`` the move goes to one of the two perpendicular
    directions instead.  Bumping a wall leaves the agent in place.  Entering
    a goal pays ``goal_reward``; goals are absorbing with zero reward.  The
    start distribution is uniform over ``start_cells`` (default: every
    non-goal cell).  Embeddings are ``(x, y)`` normalised to ``[0, 1]``.
    """
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be at least 1")
    if not 0.0 <= slip <= 1.0:
        raise ValueError("slip must lie in [0, 1]")
    n = width * height
    goal_ids = set()
    for gx, gy in goals:
        if not (0 <= gx < width and 0 <= gy < height):
            raise ValueError(f"goal {(gx, gy)} outside the {width}x{height} grid")
        goal_ids.add(gy * width + gx)

    def move(s, a):
        x, y = s % width, s // width
        dx, dy = _MOVES[a]
        nx, ny = x + dx, y + dy
        if 0 <= nx < width and 0 <= ny < height:
            return ny * width + nx
        return s

    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    for s in range(n):
        for a in range(4):
            if s in goal_ids:
                P[s, a, s] = 1.0
                continue
            side = ((a + 1) % 4, (a + 3) % 4)
            P[s, a, move(s, a)] += 1.0 - slip
            P[s, a, move(s, side[0])] += slip / 2
            P[s, a, move(s, side[1])] += slip / 2
            p_goal = sum(P[s, a, g] for g in goal_ids)
            R[s, a] = step_reward + goal_reward * p_goal

    if start_cells is None:
        starts = [s for s in range(n) if s not in goal_ids] or list(range(n))
    else:
        starts = []
        for cx, cy in start_cells:
            if not (0 <= cx < width and 0 <= cy < height):
                raise ValueError(f"start cell {(cx, cy)} outside the grid")
            starts.append(cy * width + cx)
    mu = np.zeros(n)
    mu[starts] = 1.0 / len(starts)

    xs = np.arange(n) % width
    ys = np.arange(n) // width
    emb = np.stack(
        [xs / max(width - 1, 1), ys / max(height - 1, 1)], axis=1
    ).astype(np.float64)
    return TabularMdp(P, R, gamma, mu, horizon, emb)


def sample_random_mdp(
    n_states: int,
    n_actions: int,
    deterministic: bool,
    rng: np.random.Generator,
    gamma: float = 0.9,
    horizon: int = 100,
) -> TabularMdp:
    """Random MDP with ``U[0, 1)`` rewards and uniform start distribution.

    Deterministic dynamics draw one uniformly random successor per
    ``(s, a)``; otherwise each row is ``Dirichlet(1)``.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    if deterministic:
        nxt = rng.integers(0, n_states, size=(n_states, n_actions))
        P = np.zeros((n_states, n_actions, n_states))
        P[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        P /= P.sum(axis=2, keepdims=True)
    R = rng.random((n_states, n_actions))
    mu = np.full(n_states, 1.0 / n_states)
    return TabularMdp(P, R, gamma, mu, horizon)
