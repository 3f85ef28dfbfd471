"""Value-space analysis of the predictability-regularised objective.

With values treated as free variables ("Bellman-relaxed"), the linear
similarity predictor gives ``V_hat = W V`` with ``W = D^-1 F`` and the
weighted prediction error becomes the quadratic form ``V^T Q V`` where
``Q = (I - W)^T diag(mu) (I - W)``.  This module builds that form, solves
the relaxed hard-constrained (``V^T Q V <= eps^2``) and soft-penalised
problems in closed form, and checks the return/error frontier of actual
policies by enumeration and by exact-gradient softmax training.

Because ``W`` has unit row sums, ``(I - W) 1 = 0``: the all-ones vector
lies in the nullspace of ``Q`` while ``mu^T 1 = 1``.  The relaxed problems
with objective ``mu`` are therefore unbounded; the solvers accept a
general objective vector and report unboundedness explicitly.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError
from .mdp import TabularMdp, sample_random_mdp

PINV_CUTOFF = 1e-10
SWEEP_COLUMNS = ("beta", "mean_zeta_sq", "se_zeta_sq", "mean_J", "se_J", "mean_sq_J_err", "n_trials")


@dataclass(frozen=True)
class QclpProblem:
    mu: np.ndarray
    F: np.ndarray
    Q: np.ndarray
    assessment: tuple
    objective: Optional[np.ndarray] = None
    epsilon: Optional[float] = None
    beta: Optional[float] = None

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def a(self) -> np.ndarray:
        """Linear objective vector (``mu`` unless overridden)."""
        return self.mu if self.objective is None else self.objective

    @property
    def weights(self) -> np.ndarray:
        """Row-normalised similarity ``D^-1 F``."""
        return self.F / self.F.sum(axis=1, keepdims=True)

    @property
    def canonical_order(self) -> np.ndarray:
        """State permutation listing assessment states first."""
        rest = [s for s in range(self.n) if s not in set(self.assessment)]
        return np.array(list(self.assessment) + rest)

    def with_(self, **changes) -> "QclpProblem":
        return replace(self, **changes)


def build_vectorized(n_states: int, assessment: Sequence[int], similarity, mu) -> QclpProblem:
    """Assemble ``F`` and ``Q`` for a similarity predictor.

    ``similarity`` is an ``[n, n]`` matrix or a callable ``f(i, j)`` on
    state indices; only the assessment columns of ``F`` are filled.
    """
    assessment = tuple(int(s) for s in assessment)
    if len(set(assessment)) != len(assessment) or not all(0 <= s < n_states for s in assessment):
        raise ValueError("assessment states must be distinct valid indices")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (n_states,) or abs(mu.sum() - 1.0) > 1e-12 or np.any(mu < 0):
        raise ValueError("mu must be a probability vector over the states")
    if callable(similarity):
        full = np.array([[similarity(i, j) for j in range(n_states)] for i in range(n_states)], dtype=np.float64)
    else:
        full = np.asarray(similarity, dtype=np.float64)
        if full.shape != (n_states, n_states):
            raise ValueError("similarity matrix must be n x n")
    F = np.zeros((n_states, n_states))
    cols = list(assessment)
    F[:, cols] = full[:, cols]
    rows = F.sum(axis=1)
    if np.any(rows == 0):
        raise DegenerateInputError("a state has zero total similarity to the assessment states")
    M = np.eye(n_states) - F / rows[:, None]
    Q = M.T @ (mu[:, None] * M)
    Q = 0.5 * (Q + Q.T)
    return QclpProblem(mu, F, Q, assessment)


def rbf_index_similarity(n_states: int, sigma: float = 1.5) -> np.ndarray:
    idx = np.arange(n_states, dtype=np.float64)
    return np.exp(-((idx[:, None] - idx[None, :]) ** 2) / (2.0 * sigma * sigma))


def prediction_mse_vectorized(problem: QclpProblem, V) -> float:
    V = np.asarray(V, dtype=np.float64)
    if V.shape != (problem.n,):
        raise ValueError(f"value vector must have length {problem.n}")
    return float(V @ problem.Q @ V)


def prediction_mse_scalar(problem: QclpProblem, V) -> float:
    """``sum_s mu(s) (V(s) - sum_i w(s, s_i) V(s_i))^2`` computed state by state."""
    V = np.asarray(V, dtype=np.float64)
    W = problem.weights
    return float(sum(problem.mu[s] * (V[s] - W[s] @ V) ** 2 for s in range(problem.n)))


def random_problem(rng: np.random.Generator, n: Optional[int] = None, k: Optional[int] = None) -> QclpProblem:
    """Random structured instance: Dirichlet ``mu``, positive random similarity."""
    n = int(rng.integers(2, 9)) if n is None else n
    k = int(rng.integers(1, n + 1)) if k is None else k
    assessment = rng.choice(n, size=k, replace=False)
    mu = rng.dirichlet(np.ones(n))
    S = rng.random((n, n)) + 1e-3
    return build_vectorized(n, assessment, S, mu)


# -- linear algebra helpers -----------------------------------------------------


def psd_eigen(Q: np.ndarray, cutoff: float = PINV_CUTOFF):
    """Eigen-decomposition split into range and nullspace parts."""
    w, U = np.linalg.eigh(0.5 * (Q + Q.T))
    top = max(w.max(initial=0.0), 0.0)
    keep = w > cutoff * top if top > 0 else np.zeros_like(w, dtype=bool)
    return w, U, keep


def pseudo_inverse(Q: np.ndarray, cutoff: float = PINV_CUTOFF) -> np.ndarray:
    w, U, keep = psd_eigen(Q, cutoff)
    return (U[:, keep] / w[keep]) @ U[:, keep].T


def nullspace_basis(Q: np.ndarray, cutoff: float = PINV_CUTOFF) -> np.ndarray:
    w, U, keep = psd_eigen(Q, cutoff)
    return U[:, ~keep]


def bounded_variant(problem: QclpProblem) -> QclpProblem:
    """Replace the objective by its projection onto the range of ``Q``."""
    N = nullspace_basis(problem.Q)
    a = problem.a - N @ (N.T @ problem.a)
    return problem.with_(objective=a)


@dataclass
class RelaxedSolution:
    bounded: bool
    objective: float
    V: Optional[np.ndarray]
    nullspace: np.ndarray
    direction: Optional[np.ndarray] = None
    tightness: Optional[float] = None


def _nullspace_leak(problem: QclpProblem, tol: float = 1e-9):
    N = nullspace_basis(problem.Q)
    leak = N @ (N.T @ problem.a)
    if np.linalg.norm(leak) > tol * max(1.0, np.linalg.norm(problem.a)):
        return N, leak / np.linalg.norm(leak)
    return N, None


def solve_hard_relaxed(problem: QclpProblem, epsilon: Optional[float] = None) -> RelaxedSolution:
    """Maximise ``a^T V`` subject to ``V^T Q V <= eps^2``.

    Bounded iff ``a`` lies in the range of ``Q``; then the optimum is
    ``eps sqrt(a^T Q+ a)`` at ``V* = eps Q+ a / sqrt(a^T Q+ a)``.
    """
    eps = problem.epsilon if epsilon is None else epsilon
    if eps is None or eps < 0:
        raise ValueError("a non-negative epsilon is required")
    N, direction = _nullspace_leak(problem)
    if direction is not None:
        return RelaxedSolution(False, float("inf"), None, N, direction)
    a = problem.a
    Qp = pseudo_inverse(problem.Q)
    quad = float(a @ Qp @ a)
    if eps == 0 or quad <= 0:
        V = np.zeros(problem.n)
        return RelaxedSolution(True, 0.0, V, N, tightness=0.0)
    V = eps * (Qp @ a) / np.sqrt(quad)
    tight = float(V @ problem.Q @ V) - eps * eps
    if abs(tight) > 1e-8 * max(1.0, eps * eps):
        raise ArithmeticError(f"closed-form optimum misses the constraint by {tight:.3e}")
    return RelaxedSolution(True, eps * np.sqrt(quad), V, N, tightness=tight)


def solve_soft_relaxed(problem: QclpProblem, beta: Optional[float] = None) -> RelaxedSolution:
    """Maximise ``a^T V - beta V^T Q V``: particular solution ``Q+ a / (2 beta)`` plus nullspace."""
    beta = problem.beta if beta is None else beta
    if beta is None or beta <= 0:
        raise ValueError("beta must be positive")
    N, direction = _nullspace_leak(problem)
    if direction is not None:
        return RelaxedSolution(False, float("inf"), None, N, direction)
    V = pseudo_inverse(problem.Q) @ problem.a / (2.0 * beta)
    obj = float(problem.a @ V - beta * V @ problem.Q @ V)
    return RelaxedSolution(True, obj, V, N)


def soft_residual(problem: QclpProblem, V, beta: float) -> float:
    """Max-norm residual of the first-order condition ``Q V = a / (2 beta)``."""
    return float(np.max(np.abs(problem.Q @ V - problem.a / (2.0 * beta))))


@dataclass
class RoundtripReport:
    beta: float
    epsilon: float
    soft_objective_value: float
    hard_objective_value: float
    recovered_beta: float
    hard_soft_objective: float
    soft_optimum: float

    @property
    def objective_gap(self) -> float:
        return abs(self.soft_objective_value - self.hard_objective_value)

    @property
    def beta_gap(self) -> float:
        return abs(self.recovered_beta - self.beta)

    def passed(self, tol: float = 1e-8) -> bool:
        return (
            self.objective_gap <= tol
            and self.beta_gap <= tol
            and self.hard_soft_objective >= self.soft_optimum - tol
        )


def verify_theorem1_roundtrip(problem: QclpProblem, beta: float) -> RoundtripReport:
    """Soft optimum at ``beta`` -> matching ``eps`` -> hard optimum -> ``beta`` back."""
    soft = solve_soft_relaxed(problem, beta)
    if not soft.bounded:
        raise ValueError("roundtrip needs a bounded instance")
    eps2 = float(soft.V @ problem.Q @ soft.V)
    eps = float(np.sqrt(eps2))
    hard = solve_hard_relaxed(problem, eps)
    soft_lin = float(problem.a @ soft.V)
    hard_lin = float(problem.a @ hard.V)
    recovered = hard_lin / (2.0 * eps2) if eps2 > 0 else float("nan")
    hard_soft = float(hard_lin - beta * hard.V @ problem.Q @ hard.V)
    return RoundtripReport(beta, eps, soft_lin, hard_lin, recovered, hard_soft, soft.objective)


def project_to_ellipsoid(Q: np.ndarray, y: np.ndarray, eps: float, iters: int = 200) -> np.ndarray:
    """Euclidean projection onto ``{x : x^T Q x <= eps^2}``.

    The KKT point is ``x = (I + lam Q)^-1 y``; ``lam`` is found by
    bisection on the constraint.
    """
    if y @ Q @ y <= eps * eps:
        return y.copy()
    eye = np.eye(len(y))

    def x_of(lam):
        return np.linalg.solve(eye + lam * Q, y)

    lo, hi = 0.0, 1.0
    while (lambda x: x @ Q @ x)(x_of(hi)) > eps * eps:
        hi *= 2.0
        if hi > 1e300:
            raise ArithmeticError("projection bracket diverged")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        x = x_of(mid)
        if x @ Q @ x > eps * eps:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return x_of(hi)


def projected_gradient_hard(
    problem: QclpProblem, epsilon: float, steps: int = 20000, tol: float = 1e-12
) -> tuple:
    """Numerical maximiser of ``a^T V`` on the ellipsoid by projected ascent."""
    a = problem.a
    eta = epsilon / max(np.linalg.norm(a), 1e-300)
    x = np.zeros(problem.n)
    prev = -np.inf
    for _ in range(steps):
        x = project_to_ellipsoid(problem.Q, x + eta * a, epsilon)
        val = float(a @ x)
        if abs(val - prev) <= tol * max(1.0, abs(val)):
            break
        prev = val
    return float(a @ x), x


# -- policy frontier ------------------------------------------------------------


def deterministic_policies(n_states: int, n_actions: int) -> np.ndarray:
    """All action assignments in lexicographic order, shape ``[A^S, S]``."""
    return np.array(list(itertools.product(range(n_actions), repeat=n_states)), dtype=np.int64)


def batch_policy_values(mdp: TabularMdp, actions: np.ndarray) -> np.ndarray:
    """Finite-horizon values of many deterministic policies, ``[P, S]``."""
    S = mdp.n_states
    s_idx = np.arange(S)[None, :]
    R = mdp.rewards[s_idx, actions]
    P = mdp.transitions[s_idx, actions]
    V = np.zeros(actions.shape)
    for _ in range(mdp.horizon):
        V = R + mdp.gamma * np.einsum("pst,pt->ps", P, V)
    return V


@dataclass
class FrontierPoint:
    beta: float
    policy: np.ndarray
    J: float
    zeta_sq: float
    J_hat: float


@dataclass
class Frontier:
    points: List[FrontierPoint]
    mode: str

    def monotone(self, slack: float = 1e-12) -> bool:
        J = [p.J for p in self.points]
        Z = [p.zeta_sq for p in self.points]
        return all(J[i + 1] <= J[i] + slack and Z[i + 1] <= Z[i] + slack for i in range(len(J) - 1))

    def error_bound_holds(self, slack: float = 1e-12) -> bool:
        return all((p.J - p.J_hat) ** 2 <= p.zeta_sq + slack for p in self.points)


def brute_force_policy_frontier(
    mdp: TabularMdp,
    assessment: Sequence[int],
    similarity,
    betas: Sequence[float],
    max_policies: int = 1_000_000,
    tie_tol: float = 1e-12,
) -> Frontier:
    """Return/error of the best policy for ``J - beta zeta^2`` at each ``beta``.

    Enumerates deterministic policies when there are at most
    ``max_policies``; ties within ``tie_tol`` go to the lowest policy index.
    Larger problems fall back to softmax training with exact gradients.
    """
    problem = build_vectorized(mdp.n_states, assessment, similarity, mdp.start_dist)
    if mdp.n_actions ** mdp.n_states > max_policies:
        points = []
        for beta in betas:
            res = softmax_exact_ascent([mdp], [problem], [beta])
            pi = res["policy"][0]
            points.append(FrontierPoint(beta, pi, res["J"][0], res["zeta_sq"][0], res["J_hat"][0]))
        return Frontier(points, "gradient")
    acts = deterministic_policies(mdp.n_states, mdp.n_actions)
    V = batch_policy_values(mdp, acts)
    J = V @ mdp.start_dist
    zeta = np.einsum("ps,st,pt->p", V, problem.Q, V)
    J_hat = (V @ problem.weights.T) @ mdp.start_dist
    points = []
    for beta in betas:
        obj = J - beta * zeta
        best = int(np.flatnonzero(obj >= obj.max() - tie_tol)[0])
        points.append(FrontierPoint(beta, acts[best], float(J[best]), float(zeta[best]), float(J_hat[best])))
    return Frontier(points, "enumeration")


def softmax_exact_ascent(
    mdps: Sequence[TabularMdp],
    problems: Sequence[QclpProblem],
    betas: Sequence[float],
    steps: int = 2000,
    lr: float = 0.1,
    init_logits: Optional[np.ndarray] = None,
) -> dict:
    """Gradient ascent on ``mu^T V - beta V^T Q V`` for a batch of tabular softmax policies.

    Element ``i`` pairs ``mdps[i]``, ``problems[i]`` and ``betas[i]``; all MDPs
    share shapes and horizon.  Gradients come from an adjoint pass through
    backward induction.  Returns final policies and their ``J``,
    ``zeta^2`` and predicted return ``J_hat``.
    """
    M = len(mdps)
    S, A = mdps[0].n_states, mdps[0].n_actions
    T = mdps[0].horizon
    P = np.stack([m.transitions for m in mdps])
    R = np.stack([m.rewards for m in mdps])
    gam = np.array([m.gamma for m in mdps])[:, None]
    mu = np.stack([p.mu for p in problems])
    Qm = np.stack([p.Q for p in problems])
    beta = np.asarray(betas, dtype=np.float64)[:, None]
    theta = np.zeros((M, S, A)) if init_logits is None else np.array(init_logits, dtype=np.float64)

    deterministic = bool(np.all((P == 0) | (P == 1)))
    if deterministic:
        # successor lookup and scatter-add replace the dense transition products
        nxt = P.argmax(axis=3)
        flat = (np.arange(M)[:, None, None] * S + nxt).reshape(M, S * A)

        def expect(V):
            return np.take_along_axis(V, nxt.reshape(M, S * A), axis=1).reshape(M, S, A)

        def pull_back(w):
            return np.bincount(flat.ravel(), weights=w.ravel(), minlength=M * S).reshape(M, S)
    else:
        Pf = P.reshape(M, S * A, S)

        def expect(V):
            return (Pf @ V[:, :, None]).reshape(M, S, A)

        def pull_back(w):
            return (w.reshape(M, 1, S * A) @ Pf).reshape(M, S)

    def forward(pi):
        Qs = np.empty((T, M, S, A))
        Vs = np.empty((T + 1, M, S))
        Vs[T] = 0.0
        for t in range(T - 1, -1, -1):
            Qs[t] = R + gam[:, :, None] * expect(Vs[t + 1])
            Vs[t] = (pi * Qs[t]).sum(axis=2)
        return Qs, Vs

    for _ in range(steps):
        z = theta - theta.max(axis=2, keepdims=True)
        pi = np.exp(z)
        pi /= pi.sum(axis=2, keepdims=True)
        Qs, Vs = forward(pi)
        lam = mu - 2.0 * beta * np.einsum("mst,mt->ms", Qm, Vs[0])
        g = np.zeros_like(theta)
        for t in range(T):
            lam_pi = lam[:, :, None] * pi
            g += lam_pi * (Qs[t] - Vs[t][:, :, None])
            lam = gam * pull_back(lam_pi)
        theta += lr * g

    z = theta - theta.max(axis=2, keepdims=True)
    pi = np.exp(z)
    pi /= pi.sum(axis=2, keepdims=True)
    V0 = forward(pi)[1][0]
    J = np.einsum("ms,ms->m", mu, V0)
    zeta = np.einsum("ms,mst,mt->m", V0, Qm, V0)
    W = np.stack([p.weights for p in problems])
    J_hat = np.einsum("ms,mst,mt->m", mu, W, V0)
    return {"policy": pi, "logits": theta, "V": V0, "J": J, "zeta_sq": zeta, "J_hat": J_hat}


@dataclass
class SweepResult:
    betas: List[float]
    J: np.ndarray
    zeta_sq: np.ndarray
    J_hat: np.ndarray
    rows: List[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in SWEEP_COLUMNS])
        return out.getvalue()

    def non_increasing(self, key: str, se_key: str) -> bool:
        """Each step may rise by at most the larger adjacent standard error."""
        vals = [r[key] for r in self.rows]
        ses = [r[se_key] for r in self.rows] if se_key else [0.0] * len(vals)
        return all(vals[i + 1] - vals[i] <= max(ses[i], ses[i + 1]) for i in range(len(vals) - 1))


def run_beta_sweep_experiment(
    trials: int = 1000,
    betas: Sequence[float] = (0.0, 0.01, 0.1, 1.0, 10.0),
    rng: Optional[np.random.Generator] = None,
    n_states: int = 5,
    n_actions: int = 2,
    assessment: Sequence[int] = (0, 2),
    similarity=None,
    gamma: float = 0.9,
    horizon: int = 100,
    steps: int = 2000,
    lr: float = 0.1,
    chunk: int = 5000,
) -> SweepResult:
    """Train one softmax policy per (random deterministic MDP, beta) and aggregate.

    Every beta starts from uniform logits on the same MDP, so the per-beta
    means are paired across trials.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    sim = rbf_index_similarity(n_states) if similarity is None else np.asarray(similarity, dtype=np.float64)
    mdps = [
        sample_random_mdp(n_states, n_actions, True, rng, gamma=gamma, horizon=horizon)
        for _ in range(trials)
    ]
    problems = [build_vectorized(n_states, assessment, sim, m.start_dist) for m in mdps]
    nb = len(betas)
    J = np.empty((nb, trials))
    Z = np.empty((nb, trials))
    Jh = np.empty((nb, trials))
    jobs = [(b, t) for b in range(nb) for t in range(trials)]
    for start in range(0, len(jobs), chunk):
        part = jobs[start:start + chunk]
        res = softmax_exact_ascent(
            [mdps[t] for _, t in part], [problems[t] for _, t in part],
            [betas[b] for b, _ in part], steps, lr,
        )
        for i, (b, t) in enumerate(part):
            J[b, t], Z[b, t], Jh[b, t] = res["J"][i], res["zeta_sq"][i], res["J_hat"][i]
    rows = []
    se = (lambda x: float(x.std(ddof=1) / np.sqrt(len(x)))) if trials > 1 else (lambda x: 0.0)
    for b, beta in enumerate(betas):
        rows.append({
            "beta": float(beta),
            "mean_zeta_sq": float(Z[b].mean()), "se_zeta_sq": se(Z[b]),
            "mean_J": float(J[b].mean()), "se_J": se(J[b]),
            "mean_sq_J_err": float(((J[b] - Jh[b]) ** 2).mean()),
            "n_trials": trials,
        })
    return SweepResult(list(betas), J, Z, Jh, rows)


def dump_instance(mdp: TabularMdp, problem: QclpProblem, path) -> None:
    """Write an MDP and its quadratic form for reproducing a failing case."""
    doc = {
        "mdp": mdp.to_dict(),
        "assessment": list(problem.assessment),
        "F": problem.F.tolist(),
        "mu": problem.mu.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
