"""Behavior-conditioned state-value predictors.

A predictor maps a query state embedding plus an assessment dataset (the
``k`` assessment start-state embeddings and the returns a policy obtained
from them) to a value estimate for the query state in the deployment MDP.
Two predictors are provided: the closed-form similarity-weighted average
and a small pre-norm transformer encoder.  Both expose

* ``predict_batch(queries, data) -> [N]``
* ``predict_with_return_grad(queries, data) -> ([N], [N, k])``

where the second array holds ``dV/dg_i`` for each assessment return.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DegenerateInputError
from .mdp import AssessmentSpec, TabularMdp, TrajectoryBatch, exact_values, policy_table


@dataclass(frozen=True)
class AssessmentDataset:
    """``k`` (start-state embedding, return) pairs in assessment-spec order."""

    states: np.ndarray
    returns: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.float64)
        returns = np.asarray(self.returns, dtype=np.float64).reshape(-1)
        if states.ndim == 1:
            states = states[:, None]
        if states.shape[0] != returns.shape[0] or states.shape[0] < 1:
            raise ValueError(
                f"assessment dataset needs matching k >= 1, got {states.shape} and {returns.shape}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "returns", returns)

    @property
    def k(self) -> int:
        return len(self.returns)

    @classmethod
    def from_rollouts(
        cls, spec: AssessmentSpec, mdp: TabularMdp, batch: TrajectoryBatch
    ) -> "AssessmentDataset":
        if len(batch) != spec.k or list(batch.start_states) != list(spec.start_states):
            raise ValueError("assessment rollouts must follow the spec's start-state order")
        return cls(spec.embeddings(mdp), batch.returns(spec.gamma))

    @classmethod
    def exact(cls, spec: AssessmentSpec, mdp: TabularMdp, policy) -> "AssessmentDataset":
        """Dataset holding expected assessment returns instead of samples."""
        V = exact_values(spec.environment(mdp), policy)
        return cls(spec.embeddings(mdp), V[list(spec.start_states)])


def _as_queries(queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    return q[None, :] if q.ndim == 1 else q


# -- closed-form predictor ---------------------------------------------------


def rbf_similarity(sigma: float = 1.0) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Gaussian kernel ``exp(-|x - y|^2 / (2 sigma^2))`` between row sets."""

    def f(x, y):
        d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-d2 / (2.0 * sigma * sigma))

    return f


class LinearPredictor:
    """Similarity-weighted average of assessment returns.

    ``similarity(queries [N, d], states [k, d]) -> [N, k]`` must be strictly
    positive on the states it is used with.
    """

    def __init__(self, similarity=None, sigma: float = 1.0):
        self.similarity = similarity if similarity is not None else rbf_similarity(sigma)

    @classmethod
    def from_matrix(cls, F) -> "LinearPredictor":
        """Similarity looked up from an ``[n, n]`` matrix; embeddings are state indices."""
        F = np.asarray(F, dtype=np.float64)

        def f(x, y):
            return F[np.ix_(x[:, 0].astype(int), y[:, 0].astype(int))]

        return cls(similarity=f)

    def weights(self, queries, data: AssessmentDataset) -> np.ndarray:
        sim = self.similarity(_as_queries(queries), data.states)
        total = sim.sum(axis=1, keepdims=True)
        if np.any(total <= 0) or np.any(sim < 0):
            raise DegenerateInputError("similarities must be positive for every query")
        return sim / total

    def predict_batch(self, queries, data: AssessmentDataset) -> np.ndarray:
        return self.weights(queries, data) @ data.returns

    def predict(self, query, data: AssessmentDataset) -> float:
        return float(self.predict_batch(query, data)[0])

    def predict_with_return_grad(self, queries, data: AssessmentDataset):
        w = self.weights(queries, data)
        return w @ data.returns, w


def linear_predict(pred: LinearPredictor, query, data: AssessmentDataset) -> float:
    return pred.predict(query, data)


# -- transformer predictor ----------------------------------------------------


class TransformerPredictor:
    """Pre-norm transformer encoder over ``2k + 1`` tokens.

    Tokens are the ``k`` assessment start states, the ``k`` assessment
    returns and the query state, each projected to ``hidden`` features.
    State tokens get positions ``0..k-1``; return tokens and the query all
    share position ``k``.  The value is read from the query token.
    ``return_scale`` divides return inputs and multiplies the output; 1.0
    leaves the network unscaled.
    """

    def __init__(
        self,
        obs_dim: int,
        k: int,
        hidden: int = 16,
        heads: int = 4,
        layers: int = 4,
        seed: int = 0,
        return_scale: float = 1.0,
    ):
        if hidden % heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        self.obs_dim, self.k, self.hidden = obs_dim, k, hidden
        self.heads, self.layers = heads, layers
        self.return_scale = float(return_scale)
        rng = np.random.default_rng(seed)
        p: "OrderedDict[str, ad.Tensor]" = OrderedDict()

        def dense(name, fan_in, fan_out):
            p[f"{name}.w"] = ad.Tensor(rng.normal(0, 1 / math.sqrt(fan_in), (fan_in, fan_out)), True, f"{name}.w")
            p[f"{name}.b"] = ad.Tensor(np.zeros(fan_out), True, f"{name}.b")

        def norm(name):
            p[f"{name}.scale"] = ad.Tensor(np.ones(hidden), True, f"{name}.scale")
            p[f"{name}.bias"] = ad.Tensor(np.zeros(hidden), True, f"{name}.bias")

        dense("state_proj", obs_dim, hidden)
        dense("return_proj", 1, hidden)
        dense("query_proj", obs_dim, hidden)
        p["pos_embed"] = ad.Tensor(rng.normal(0, 1 / math.sqrt(hidden), (k + 1, hidden)), True, "pos_embed")
        for i in range(layers):
            norm(f"block{i}.ln1")
            for proj in ("q", "k", "v", "out"):
                dense(f"block{i}.attn.{proj}", hidden, hidden)
            norm(f"block{i}.ln2")
            dense(f"block{i}.ff1", hidden, hidden)
            dense(f"block{i}.ff2", hidden, hidden)
        dense("head", hidden, 1)
        self.params = p

    def parameters(self) -> List[ad.Tensor]:
        return list(self.params.values())

    def _dense(self, x, name):
        return ad.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _norm(self, x, name):
        return ad.layer_norm(x) * self.params[f"{name}.scale"] + self.params[f"{name}.bias"]

    def forward(self, queries, states, returns) -> ad.Tensor:
        """Batched forward: ``[B, d]``, ``[B, k, d]``, ``[B, k]`` -> ``[B]``.

        Inputs may be Tensors (e.g. returns requiring grad) or arrays.
        """
        queries, states, returns = ad.as_tensor(queries), ad.as_tensor(states), ad.as_tensor(returns)
        B = queries.shape[0]
        if states.shape[1:] != (self.k, self.obs_dim) or returns.shape != (B, self.k):
            raise ValueError(
                f"expected k={self.k}, obs_dim={self.obs_dim}; got states {states.shape}, "
                f"returns {returns.shape}"
            )
        pos = self.params["pos_embed"]
        state_tok = self._dense(states, "state_proj") + pos[: self.k]
        ret_in = ad.reshape(returns * (1.0 / self.return_scale), (B, self.k, 1))
        ret_tok = self._dense(ret_in, "return_proj") + pos[self.k]
        query_tok = ad.reshape(self._dense(queries, "query_proj") + pos[self.k], (B, 1, self.hidden))
        x = ad.concat([state_tok, ret_tok, query_tok], axis=1)
        for i in range(self.layers):
            y = self._norm(x, f"block{i}.ln1")
            q = self._dense(y, f"block{i}.attn.q")
            k = self._dense(y, f"block{i}.attn.k")
            v = self._dense(y, f"block{i}.attn.v")
            y = self._dense(ad.scaled_dot_product_attention(q, k, v, self.heads), f"block{i}.attn.out")
            x = x + y
            y = self._norm(x, f"block{i}.ln2")
            y = self._dense(ad.relu(self._dense(y, f"block{i}.ff1")), f"block{i}.ff2")
            x = x + y
        out = self._dense(x[:, -1, :], "head")
        return ad.reshape(out, (B,)) * self.return_scale

    def _tile(self, queries, data: AssessmentDataset):
        if data.k != self.k:
            raise ValueError(f"predictor expects k={self.k} assessment entries, got {data.k}")
        q = _as_queries(queries)
        n = q.shape[0]
        return (
            q,
            np.broadcast_to(data.states, (n,) + data.states.shape),
            np.broadcast_to(data.returns, (n, data.k)).copy(),
        )

    def predict_batch(self, queries, data: AssessmentDataset) -> np.ndarray:
        q, s, g = self._tile(queries, data)
        return self.forward(q, s, g).data.copy()

    def predict(self, query, data: AssessmentDataset) -> float:
        return float(self.predict_batch(query, data)[0])

    def predict_with_return_grad(self, queries, data: AssessmentDataset):
        q, s, g = self._tile(queries, data)
        g = ad.Tensor(g, requires_grad=True)
        out = self.forward(q, s, g)
        # each output depends only on its own row of returns
        grads = ad.backward(ad.tsum(out))
        return out.data.copy(), grads.get(g, np.zeros(g.shape))

    # -- checkpoints ---------------------------------------------------
    def config(self) -> dict:
        return dict(
            obs_dim=self.obs_dim, k=self.k, hidden=self.hidden, heads=self.heads,
            layers=self.layers, return_scale=self.return_scale,
        )

    def to_dict(self) -> dict:
        doc = ad.params_to_dict(self.params.items())
        doc["predictor"] = self.config()
        return doc

    def load_dict(self, doc: dict) -> None:
        named = dict(ad.params_from_dict(doc))
        if set(named) != set(self.params):
            raise ValueError("checkpoint parameter names do not match this predictor")
        for name, t in self.params.items():
            if named[name].shape != t.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            t.data = named[name].copy()

    @classmethod
    def from_dict(cls, doc: dict) -> "TransformerPredictor":
        pred = cls(**doc["predictor"])
        pred.load_dict(doc)
        return pred

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "TransformerPredictor":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def copy(self) -> "TransformerPredictor":
        return TransformerPredictor.from_dict(self.to_dict())


def transformer_predict(pred: TransformerPredictor, query, data: AssessmentDataset) -> float:
    return pred.predict(query, data)


# -- replay buffer -------------------------------------------------------------


class PredictorBuffer:
    """Records from the ``recent_policies`` most recent policy indices.

    Each record is (assessment states ``[k, d]``, assessment returns ``[k]``,
    deployment query embedding ``[d]``, deployment return, policy index).
    """

    def __init__(self, recent_policies: Optional[int] = 16, threshold: int = 1024):
        if recent_policies is not None and recent_policies < 1:
            raise ValueError("recent_policies must be positive")
        self.recent_policies = recent_policies
        self.threshold = threshold
        self._chunks: "OrderedDict[int, dict]" = OrderedDict()
        self.latest: Optional[int] = None

    def __len__(self) -> int:
        return sum(len(c["target"]) for c in self._chunks.values())

    def has_sufficient_data(self) -> bool:
        return len(self) >= self.threshold

    @property
    def policy_indices(self) -> List[int]:
        return list(self._chunks)

    def insert(self, data: AssessmentDataset, query, target: float, policy_index: int) -> None:
        self.insert_many(data, np.asarray(query)[None, :], np.array([target]), policy_index)

    def insert_many(self, data: AssessmentDataset, queries, targets, policy_index: int) -> None:
        queries = _as_queries(queries)
        targets = np.asarray(targets, dtype=np.float64).reshape(-1)
        if len(queries) != len(targets):
            raise ValueError("queries and targets differ in length")
        n = len(targets)
        chunk = self._chunks.setdefault(
            int(policy_index), {"states": [], "returns": [], "query": [], "target": []}
        )
        chunk["states"].extend([data.states] * n)
        chunk["returns"].extend([data.returns] * n)
        chunk["query"].extend(list(queries))
        chunk["target"].extend(list(targets))
        self.latest = policy_index if self.latest is None else max(self.latest, policy_index)
        self._evict()

    def _evict(self) -> None:
        if self.recent_policies is None:
            return
        oldest = self.latest - self.recent_policies + 1
        for idx in [i for i in self._chunks if i < oldest]:
            del self._chunks[idx]

    def restricted(self, policy_indices: Sequence[int]) -> "PredictorBuffer":
        """View holding only the given policy indices (no eviction)."""
        out = PredictorBuffer(None, self.threshold)
        for i in policy_indices:
            if i in self._chunks:
                out._chunks[i] = self._chunks[i]
                out.latest = i if out.latest is None else max(out.latest, i)
        return out

    def arrays(self, policy_indices: Optional[Sequence[int]] = None):
        """All records as stacked arrays ``(states, returns, query, target, policy_index)``."""
        keys = list(self._chunks) if policy_indices is None else [
            i for i in self._chunks if i in set(policy_indices)
        ]
        chunks = [self._chunks[i] for i in keys]
        if not chunks:
            raise ValueError("buffer is empty")
        return (
            np.stack([s for c in chunks for s in c["states"]]),
            np.stack([r for c in chunks for r in c["returns"]]),
            np.stack([q for c in chunks for q in c["query"]]),
            np.array([t for c in chunks for t in c["target"]]),
            np.concatenate([np.full(len(self._chunks[i]["target"]), i) for i in keys]),
        )

    def sample(self, batch_size: int, rng: np.random.Generator):
        states, returns, query, target, pidx = self.arrays()
        idx = rng.integers(0, len(target), size=batch_size)
        return states[idx], returns[idx], query[idx], target[idx], pidx[idx]

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for pidx, c in self._chunks.items():
                for s, r, q, t in zip(c["states"], c["returns"], c["query"], c["target"]):
                    fh.write(json.dumps({
                        "policy_index": pidx, "assess_states": s.tolist(),
                        "assess_returns": r.tolist(), "query": q.tolist(), "target": t,
                    }) + "\n")

    @classmethod
    def load(cls, path, recent_policies: Optional[int] = 16, threshold: int = 1024):
        buf = cls(recent_policies, threshold)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    buf.insert(
                        AssessmentDataset(rec["assess_states"], rec["assess_returns"]),
                        np.asarray(rec["query"]), rec["target"], rec["policy_index"],
                    )
        return buf


def buffer_insert(buf: PredictorBuffer, data: AssessmentDataset, query, target, policy_index) -> None:
    buf.insert(data, query, target, policy_index)


# -- training and evaluation -----------------------------------------------------


def predictor_loss(pred: TransformerPredictor, states, returns, query, target) -> ad.Tensor:
    return ad.mse_loss(pred.forward(query, states, returns), target)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return ad.SGD(lr)
    if name == "adam":
        return ad.Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def train_predictor(
    pred: TransformerPredictor,
    buf: PredictorBuffer,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    batches_per_epoch: Optional[int] = None,
    optimizer=None,
) -> List[float]:
    """Minimise the squared error between predictions and deployment returns.

    Each epoch runs ``batches_per_epoch`` minibatch steps (default: enough
    batches to cover the buffer once).  Returns the per-step loss history.
    """
    if len(buf) == 0:
        raise ValueError("cannot train a predictor on an empty buffer")
    opt = optimizer if optimizer is not None else ad.SGD(lr)
    states, returns, query, target, _ = buf.arrays()
    n = len(target)
    nb = batches_per_epoch if batches_per_epoch is not None else max(1, math.ceil(n / batch_size))
    params = pred.parameters()
    history = []
    for _ in range(epochs):
        for _ in range(nb):
            idx = rng.integers(0, n, size=min(batch_size, n) if batches_per_epoch is None else batch_size)
            loss = predictor_loss(pred, states[idx], returns[idx], query[idx], target[idx])
            opt.step(params, ad.grad(loss, params))
            history.append(loss.item())
    return history


def buffer_mse(pred, buf: PredictorBuffer, policy_indices=None) -> float:
    states, returns, query, target, _ = buf.arrays(policy_indices)
    if isinstance(pred, TransformerPredictor):
        out = pred.forward(query, states, returns).data
    else:
        out = np.array([
            pred.predict(q, AssessmentDataset(s, r)) for q, s, r in zip(query, states, returns)
        ])
    return float(np.mean((out - target) ** 2))


@dataclass
class ValueErrorReport:
    zeta_sq: float
    mae: float
    abs_errors: np.ndarray
    values: np.ndarray
    predictions: np.ndarray


def predictor_value_mse(
    pred, mdp: TabularMdp, policy, data: AssessmentDataset, weights=None
) -> ValueErrorReport:
    """Weighted squared and absolute value-prediction errors against exact values."""
    mu = mdp.start_dist if weights is None else np.asarray(weights, dtype=np.float64)
    V = exact_values(mdp, policy)
    V_hat = pred.predict_batch(mdp.embeddings, data)
    err = V - V_hat
    return ValueErrorReport(
        float(mu @ (err * err)), float(mu @ np.abs(err)), np.abs(err), V, V_hat
    )


def estimate_performance(pred, data: AssessmentDataset, mdp: TabularMdp, weights=None) -> float:
    """``sum_s mu(s) V_hat(s)`` over the deployment start distribution."""
    mu = mdp.start_dist if weights is None else np.asarray(weights, dtype=np.float64)
    return float(mu @ pred.predict_batch(mdp.embeddings, data))
