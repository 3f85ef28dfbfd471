"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients.  :func:`backward` walks the implicit graph in reverse
topological order, visiting each node once and summing gradients across
fan-out.  Broadcasting is limited to adding or multiplying a trailing-shape
operand (a bias or scale) across leading axes.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

_allow_nonfinite = False


@contextlib.contextmanager
def allow_nonfinite():
    """Disable the finite-output check inside the block."""
    global _allow_nonfinite
    prev, _allow_nonfinite = _allow_nonfinite, True
    try:
        yield
    finally:
        _allow_nonfinite = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not _allow_nonfinite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    out._parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._backward = backward if out.requires_grad else None
    return out


def _bias_compatible(a: tuple, b: tuple) -> bool:
    if a == b or a == () or b == ():
        return True
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    return long_[len(long_) - len(short):] == short


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _bias_compatible(a.shape, b.shape):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _bias_compatible(a.shape, b.shape):
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)),
        "mul",
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _result(y, (a,), lambda g: (g / x,), "log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,), "square")


# -- shape ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=ax)),
        "concat",
    )


def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ValueError(f"embed_lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embed_lookup: ids out of range for table {table.shape}")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), backward, "embed_lookup")


# -- reductions ----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) / count,)

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        d = 2.0 * g * diff / n
        return (d, -d)

    return _result(np.mean(diff * diff), (pred, target), backward, "mse_loss")


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, _reduce_to(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward, "matmul")


# -- normalisation -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(
        y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax"
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(
        y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax"
    )


def layer_norm(a: Tensor, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise to zero mean and unit variance along ``axis`` (no affine)."""
    x = a.data
    n = x.shape[axis]
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gs = g.sum(axis=axis, keepdims=True)
        gx = (g * xhat).sum(axis=axis, keepdims=True)
        return (inv * (g - gs / n - xhat * gx / n),)

    return _result(xhat, (a,), backward, "layer_norm")


# -- attention -----------------------------------------------------------


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Unmasked multi-head attention over ``[..., T, h]`` inputs.

    The feature axis is split into ``heads`` chunks, each attended with
    ``softmax(q k^T / sqrt(h / heads)) v``, and the head outputs are
    concatenated back to ``[..., T, h]``.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"attention: shapes {q.shape}, {k.shape}, {v.shape} differ")
    if q.ndim < 2 or q.shape[-1] % heads:
        raise ValueError(f"attention: feature dim of {q.shape} not divisible by {heads}")
    *lead, T, h = q.shape
    dh = h // heads
    scale = 1.0 / math.sqrt(dh)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(x):
        return np.transpose(x.reshape(*lead, T, heads, dh), perm)

    def merge(x):
        return np.transpose(x, perm).reshape(*lead, T, h)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = (qh @ np.swapaxes(kh, -1, -2)) * scale
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ vh

    def backward(g):
        go = split(g)
        gw = go @ np.swapaxes(vh, -1, -2)
        gv = np.swapaxes(w, -1, -2) @ go
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ kh
        gk = np.swapaxes(gs, -1, -2) @ qh
        return merge(gq), merge(gk), merge(gv)

    return _result(merge(out), (q, k, v), backward, "attention")


# -- backward ------------------------------------------------------------


def _topological(root: Tensor) -> List[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf that requires grad.

    Leaves not reachable from ``loss`` are absent from the returned map.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    return leaves


def grad(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of ``loss`` for ``params`` (zeros where unreachable)."""
    gmap = backward(loss)
    return [gmap.get(p, np.zeros_like(p.data)) for p in params]


# -- gradient checking ---------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float
    n_flagged: int
    n_entries: int


@dataclass
class GradCheckReport:
    tolerance: float
    perturbation: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.n_flagged == 0 for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def lines(self) -> List[str]:
        return [
            f"{'ok  ' if e.n_flagged == 0 else 'FAIL'} {e.name}: "
            f"max rel {e.max_rel_error:.2e}, max abs {e.max_abs_error:.2e} "
            f"({e.n_flagged}/{e.n_entries} flagged)"
            for e in self.entries
        ]


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    perturbation: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; entries
    above ``tolerance`` are flagged.  ``params`` are perturbed in place and
    restored.
    """
    analytic = grad(f(), params)
    report = GradCheckReport(tolerance, perturbation)
    for i, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        num = np.empty_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + perturbation
            hi = f().item()
            flat[j] = orig - perturbation
            lo = f().item()
            flat[j] = orig
            num[j] = (hi - lo) / (2 * perturbation)
        a = a.reshape(-1)
        abs_err = np.abs(a - num)
        rel = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        name = names[i] if names else (p.name or f"param{i}")
        report.entries.append(
            GradCheckEntry(
                name,
                float(rel.max(initial=0.0)),
                float(abs_err.max(initial=0.0)),
                int(np.sum(rel > tolerance)),
                int(flat.size),
            )
        )
    return report


# -- optimisers ----------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if self.lr == 0:
            return
        for p, g in zip(params, grads):
            p.data -= self.lr * g


class Adam:
    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if self.lr == 0:
            return
        if self.m is None:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints ---------------------------------------------------------


def params_to_dict(named: Iterable[tuple]) -> dict:
    return {
        "format": "evarl.params",
        "version": 1,
        "params": [
            {"name": name, "shape": list(np.shape(t.data if isinstance(t, Tensor) else t)),
             "data": np.asarray(t.data if isinstance(t, Tensor) else t).ravel().tolist()}
            for name, t in named
        ],
    }


def params_from_dict(doc: dict) -> List[tuple]:
    if doc.get("format") != "evarl.params":
        raise ValueError("not a parameter checkpoint document")
    return [
        (rec["name"], np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"]))
        for rec in doc["params"]
    ]


def save_params(named: Iterable[tuple], path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(named), fh)


def load_params(path) -> List[tuple]:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
