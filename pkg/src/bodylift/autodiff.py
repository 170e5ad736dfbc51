"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the pieces needed to train residual MLPs are here: affine layers,
batch norm, dropout, ReLU, concatenation, a handful of losses and Adam.
Every op builds a node holding its parents and a closure that pushes the
output gradient back to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[], None] | None = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        # interior grads are scratch space; leaves keep accumulating across calls
        for node in order:
            if node._parents:
                node.grad = None
        self._accumulate(np.asarray(grad, dtype=DTYPE))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # arithmetic sugar, used by tests and small graphs
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self) -> "Tensor":
        return sum_all(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topo_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep graphs would blow the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = _make(a.data + b.data, (a, b), "add")
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def _backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    if out.requires_grad:
        out._backward = _backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = _make(a.data * b.data, (a, b), "mul")
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def _backward():
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    if out.requires_grad:
        out._backward = _backward
    return out


def neg(a: Tensor) -> Tensor:
    out = _make(-a.data, (a,), "neg")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(-out.grad)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _make(a.data * c, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(out.grad * c)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _make(np.where(mask, a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(out.grad * mask)
    return out


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    out = _make(val, (a,), "exp")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(out.grad * val)
    return out


def log(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,), "log")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(out.grad / a.data)
    return out


def sigmoid(a: Tensor) -> Tensor:
    val = _sigmoid(a.data)
    out = _make(val, (a,), "sigmoid")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(out.grad * val * (1.0 - val))
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.array(a.data.sum()), (a,), "sum")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(np.broadcast_to(out.grad, a.shape))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(np.array(a.data.mean()), (a,), "mean")
    if out.requires_grad:
        out._backward = lambda: a._accumulate(np.broadcast_to(out.grad / n, a.shape))
    return out


# ---------------------------------------------------------------- layers

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")

    def _backward():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    if out.requires_grad:
        out._backward = _backward
    return out


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for x of shape (B, n), W (n, m), b (m,)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape} / bias {b.shape}")
    out = _make(x.data @ W.data + b.data, (x, W, b), "linear")

    def _backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(g @ W.data.T)
        if W.requires_grad:
            W._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    if out.requires_grad:
        out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[t.shape for t in tensors]}")
    widths = [t.shape[-1] for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), "concat")

    def _backward():
        start = 0
        for t, w in zip(tensors, widths):
            if t.requires_grad:
                t._accumulate(out.grad[..., start:start + w])
            start += w

    if out.requires_grad:
        out._backward = _backward
    return out


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-7

    @classmethod
    def fresh(cls, width: int, momentum: float = 0.1, eps: float = 1e-7) -> "BatchNormState":
        return cls(np.zeros(width, dtype=DTYPE), np.ones(width, dtype=DTYPE), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-feature batch normalization.

    Train mode normalizes with the biased batch variance and folds the
    unbiased estimate into the running statistics; eval mode uses the
    running statistics only.
    """
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    B = x.shape[0]
    if train:
        if B < 2:
            raise ShapeError("batchnorm: train mode needs a batch of at least 2 (variance undefined)")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var * (B / (B - 1))
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), "batchnorm")

    def _backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if train:
                # exact gradient through the batch mean and variance
                gx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv_std
            x._accumulate(gx)

    if out.requires_grad:
        out._backward = _backward
    return out


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an explicit rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _make(x.data * mask, (x,), "dropout")
    if out.requires_grad:
        out._backward = lambda: x._accumulate(out.grad * mask)
    return out


# ---------------------------------------------------------------- losses

def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all entries."""
    _check_same(pred, target, "l2_loss")
    diff = pred.data - target.data
    n = diff.size
    out = _make(np.array(np.mean(diff * diff)), (pred, target), "l2_loss")

    def _backward():
        g = out.grad * 2.0 * diff / n
        if pred.requires_grad:
            pred._accumulate(g)
        if target.requires_grad:
            target._accumulate(-g)

    if out.requires_grad:
        out._backward = _backward
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all entries (subgradient 0 at ties)."""
    _check_same(pred, target, "l1_loss")
    diff = pred.data - target.data
    n = diff.size
    out = _make(np.array(np.mean(np.abs(diff))), (pred, target), "l1_loss")

    def _backward():
        g = out.grad * np.sign(diff) / n
        if pred.requires_grad:
            pred._accumulate(g)
        if target.requires_grad:
            target._accumulate(-g)

    if out.requires_grad:
        out._backward = _backward
    return out


def mean_row_norm(pred: Tensor, target: Tensor) -> Tensor:
    """Batch mean of the per-row Euclidean distance ``||pred_i - target_i||_2``."""
    _check_same(pred, target, "mean_row_norm")
    if pred.data.ndim != 2:
        raise ShapeError(f"mean_row_norm expects (B, D) inputs, got {pred.shape}")
    diff = pred.data - target.data
    norms = np.sqrt((diff * diff).sum(axis=1))
    B = diff.shape[0]
    out = _make(np.array(norms.mean()), (pred, target), "mean_row_norm")

    def _backward():
        safe = np.where(norms > 0, norms, 1.0)
        g = out.grad * np.where(norms[:, None] > 0, diff / safe[:, None], 0.0) / B
        if pred.requires_grad:
            pred._accumulate(g)
        if target.requires_grad:
            target._accumulate(-g)

    if out.requires_grad:
        out._backward = _backward
    return out


def bce_with_logit(logits: Tensor, target: float | np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    z = logits.data
    t = np.broadcast_to(np.asarray(target, dtype=DTYPE), z.shape)
    vals = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = _make(np.array(vals.mean()), (logits,), "bce")
    if out.requires_grad:
        out._backward = lambda: logits._accumulate(out.grad * (_sigmoid(z) - t) / n)
    return out


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[tuple[str, Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam update applied in place to ``params``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    if not state.m:
        state.m = [np.zeros_like(p.data) for _, p in params]
        state.v = [np.zeros_like(p.data) for _, p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"adam: state tracks {len(state.m)} tensors, got {len(params)}")
    grads = []
    for (name, p), m in zip(params, state.m):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != m.shape:
            raise ShapeError(f"adam: gradient of {name} has shape {g.shape}, expected {m.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam: non-finite gradient in parameter '{name}'")
        grads.append(g)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    # bias corrections folded into the step size and epsilon (same update, fewer passes)
    step = state.lr * math.sqrt(c2) / c1
    eps_hat = state.eps * math.sqrt(c2)
    for (_, p), g, m, v in zip(params, grads, state.m, state.v):
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += eps_hat
        np.divide(m, tmp, out=tmp)
        tmp *= step
        p.data -= tmp


def zero_grads(params: Iterable[tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.grad = None


# ---------------------------------------------------------------- checking

def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=DTYPE, copy=True)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(x.copy())).data.item()
        flat[i] = orig - eps
        down = f(Tensor(x.copy())).data.item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Relative error ||a - n|| / (||a|| + ||n||) between backprop and central differences.

    Norm-wise rather than per entry: entries whose true gradient is zero
    would otherwise compare pure finite-difference roundoff against a floor.
    The 1e-6 floor keeps an exactly-zero gradient from dividing noise by noise.

    ``f`` maps a tensor shaped like ``x`` to a scalar tensor and must be
    deterministic (fix any dropout rng inside it).
    """
    xt = Tensor(np.array(x, dtype=DTYPE, copy=True), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    numeric = numeric_grad(f, x, eps)
    denom = max(1e-6, float(np.linalg.norm(analytic) + np.linalg.norm(numeric)))
    return float(np.linalg.norm(analytic - numeric)) / denom
