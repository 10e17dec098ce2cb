"""Tiny reverse-mode differentiation on numpy arrays.

Only the handful of operations the network needs are provided. Every op
builds a node holding its output array plus a closure that pushes the
upstream gradient into the parents; ``Tensor.backward`` walks the graph in
reverse topological order.

Outside training, forward affine maps go through non-BLAS ``np.einsum`` so
each output row depends only on the matching input row. This keeps
permutation invariance bit-exact, which BLAS blocking does not guarantee;
training uses BLAS for speed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

TRAIN = "train"
EVAL = "eval"

BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent is None or pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: mul(self, -1.0)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _node(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return ((x, g * mask),)

    return _node(out, (x,), backward)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    out = np.asarray(x.data.sum())

    def backward(g):
        return ((x, np.broadcast_to(g, x.shape).copy()),)

    return _node(out, (x,), backward)


# shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(old)),)

    return _node(out, (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    old = x.shape
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        return ((x, _unbroadcast(g, old)),)

    return _node(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    tensors = [as_tensor(t) for t in tensors]
    tensors = [t for t in tensors if t.data.shape[axis] > 0] or tensors[:1]
    if len(tensors) == 1:
        return tensors[0]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(zip(tensors, np.split(g, bounds, axis=axis)))

    return _node(out, tensors, backward)


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with a per-batch index array.

    ``index`` has the shape of ``x`` with ``axis`` replaced by any length
    and trailing axes dropped, i.e. ``x`` is (B, n, d) and ``index`` is
    (B, q) for ``axis=1``; the result is (B, q, d).
    """
    index = np.asarray(index)
    expand = index.reshape(index.shape + (1,) * (x.ndim - index.ndim))
    out = np.take_along_axis(x.data, expand, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        full = np.broadcast_to(expand, g.shape)
        grid = list(np.indices(g.shape, sparse=True))
        grid[axis] = full
        np.add.at(gx, tuple(grid), g)
        return ((x, gx),)

    return _node(out, (x,), backward)


# the network ops

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, exact_rows: bool = True) -> Tensor:
    """Row-wise affine map ``x @ weight.T + bias`` over the last axis.

    ``exact_rows`` computes each row independently of its position (einsum);
    otherwise BLAS is used.
    """
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} != weight d_in {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = np.einsum("nd,ed->ne", x2, weight.data) if exact_rows else x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        res = [(x, (g2 @ weight.data).reshape(x.shape)), (weight, g2.T @ x2)]
        if bias is not None:
            res.append((bias, g2.sum(axis=0)))
        return res

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float, mode: str,
               eps: float = BN_EPS) -> Tensor:
    """Normalize each column of a 2-D input over its rows.

    In train mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    if x.ndim != 2:
        raise ShapeError("batch_norm expects (rows, features)")
    if mode == TRAIN:
        mean = x.data.mean(axis=0)
        centered = x.data - mean
        var = (centered * centered).mean(axis=0)
        running_mean *= (1 - momentum)
        running_mean += momentum * mean
        running_var *= (1 - momentum)
        running_var += momentum * var
    else:
        centered = x.data - running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        if mode == TRAIN:
            n = x.shape[0]
            gx = (gamma.data * inv_std / n) * (n * g - g_beta - xhat * g_gamma)
        else:
            gx = g * gamma.data * inv_std
        return ((x, gx), (gamma, g_gamma), (beta, g_beta))

    return _node(out, (x, gamma, beta), backward)


def max_reduce(x: Tensor, axis: int = 0) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis`` and the index achieving it (lowest on ties).

    The gradient flows only into the winning entries.
    """
    if x.shape[axis] < 1:
        raise ShapeError("cannot reduce an empty axis")
    idx = np.argmax(x.data, axis=axis)
    expand = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, expand, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expand, np.expand_dims(g, axis), axis=axis)
        return ((x, gx),)

    return _node(out, (x,), backward), idx


def max_reduce_with_argmax(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Column-wise max of an (n, d) tensor together with the winning rows."""
    return max_reduce(x, axis=0)


def dropout(x: Tensor, ratio: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    if not 0 <= ratio < 1:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode != TRAIN or ratio == 0:
        return x
    keep = rng.random(x.shape) >= ratio
    scale = (keep / (1.0 - ratio)).astype(x.dtype)
    return mul(x, scale)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    b = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    out = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return ((logits, grad * (g / b)),)

    return _node(out, (logits,), backward)


# layers and optimisation

@dataclass
class LayerParams:
    """One shared-MLP layer: affine map plus optional batch norm.

    Layers built with ``bn=False`` (score layers) leave the four batch-norm
    fields as ``None``.
    """
    weight: Tensor
    bias: Tensor
    bn_gamma: Tensor | None = None
    bn_beta: Tensor | None = None
    bn_running_mean: np.ndarray | None = None
    bn_running_var: np.ndarray | None = None
    bn_momentum: float = 0.1

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, bn: bool = True,
             dtype=np.float32) -> "LayerParams":
        bound = 1.0 / np.sqrt(d_in)
        weight = parameter(rng.uniform(-bound, bound, (d_out, d_in)), dtype)
        bias = parameter(rng.uniform(-bound, bound, d_out), dtype)
        if not bn:
            return cls(weight, bias)
        return cls(weight, bias,
                   parameter(np.ones(d_out), dtype), parameter(np.zeros(d_out), dtype),
                   np.zeros(d_out, dtype=dtype), np.ones(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    @property
    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def tensors(self) -> dict[str, Tensor]:
        out = {"weight": self.weight, "bias": self.bias}
        if self.has_bn:
            out["bn_gamma"] = self.bn_gamma
            out["bn_beta"] = self.bn_beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.has_bn:
            return {}
        return {"bn_running_mean": self.bn_running_mean,
                "bn_running_var": self.bn_running_var}


def shared_mlp_layer(x: Tensor, p: LayerParams, mode: str, activation: bool = True) -> Tensor:
    """Affine map on every row, batch norm over all rows, then ReLU.

    ``x`` may carry leading batch axes; normalisation statistics are taken
    over every row of every leading axis.
    """
    h = linear(x, p.weight, p.bias, exact_rows=mode != TRAIN)
    if p.has_bn:
        lead = h.shape
        h = reshape(h, (-1, h.shape[-1]))
        h = batch_norm(h, p.bn_gamma, p.bn_beta, p.bn_running_mean, p.bn_running_var,
                       p.bn_momentum, mode)
        h = reshape(h, lead)
    if activation:
        h = relu(h)
    return h


def mlp(x: Tensor, layers: Iterable[LayerParams], mode: str, last_activation: bool = True) -> Tensor:
    layers = list(layers)
    for i, layer in enumerate(layers):
        x = shared_mlp_layer(x, layer, mode, activation=last_activation or i < len(layers) - 1)
    return x


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, grads: dict[str, np.ndarray] | None = None):
    """One bias-corrected Adam update, applied to ``params`` by rebinding ``.data``.

    Gradients default to each tensor's ``.grad``; a missing gradient counts
    as zero.
    """
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state


def lr_schedule(epoch: int, base_lr: float = 1e-3, decay_rate: float = 0.7,
                decay_every: int = 23) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * decay_rate ** (epoch // decay_every)
