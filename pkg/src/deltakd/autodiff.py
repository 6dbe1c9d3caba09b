"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor records its parents and a backward closure only when some parent
requires gradients, so frozen-model forward passes stay tape-free.  The op
set is exactly what the tiny transformer and the loss family need; the
row-softmax forwards go through the compiled kernels.
"""
from __future__ import annotations

import numpy as np

from deltakd import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.ndim != 0:
            raise ValueError("backward() expects a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(astensor(other), -1.0))

    def __rsub__(self, other):
        return add(astensor(other), mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _from_op(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _from_op(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _from_op(data, (a, b), bwd)


def transpose(t: Tensor, axes: tuple[int, ...]) -> Tensor:
    t = astensor(t)
    inverse = np.argsort(axes)

    def bwd(g):
        _accumulate(t, np.transpose(g, inverse))

    return _from_op(np.transpose(t.data, axes), (t,), bwd)


def reshape(t: Tensor, shape) -> Tensor:
    t = astensor(t)
    old = t.data.shape

    def bwd(g):
        _accumulate(t, g.reshape(old))

    return _from_op(np.ascontiguousarray(t.data.reshape(shape)), (t,), bwd)


def take_rows(t: Tensor, ids: np.ndarray) -> Tensor:
    """out = t[ids] along axis 0; embedding lookup and row gathering."""
    t = astensor(t)
    ids = np.asarray(ids)

    def bwd(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add.at(t.grad, ids, g)

    return _from_op(t.data[ids], (t,), bwd)


def take_per_row(t: Tensor, ids: np.ndarray) -> Tensor:
    """out[i] = t[i, ids[i]] for a 2-D tensor."""
    t = astensor(t)
    ids = np.asarray(ids)
    rows = np.arange(t.data.shape[0])

    def bwd(g):
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            np.add.at(t.grad, (rows, ids), g)

    return _from_op(t.data[rows, ids], (t,), bwd)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = astensor(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(g, t.data.shape).copy())

    return _from_op(data, (t,), bwd)


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = astensor(t)
    count = t.data.size if axis is None else t.data.shape[axis]
    return mul(tsum(t, axis=axis, keepdims=keepdims), 1.0 / count)


def texp(t: Tensor) -> Tensor:
    t = astensor(t)
    data = np.exp(t.data)

    def bwd(g):
        _accumulate(t, g * data)

    return _from_op(data, (t,), bwd)


def log_softmax_last(t: Tensor, inv_tau: float = 1.0) -> Tensor:
    """Log-softmax of t * inv_tau over the last axis."""
    t = astensor(t)
    shape = t.data.shape
    out = kernels.log_softmax_rows(
        np.ascontiguousarray(t.data.reshape(-1, shape[-1])), inv_tau
    ).reshape(shape)

    def bwd(g):
        p = np.exp(out)
        _accumulate(t, inv_tau * (g - p * g.sum(axis=-1, keepdims=True)))

    return _from_op(out, (t,), bwd)


def softmax_last(t: Tensor) -> Tensor:
    t = astensor(t)
    shape = t.data.shape
    p = kernels.softmax_rows(
        np.ascontiguousarray(t.data.reshape(-1, shape[-1])), 1.0
    ).reshape(shape)

    def bwd(g):
        _accumulate(t, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _from_op(p, (t,), bwd)


def logsumexp_last(t: Tensor) -> Tensor:
    t = astensor(t)
    shape = t.data.shape
    lse = kernels.logsumexp_rows(
        np.ascontiguousarray(t.data.reshape(-1, shape[-1]))
    ).reshape(shape[:-1])

    def bwd(g):
        _accumulate(t, np.exp(t.data - lse[..., None]) * g[..., None])

    return _from_op(lse, (t,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = astensor(x), astensor(gain), astensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = xhat * gain.data + bias.data

    def bwd(g):
        lead_axes = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead_axes))
        _accumulate(bias, g.sum(axis=lead_axes))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    return _from_op(data, (x, gain, bias), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(t: Tensor) -> Tensor:
    """tanh-form GELU."""
    t = astensor(t)
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def bwd(g):
        sech2 = 1.0 - th * th
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accumulate(t, g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

    return _from_op(data, (t,), bwd)


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_grads_(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam over a named parameter dict, with optional linear warmup."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 warmup_steps: int = 0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        lr = self.lr
        if self.warmup_steps > 0 and self.step_count <= self.warmup_steps:
            lr = self.lr * self.step_count / self.warmup_steps
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * (p.grad * p.grad)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
