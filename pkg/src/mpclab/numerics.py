"""Dense float64 tensors with reverse-mode gradients, plus Adam.

Every operation records its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` replays that record in
reverse topological order. Arrays are plain ``numpy.ndarray`` in
float64; file formats downcast elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """NaN or Inf produced where finite values are required."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class Tensor:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def relu(self) -> Tensor:
        return relu(self)

    def abs(self) -> Tensor:
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Wrap an externally computed value as a graph node.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _result(np.asarray(data, dtype=DTYPE), parents, backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)), "div")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def texp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):   # overflow is reported by _result
        y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


# reductions and shape ---------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def back(g):
        z = np.zeros(shape, dtype=DTYPE)
        np.add.at(z, idx, g)
        return (z,)

    return _result(np.array(x.data[idx]), (x,), back, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


# linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), back, "matmul")


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis after adding an additive 0/-inf mask."""
    logits = as_tensor(logits)
    m = np.asarray(getattr(mask, "matrix", mask), dtype=DTYPE)
    if np.any((m != 0) & ~np.isneginf(m)):
        raise ValueError("mask entries must be 0 or -inf")
    z = logits.data + m
    if np.any(np.all(np.isneginf(z), axis=-1)):
        raise ValueError("masked_softmax: a row has no attendable position")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    lshape = logits.shape

    def back(g):
        gs = s * (g - np.sum(g * s, axis=-1, keepdims=True))
        return (_unbroadcast(gs, lshape),)

    return _result(s, (logits,), back, "masked_softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale/shift."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a feature axis of size >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), back, "layer_norm")


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Temporal convolution with centered zero padding.

    ``x`` is (t, c_in), ``kernel`` is (k, c_in, c_out) with odd k. Output
    row i is centered on input row ``stride * i``; length ceil(t / stride).
    """
    k, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv1d supports odd kernel sizes only, got {k}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    t = x.shape[0]
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ShapeError(f"conv1d input {x.shape} does not match kernel {kernel.shape}")
    half = (k - 1) // 2
    t_out = -(-t // stride)
    xpad = np.zeros((t + 2 * half, c_in), dtype=DTYPE)
    xpad[half:half + t] = x.data
    rows = stride * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    cols = xpad[rows].reshape(t_out, k * c_in)
    w = kernel.data.reshape(k * c_in, c_out)

    def back(g):
        gw = (cols.T @ g).reshape(k, c_in, c_out)
        gcols = (g @ w.T).reshape(t_out, k, c_in)
        gpad = np.zeros_like(xpad)
        np.add.at(gpad, rows, gcols)
        return gpad[half:half + t], gw

    return _result(cols @ w, (x, kernel), back, "conv1d")


# gradient replay ------------------------------------------------------------

def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    With ``params`` given, returns ``{name: gradient}`` for each entry,
    zeros for parameters the loss does not reach. Otherwise returns a
    dict keyed by the leaf tensors themselves.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward called on a non-finite loss")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones(loss.shape, dtype=DTYPE)
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                leaves[id(node)] = node
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NumericError("non-finite gradient during backward")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is None:
        return {leaf: leaf.grad for leaf in leaves.values()}
    out = {}
    for name, p in params.items():
        if id(p) in leaves:
            out[name] = p.grad
        else:
            p.grad = np.zeros(p.shape, dtype=DTYPE)
            out[name] = p.grad
    return out


# optimizers ---------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float | Mapping[str, float], weight_decay: float = 0.0,
              names: Iterable[str] | None = None) -> AdamState:
    """One Adam update with bias correction and decoupled weight decay.

    ``lr`` may be a per-parameter mapping (layer-wise rates). Only
    ``names`` (default: every key of ``grads``) are updated; parameters
    are rebound to new arrays, never mutated in place.
    """
    state.step += 1
    b1, b2, eps, n = state.beta1, state.beta2, state.eps, state.step
    c1 = 1.0 - b1 ** n
    c2 = 1.0 - b2 ** n
    for name in (grads if names is None else names):
        p, g = params[name], grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {name} {p.shape}")
        rate = lr[name] if isinstance(lr, Mapping) else lr
        if rate <= 0:
            raise ValueError(f"learning rate must be positive, got {rate}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        data = p.data
        if weight_decay:
            data = data - rate * weight_decay * data
        p.data = data - rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             lr: float | Mapping[str, float]) -> None:
    for name, g in grads.items():
        rate = lr[name] if isinstance(lr, Mapping) else lr
        params[name].data = params[name].data - rate * g
