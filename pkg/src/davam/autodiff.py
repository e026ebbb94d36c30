"""A small reverse-mode automatic differentiation engine on top of numpy.

Graphs are dynamic: every operation on a :class:`Tensor` that requires a
gradient records its parents and a backward closure. ``Tensor.backward``
walks the graph once in reverse topological order, so a tensor consumed by
several operations receives the sum of their contributions.

Broadcasting is deliberately narrow. Two operands must either share a shape,
or one of them is a scalar, or the shape of one equals the trailing
dimensions of the other. Anything else raises ``ContractError``; use
:func:`expand` to repeat along a new axis explicitly.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from davam.errors import ContractError, DeterminismError, NumericDomainError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array with an optional gradient slot and a link to its producer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # numpy defers to the reflected operators below

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ContractError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        pending = {id(self): grad}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _topological_order(root):
    """Reverse topological order of the nodes requiring grad (iterative DFS)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward, op):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _pair(a, b):
    """Coerce operands; python scalars adopt the dtype of the tensor side."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _is_scalar_shape(shape):
    return len(shape) == 0 or (len(shape) == 1 and shape[0] == 1)


def check_broadcast(sa, sb):
    """Return the result shape, or raise for anything but the allowed forms."""
    if sa == sb:
        return sa
    if _is_scalar_shape(sb):
        return sa
    if _is_scalar_shape(sa):
        return sb
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    raise ContractError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if _is_scalar_shape(shape):
        return np.sum(g).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise binary ------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    check_broadcast(a.shape, b.shape)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float):
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data ** p, (a,), backward, "pow")


def matmul(a, b):
    """Matrix product over the last axis of ``a``.

    Supported forms: (..., k) @ (k, m), (..., k) @ (k,), (k,) @ (k, m) and
    batched (B, n, k) @ (B, k, m).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != (b.shape[0] if b.ndim <= 2 else b.shape[-2]):
        raise ContractError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ContractError(f"batched matmul needs equal batch dims: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ad, bd = a.data, b.data
        if b.ndim == 1:
            ga = g[..., None] * bd
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
        elif a.ndim == 1:
            ga = bd @ g
            gb = np.outer(ad, g)
        elif b.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# -- elementwise unary -------------------------------------------------------

def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def softplus(x):
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data).astype(x.dtype, copy=False)
    return _result(y, (x,), lambda g: (g * _sigmoid(x.data),), "softplus")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def clamp_min(x, floor: float):
    """max(x, floor); gradient is zero where the floor is active."""
    x = as_tensor(x)
    keep = x.data >= floor
    y = np.where(keep, x.data, floor).astype(x.dtype)
    return _result(y, (x,), lambda g: (g * keep,), "clamp_min")


# -- reductions and shape ops -------------------------------------------------

def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(y), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(x, axis: int, n: int):
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    x = as_tensor(x)
    y = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)
    return _result(y, (x,), lambda g: (g.sum(axis=axis),), "expand")


def getitem(x, idx):
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), backward, "getitem")


def embedding(table, ids):
    """Gather rows of ``table`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding id out of range")
    return getitem(table, ids)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    for t in tensors:
        if t.ndim != tensors[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ContractError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(y, tensors, backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ContractError("stack needs tensors of identical shape")
    y = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(y, tensors, backward, "stack")


# -- normalisers ---------------------------------------------------------------

def _masked_input(x, mask):
    if not np.all(np.isfinite(x.data)):
        raise NumericDomainError("softmax input contains non-finite values")
    v = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        check_broadcast(v.shape, mask.shape)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax row with every position masked")
        v = np.where(mask, v, -np.inf)
    return v


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax; ``mask`` False entries get exactly zero weight.

    Masking is applied along the last axis only.
    """
    x = as_tensor(x)
    if mask is not None and axis not in (-1, x.ndim - 1):
        raise ContractError("masked softmax is only defined over the last axis")
    v = _masked_input(x, mask)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x, axis=-1, mask=None):
    x = as_tensor(x)
    if mask is not None and axis not in (-1, x.ndim - 1):
        raise ContractError("masked log_softmax is only defined over the last axis")
    v = _masked_input(x, mask)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        gm = np.where(np.isfinite(y), g, 0.0)
        return (gm - p * np.sum(gm, axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


# -- non-standard gradient rules -------------------------------------------------

def stop_gradient(t):
    """Identity in the forward pass, severed in the backward pass."""
    t = as_tensor(t)
    return Tensor(t.data)


def straight_through(h, e):
    """Forward value ``e``; the whole upstream gradient goes to ``h``, none to ``e``.

    Same as ``h + stop_gradient(e - h)`` except that the forward value is
    exactly ``e`` rather than a rounded sum.
    """
    h, e = as_tensor(h), as_tensor(e)
    if h.shape != e.shape:
        raise ContractError(f"straight_through shape mismatch: {h.shape} vs {e.shape}")
    return _result(e.data.copy(), (h,), lambda g: (g,), "straight_through")


# -- convolution -------------------------------------------------------------------

def causal_conv1d(x, weight, bias=None):
    """Causal 1-D convolution over the time axis.

    x: (B, T, C_in); weight: (k, C_in, C_out); bias: (C_out,).
    Output position t sees inputs t-k+1 .. t only (left zero padding).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 3 or weight.shape[1] != x.shape[2]:
        raise ContractError(f"causal_conv1d shapes: x {x.shape}, weight {weight.shape}")
    k = weight.shape[0]
    B, T, _ = x.shape
    xpad = np.concatenate([np.zeros((B, k - 1, x.shape[2]), dtype=x.dtype), x.data], axis=1)
    out = np.zeros((B, T, weight.shape[2]), dtype=np.result_type(x.dtype, weight.dtype))
    for j in range(k):
        out += xpad[:, j:j + T] @ weight.data[j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def backward(g):
        gpad = np.zeros_like(xpad)
        gw = np.zeros_like(weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        for j in range(k):
            gpad[:, j:j + T] += g @ weight.data[j].T
            gw[j] = xpad[:, j:j + T].reshape(-1, xpad.shape[-1]).T @ g2
        grads = [gpad[:, k - 1:], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward, "causal_conv1d")


# -- gradient checking -----------------------------------------------------------------

@dataclass
class GradientCheckReport:
    max_rel_error: float
    per_parameter: dict = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric):
    a, n = np.abs(analytic), np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(a, n))


def grad_check(loss_fn, params, eps=1e-6) -> GradientCheckReport:
    """Compare backprop gradients with central differences, element by element.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from the
    leaf tensors in ``params`` (a name -> Tensor mapping, float64 only).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs float64 parameters, {name} is {p.dtype}")

    first = loss_fn()
    second = loss_fn()
    if first.data.size != 1:
        raise ContractError("loss_fn must return a scalar")
    if not np.array_equal(first.data, second.data):
        raise DeterminismError("loss_fn returned different values on identical inputs")

    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report = GradientCheckReport(max_rel_error=0.0)
    with no_grad():
        for name, p in params.items():
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            num_flat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(loss_fn().data)
                flat[i] = orig - eps
                fm = float(loss_fn().data)
                flat[i] = orig
                num_flat[i] = (fp - fm) / (2.0 * eps)
            err = float(relative_error(analytic[name], numeric).max()) if numeric.size else 0.0
            report.per_parameter[name] = err
            report.max_rel_error = max(report.max_rel_error, err)
    if not math.isfinite(report.max_rel_error):
        report.max_rel_error = math.inf
    return report


def parameters_finite(params) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
