"""A small dense-tensor engine with forward- and reverse-mode derivatives.

Every primitive propagates an optional ``tangent`` (forward mode, used for
Jacobian-vector products) and, when gradients are enabled and an input
requires them, records a backward closure on a tape (reverse mode, used for
vector-Jacobian products and training).

Arrays are batched ``numpy`` arrays; the engine never changes dtype, so
float32 inputs give float32 results and float64 inputs give float64.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Mapping

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (tangents still propagate)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "tangent", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, tangent=None, requires_grad=False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=self.data.dtype)
            if tangent.shape != self.data.shape:
                raise ShapeError(f"tangent shape {tangent.shape} != data shape {self.data.shape}")
        self.tangent = tangent
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, seed=None):
        backward(self, seed)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _result(data, parents, backward_fn, tangent) -> Tensor:
    out = Tensor(data, tangent)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _tangents(*ts):
    return [t.tangent for t in ts]


def _sum_tangents(*terms):
    acc = None
    for term in terms:
        if term is None:
            continue
        acc = term if acc is None else acc + term
    return acc


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b):
    """Wrap scalars / arrays as constants matching the other operand's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ta, tb = _tangents(a, b)
    tangent = None
    if ta is not None or tb is not None:
        shape = np.broadcast_shapes(a.shape, b.shape)
        tangent = _sum_tangents(
            None if ta is None else np.broadcast_to(ta, shape),
            None if tb is None else np.broadcast_to(tb, shape),
        )
        tangent = np.array(tangent)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn, tangent)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _coerce(a, b)
    ta, tb = _tangents(a, b)
    tangent = _sum_tangents(
        None if ta is None else ta * b.data,
        None if tb is None else a.data * tb,
    )
    if tangent is not None:
        tangent = np.array(np.broadcast_to(tangent, np.broadcast_shapes(a.shape, b.shape)))

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn, tangent)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    slope = sig * (1.0 + x.data * (1.0 - sig))
    tangent = None if x.tangent is None else x.tangent * slope

    def backward_fn(g):
        return (g * slope,)

    return _result(x.data * sig, (x,), backward_fn, tangent)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


# ------------------------------------------------------------------ structural

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    tangent = None if x.tangent is None else x.tangent.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward_fn, tangent)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    ta, tb = _tangents(a, b)
    tangent = None
    if ta is not None or tb is not None:
        tangent = np.concatenate([
            ta if ta is not None else np.zeros_like(a.data),
            tb if tb is not None else np.zeros_like(b.data),
        ], axis=axis)
    split = a.shape[axis]

    def backward_fn(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _result(np.concatenate([a.data, b.data], axis=axis), (a, b), backward_fn, tangent)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling of (N, C, H, W) by a factor of two."""
    def up(arr):
        return arr.repeat(2, axis=2).repeat(2, axis=3)

    tangent = None if x.tangent is None else up(x.tangent)

    def backward_fn(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(up(x.data), (x,), backward_fn, tangent)


def sum_all(x: Tensor) -> Tensor:
    tangent = None if x.tangent is None else np.asarray(x.tangent.sum(), dtype=x.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn, tangent)


def mean_all(x: Tensor) -> Tensor:
    return mul(sum_all(x), 1.0 / x.data.size)


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant or tensor target."""
    diff = sub(pred, target)
    return mean_all(square(diff))


# ---------------------------------------------------------------- linear maps

def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense layer ``x @ weight + bias`` for x of shape (N, d_in)."""
    tx, tw = _tangents(x, weight)
    tangent = _sum_tangents(
        None if tx is None else tx @ weight.data,
        None if tw is None else x.data @ tw,
    )
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        if bias.tangent is not None:
            tangent = _sum_tangents(tangent, np.broadcast_to(bias.tangent, out.shape))
        parents.append(bias)
    if tangent is not None:
        tangent = np.array(np.broadcast_to(tangent, out.shape))

    def backward_fn(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _result(out, parents, backward_fn, tangent)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation with zero padding; ``weight`` is (C_out, C_in, kh, kw)."""
    n, c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {c_w}")
    if padding is None:
        padding = kh // 2
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    w2 = weight.data.reshape(c_out, -1)

    def to_image(flat):
        # (C_out, N*Ho*Wo) -> (N, C_out, Ho, Wo)
        return flat.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    out = w2 @ cols
    tx, tw = _tangents(x, weight)
    tangent = None
    if tx is not None:
        tangent = w2 @ kernels.im2col(tx, kh, kw, stride, padding)
    if tw is not None:
        tangent = _sum_tangents(tangent, tw.reshape(c_out, -1) @ cols)
    parents = [x, weight]
    if bias is not None:
        out += bias.data[:, None]
        if bias.tangent is not None:
            tangent = _sum_tangents(tangent, np.broadcast_to(bias.tangent[:, None], out.shape))
        parents.append(bias)
    if tangent is not None:
        tangent = np.ascontiguousarray(to_image(np.broadcast_to(tangent, out.shape)))

    def backward_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, n * oh * ow)
        grads = [None, None]
        if x.requires_grad:
            grads[0] = kernels.col2im(w2.T @ g2, x.shape, kh, kw, stride, padding)
        if weight.requires_grad:
            grads[1] = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _result(np.ascontiguousarray(to_image(out)), parents, backward_fn, tangent)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int = 4, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    centered = xg - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = centered * inv_std
    xhat = xhat_g.reshape(x.shape)
    g4 = gamma.data.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    tangent = None
    if x.tangent is not None:
        tg = x.tangent.reshape(n, groups, -1)
        dxhat = inv_std * (tg - tg.mean(axis=2, keepdims=True)) \
            - xhat_g * inv_std * (xhat_g * tg).mean(axis=2, keepdims=True)
        tangent = dxhat.reshape(x.shape) * g4
    if gamma.tangent is not None:
        tangent = _sum_tangents(tangent, xhat * gamma.tangent.reshape(1, c, 1, 1))
    if beta.tangent is not None:
        tangent = _sum_tangents(tangent, np.broadcast_to(beta.tangent.reshape(1, c, 1, 1), x.shape))
    if tangent is not None:
        tangent = np.array(np.broadcast_to(tangent, x.shape))

    def backward_fn(g):
        dxhat = (g * g4).reshape(n, groups, m)
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=2, keepdims=True)
                            - xhat_g * (dxhat * xhat_g).sum(axis=2, keepdims=True))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return dx.reshape(x.shape), dgamma, dbeta

    return _result(out, (x, gamma, beta), backward_fn, tangent)


# -------------------------------------------------------------------- reverse

def backward(out: Tensor, seed=None) -> None:
    """Accumulate d<out, seed>/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if seed is None:
        if out.data.size != 1:
            raise ShapeError("backward() without a seed needs a scalar output")
        seed = np.ones_like(out.data)
    seed = np.asarray(seed, dtype=out.dtype)
    if seed.shape != out.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {out.shape}")
    if not out.requires_grad:
        return

    order, seen = [], set()
    stack = [(out, False)]
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

    grads = {id(out): seed}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ------------------------------------------------------------ function views

class DifferentiableFunction:
    """A map from one input tensor to one output tensor built from engine primitives.

    ``fn`` receives a :class:`Tensor` and must return a :class:`Tensor`.
    The optional batch flag says the function maps (N, ...) to (N, ...)
    independently per row, which lets many directional derivatives share
    one pass.
    """

    def __init__(self, fn: Callable[[Tensor], Tensor], batched: bool = False):
        self.fn = fn
        self.batched = batched

    def __call__(self, h):
        return self.value(h)

    def value(self, h) -> np.ndarray:
        with no_grad():
            return self.fn(Tensor(np.asarray(h))).data

    def jvp(self, h, v) -> np.ndarray:
        return jvp(self.fn, h, v)

    def vjp(self, h, u) -> np.ndarray:
        return vjp(self.fn, h, u)


def _fn_of(f):
    return f.fn if isinstance(f, DifferentiableFunction) else f


def jvp(f, h, v) -> np.ndarray:
    """Directional derivative of ``f`` at ``h`` along ``v`` (forward mode)."""
    h = np.asarray(h)
    v = np.asarray(v, dtype=h.dtype)
    if v.shape != h.shape:
        raise ShapeError(f"jvp: direction shape {v.shape} != input shape {h.shape}")
    with no_grad():
        out = _fn_of(f)(Tensor(h, tangent=v))
    if out.tangent is None:
        return np.zeros_like(out.data)
    return out.tangent


def vjp(f, h, u) -> np.ndarray:
    """Gradient with respect to ``h`` of <f(h), u> (reverse mode)."""
    h = np.asarray(h)
    leaf = Tensor(h, requires_grad=True)
    out = _fn_of(f)(leaf)
    u = np.asarray(u, dtype=out.dtype)
    if u.shape != out.shape:
        raise ShapeError(f"vjp: cotangent shape {u.shape} != output shape {out.shape}")
    backward(out, u)
    return leaf.grad if leaf.grad is not None else np.zeros_like(h)


def grad_params(loss_fn: Callable[[dict], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate ``loss_fn`` on parameter tensors and return (loss, gradients by name)."""
    leaves = {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}
    loss = loss_fn(leaves)
    if loss.data.size != 1:
        raise ShapeError("grad_params: loss must be a scalar")
    value = float(loss.data)
    if not np.isfinite(value):
        bad = [name for name, arr in params.items() if not np.all(np.isfinite(arr))]
        where = f"non-finite parameter block {bad[0]!r}" if bad else "finite parameters"
        raise NonFiniteError(f"loss is {value} ({where})")
    backward(loss)
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter block {name!r}")
        grads[name] = g
    return value, grads
