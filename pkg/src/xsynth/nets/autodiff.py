"""Minimal reverse-mode differentiation over numpy arrays.

Every op in this module accepts plain ``np.ndarray`` or :class:`Var` inputs.
When no input is a ``Var`` the op is evaluated eagerly on numpy and returns
an ndarray, so the same model code serves inference (no tape) and training.

Only the ops defined here are differentiable. Any other numpy function that
touches a ``Var`` raises :class:`UnsupportedOpError` instead of silently
dropping the gradient.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class UnsupportedOpError(TypeError):
    pass


class Var:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad", "grad")
    __array_priority__ = 1000

    def __init__(self, data, parents=(), backward_fn=None, op="leaf", requires_grad=True):
        self.data = np.asarray(data)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.grad = None

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)
    size = property(lambda self: self.data.size)

    def __len__(self):
        return len(self.data)

    # numpy interop: route arithmetic ufuncs, reject everything else
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            fn = _UFUNC_MAP.get(ufunc)
            if fn is not None:
                return fn(*inputs)
        raise UnsupportedOpError(f"numpy.{ufunc.__name__} is not a differentiable op")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOpError(f"numpy.{func.__name__} is not a differentiable op")

    def __array__(self, dtype=None, copy=None):
        raise UnsupportedOpError("implicit conversion of a traced value to ndarray; use .data to detach")

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Underlying ndarray (detaches a ``Var``)."""
    return x.data if isinstance(x, Var) else np.asarray(x)


def _needs(x) -> bool:
    return isinstance(x, Var) and x.requires_grad


def _make(data, parents, backward_fn, op):
    req = any(_needs(p) for p in parents)
    if not req:
        return Var(data, (), None, op, requires_grad=False)
    return Var(data, parents, backward_fn, op)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------- elementwise

def add(a, b):
    if not (is_var(a) or is_var(b)):
        return np.add(a, b)
    av, bv = value(a), value(b)
    out = av + bv

    def bw(g):
        return (_unbroadcast(g, av.shape) if _needs(a) else None,
                _unbroadcast(g, bv.shape) if _needs(b) else None)

    return _make(out, (a, b), bw, "add")


def sub(a, b):
    if not (is_var(a) or is_var(b)):
        return np.subtract(a, b)
    av, bv = value(a), value(b)
    out = av - bv

    def bw(g):
        return (_unbroadcast(g, av.shape) if _needs(a) else None,
                _unbroadcast(-g, bv.shape) if _needs(b) else None)

    return _make(out, (a, b), bw, "sub")


def mul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    out = av * bv

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if _needs(a) else None,
                _unbroadcast(g * av, bv.shape) if _needs(b) else None)

    return _make(out, (a, b), bw, "mul")


def div(a, b):
    if not (is_var(a) or is_var(b)):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    out = av / bv

    def bw(g):
        return (_unbroadcast(g / bv, av.shape) if _needs(a) else None,
                _unbroadcast(-g * out / bv, bv.shape) if _needs(b) else None)

    return _make(out, (a, b), bw, "div")


def neg(a):
    if not is_var(a):
        return np.negative(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    if is_var(p):
        raise UnsupportedOpError("power with a traced exponent is not supported")
    if not is_var(a):
        return np.power(a, p)
    av = a.data
    out = av ** p
    return _make(out, (a,), lambda g: (g * p * av ** (p - 1),), "power")


def _unary(fn, dfn, name):
    def op(a):
        if not is_var(a):
            return fn(np.asarray(a))
        av = a.data
        out = fn(av)
        return _make(out, (a,), lambda g: (g * dfn(av, out),), name)

    op.__name__ = name
    return op


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


exp = _unary(np.exp, lambda x, y: y, "exp")
log = _unary(np.log, lambda x, y: 1.0 / x, "log")
sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y, "sqrt")
tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y, "tanh")
sigmoid = _unary(_sigmoid, lambda x, y: y * (1.0 - y), "sigmoid")
square = _unary(np.square, lambda x, y: 2.0 * x, "square")


def silu(a):
    """Swish: x * sigmoid(x)."""
    if not is_var(a):
        a = np.asarray(a)
        return a * _sigmoid(a)
    av = a.data
    s = _sigmoid(av)
    out = av * s
    return _make(out, (a,), lambda g: (g * (s * (1.0 + av * (1.0 - s))),), "silu")


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.data
    out = av.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, av.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, av.shape),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if not is_var(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    av = a.data
    axes = _norm_axes(axis, av.ndim)
    n = int(np.prod([av.shape[i] for i in axes])) if axes else 1
    out = av.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, av.shape),)

    return _make(out, (a,), bw, "mean")


def softmax(a, axis=-1):
    av = value(a)
    out = av - av.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out *= 1.0 / out.sum(axis=axis, keepdims=True)
    if not is_var(a):
        return out

    def bw(g):
        gi = g - (g * out).sum(axis=axis, keepdims=True)
        gi *= out
        return (gi,)

    return _make(out, (a,), bw, "softmax")


def group_normalize(a, groups: int, eps: float):
    """Zero-mean, unit-variance channels-last (B, H, W, C) input per (sample, group); no affine."""
    av = value(a)
    b, h, w, c = av.shape
    xg = av.reshape(b, h, w, groups, c // groups)
    axes = (1, 2, 4)
    xc = xg - xg.mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(np.square(xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat.reshape(av.shape)
    if not is_var(a):
        return out

    def bw(g):
        gg = g.reshape(xg.shape)
        gi = gg - gg.mean(axis=axes, keepdims=True)
        gi -= xhat * (gg * xhat).mean(axis=axes, keepdims=True)
        gi *= inv
        return (gi.reshape(av.shape),)

    return _make(out, (a,), bw, "group_norm")


# --------------------------------------------------------------------- shapes

def reshape(a, shape):
    if not is_var(a):
        return np.reshape(a, shape)
    src = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None):
    if not is_var(a):
        return np.transpose(a, axes)
    nd = a.data.ndim
    axes = tuple(range(nd))[::-1] if axes is None else tuple(ax % nd for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    nd = value(a).ndim
    axes = list(range(nd))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx):
    if not is_var(a):
        return np.asarray(a)[idx]
    av = a.data
    fancy = _fancy(idx)

    def bw(g):
        full = np.zeros(av.shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(av[idx], (a,), bw, "getitem")


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs, axis=0):
    if not any(is_var(x) for x in xs):
        return np.concatenate([np.asarray(x) for x in xs], axis=axis)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def bw(g):
        sl = [slice(None)] * g.ndim
        res = []
        for k, x in enumerate(xs):
            sl[axis] = slice(bounds[k], bounds[k + 1])
            res.append(g[tuple(sl)] if _needs(x) else None)
        return tuple(res)

    return _make(out, tuple(xs), bw, "concat")


def pad(a, widths):
    """Zero padding; ``widths`` as in ``np.pad``."""
    widths = tuple(tuple(w) for w in widths)
    if not is_var(a):
        return np.pad(a, widths)
    av = a.data
    out = np.pad(av, widths)
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, av.shape))
    return _make(out, (a,), lambda g: (g[sl],), "pad")


def pixel_unshuffle(x, r: int):
    """(..., C, H, W) -> (..., C*r*r, H/r, W/r)."""
    *lead, c, h, w = value(x).shape
    if h % r or w % r:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by {r}")
    nl = len(lead)
    y = reshape(x, (*lead, c, h // r, r, w // r, r))
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    y = transpose(y, perm)
    return reshape(y, (*lead, c * r * r, h // r, w // r))


def pixel_shuffle(x, r: int):
    """(..., C*r*r, H, W) -> (..., C, H*r, W*r); inverse of :func:`pixel_unshuffle`."""
    *lead, c, h, w = value(x).shape
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by {r * r}")
    nl = len(lead)
    co = c // (r * r)
    y = reshape(x, (*lead, co, r, r, h, w))
    perm = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    y = transpose(y, perm)
    return reshape(y, (*lead, co, h * r, w * r))


# ------------------------------------------------------------- linear algebra

def matmul(a, b):
    if not (is_var(a) or is_var(b)):
        return np.matmul(a, b)
    av, bv = value(a), value(b)
    if av.ndim == 1:
        return reshape(matmul(reshape(a, (1, av.shape[0])), b), bv.shape[:-2] + bv.shape[-1:])
    if bv.ndim == 1:
        return reshape(matmul(a, reshape(b, (bv.shape[0], 1))), av.shape[:-1])
    out = av @ bv

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if _needs(a) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if _needs(b) else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def apply_matrix(x, m, axis):
    """Multiply the constant matrix ``m`` along ``axis``: y[..i..] = sum_j m[i, j] x[..j..]."""
    xv = value(x)
    moved = np.moveaxis(xv, axis, -1)
    out = np.moveaxis(moved @ m.T, -1, axis)
    if not is_var(x):
        return out

    def bw(g):
        return (np.moveaxis(np.moveaxis(g, axis, -1) @ m, -1, axis),)

    return _make(out, (x,), bw, "apply_matrix")


def _im2col(xh, k):
    """NHWC input -> (B*H*W, k*k*C) patch matrix, zero 'same' padding."""
    p = k // 2
    b, h, w, c = xh.shape
    padded = np.pad(xh, ((0, 0), (p, p), (p, p), (0, 0)))
    # (B, H, W, C, k, k) view -> (B, H, W, k, k, C); the reshape makes the one copy
    win = sliding_window_view(padded, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(b * h * w, k * k * c)


def _conv_nhwc(xh, wv):
    """Returns the (B*H*W, O) output rows and the patch matrix."""
    c = xh.shape[-1]
    o, _, k, _ = wv.shape
    # patch layout is (ki, kj, c), so reorder the kernel to match
    wmat = np.ascontiguousarray(wv.transpose(2, 3, 1, 0)).reshape(k * k * c, o)
    cols = np.ascontiguousarray(xh).reshape(-1, c) if k == 1 else _im2col(xh, k)
    return cols @ wmat, cols


def conv2d_nhwc(x, w, b=None):
    """Stride-1 'same' convolution of a channels-last (B, H, W, C) input; kernel (O, C, k, k), odd k."""
    xv, wv = value(x), value(w)
    bsz, h, wd, c = xv.shape
    o, ci, k, k2 = wv.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: input {xv.shape} (NHWC), kernel {wv.shape}")
    out, cols = _conv_nhwc(xv, wv)
    if b is not None:
        out += value(b)
    out = out.reshape(bsz, h, wd, o)
    if not (is_var(x) or is_var(w) or is_var(b)):
        return out

    def bw(g):
        gx = gw = gb = None
        gt = np.ascontiguousarray(g).reshape(-1, o)
        if _needs(w):
            gw = (cols.T @ gt).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        if b is not None and _needs(b):
            gb = gt.sum(axis=0)
        if _needs(x):
            # adjoint of a 'same' stride-1 conv: convolve with the flipped, transposed kernel
            wflip = wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_nhwc(g, wflip)[0].reshape(bsz, h, wd, c)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, (lambda g: bw(g)[:2]) if b is None else bw, "conv2d")


def conv2d(x, w, b=None):
    """Stride-1 'same' convolution, NCHW input, (O, C, k, k) kernel, odd k."""
    xv = value(x)
    if xv.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {xv.shape}")
    return transpose(conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, b), (0, 3, 1, 2))


def space_to_depth(x, r: int):
    """Channels-last pixel unshuffle: (B, H, W, C) -> (B, H/r, W/r, C*r*r).

    Output channel ``c*r*r + i*r + j`` holds input pixel (r*y + i, r*x + j) of
    channel c, the same ordering as :func:`pixel_unshuffle`.
    """
    b, h, w, c = value(x).shape
    if h % r or w % r:
        raise ValueError(f"spatial dims ({h}, {w}) not divisible by {r}")
    y = reshape(x, (b, h // r, r, w // r, r, c))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (b, h // r, w // r, c * r * r))


def depth_to_space(x, r: int):
    """Inverse of :func:`space_to_depth`."""
    b, h, w, c = value(x).shape
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by {r * r}")
    co = c // (r * r)
    y = reshape(x, (b, h, w, co, r, r))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (b, h * r, w * r, co))


# ------------------------------------------------------------------ fused ops

def rms_norm(x, scale=None, eps=1e-6):
    """x / sqrt(mean(x^2, last axis) + eps) * scale, as a single traced op."""
    xv = value(x)
    r = 1.0 / np.sqrt(np.mean(np.square(xv), axis=-1, keepdims=True) + eps)
    y = xv * r
    sv = None if scale is None else value(scale)
    out = y if sv is None else y * sv
    if not (is_var(x) or is_var(scale)):
        return out

    def bw(g):
        gs = g if sv is None else g * sv
        gx = gsc = None
        if _needs(x):
            dot = np.mean(gs * xv, axis=-1, keepdims=True)
            gx = r * (gs - xv * (r * r) * dot)
        if sv is not None and _needs(scale):
            gsc = (g * y).reshape(-1, xv.shape[-1]).sum(axis=0)
        return gx, gsc

    parents = (x,) if scale is None else (x, scale)
    return _make(out, parents, (lambda g: bw(g)[:1]) if scale is None else bw, "rms_norm")


def scaled_dot_attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes, as a single traced op."""
    qv, kv, vv = value(q), value(k), value(v)
    scale = 1.0 / np.sqrt(qv.shape[-1])
    p = qv @ np.swapaxes(kv, -1, -2)
    p *= scale
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p *= 1.0 / p.sum(axis=-1, keepdims=True)
    out = p @ vv
    if not (is_var(q) or is_var(k) or is_var(v)):
        return out

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g if _needs(v) else None
        gs = g @ np.swapaxes(vv, -1, -2)
        gs -= (gs * p).sum(axis=-1, keepdims=True)
        gs *= p
        gs *= scale
        gq = gs @ kv if _needs(q) else None
        gk = np.swapaxes(gs, -1, -2) @ qv if _needs(k) else None
        return gq, gk, gv

    return _make(out, (q, k, v), bw, "attention")


_UFUNC_MAP = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.matmul: matmul,
    np.negative: neg,
    np.power: power,
}


# ------------------------------------------------------------------- backward

def backward(out: Var, seed=None) -> None:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    order = []
    seen = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if _needs(p) and id(p) not in seen:
                stack.append((p, False))

    grads = {id(out): np.ones_like(out.data) if seed is None else np.asarray(seed, dtype=out.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not _needs(p):
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def value_and_grad(fn: Callable[[dict], object], params: Mapping[str, np.ndarray]):
    """Evaluate scalar ``fn(params)`` and its gradient w.r.t. every entry of ``params``."""
    leaves = {k: Var(v) for k, v in params.items()}
    out = fn(leaves)
    if not is_var(out):
        val = np.asarray(out)
        if val.size != 1:
            raise ValueError("function must return a scalar")
        return val.reshape(()), {k: np.zeros_like(v) for k, v in params.items()}
    if out.data.size != 1:
        raise ValueError(f"function must return a scalar, got shape {out.data.shape}")
    backward(out)
    grads = {}
    for k, leaf in leaves.items():
        g = leaf.grad
        grads[k] = np.zeros_like(params[k]) if g is None else np.asarray(g, dtype=params[k].dtype).reshape(params[k].shape)
    return out.data.reshape(()), grads


def grad(fn, params):
    """Gradient tree of a scalar function of a parameter tree."""
    return value_and_grad(fn, params)[1]
