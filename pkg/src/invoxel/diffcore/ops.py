"""Differentiable operations on :class:`Tensor`.

Elementwise binary ops broadcast numpy-style; gradients are summed back to
each operand's shape. Shape errors raise ``ValueError`` naming the op and the
offending shapes.
"""
from __future__ import annotations

import builtins

import numpy as np

from .tensor import DEBUG, Tensor, as_tensor, get_dtype, make_op

_EXP_MAX = {np.dtype(np.float32): 88.0, np.dtype(np.float64): 709.0}
_LOG_TINY = {np.dtype(np.float32): 1e-30, np.dtype(np.float64): 1e-300}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_op("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_op("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_op("mul", (a, b), a.data * b.data, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return make_op("div", (a, b), out, bw)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = get_dtype().type(c)
    return make_op("scale", (x,), x.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ValueError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    flat = a.ndim > 2 and b.ndim == 2
    try:
        if flat:
            out = (a.data.reshape(-1, ka) @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        gg = g
        if a.ndim == 1:
            gg = np.expand_dims(gg, -2)
        if b.ndim == 1:
            gg = np.expand_dims(gg, -1)
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, ka).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = np.matmul(gg, np.swapaxes(bd, -1, -2))
            ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
        if b.requires_grad and bd.ndim == 2:
            # shared weight matrix: fold the batch axes into one product
            gb = ad.reshape(-1, ad.shape[-1]).T @ gg.reshape(-1, gg.shape[-1])
            gb = gb.reshape(b.shape)
        elif b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), gg)
            gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
        return ga, gb

    return make_op("matmul", (a, b), out, bw)


# -------------------------------------------------------------- activations

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op("relu", (x,), np.maximum(x.data, 0, dtype=x.data.dtype),
                   lambda g: (g * mask,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return make_op("softplus", (x,), out, lambda g: (g * _sigmoid(d),))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make_op("sigmoid", (x,), out, lambda g: (g * out * (1 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    lim = _EXP_MAX[x.data.dtype]
    d = x.data
    if np.any(d > lim):
        if DEBUG:
            raise FloatingPointError(f"exp: argument {d.max()} overflows")
        d = np.minimum(d, lim)
    out = np.exp(d)
    return make_op("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    tiny = _LOG_TINY[x.data.dtype]
    d = x.data
    if np.any(d <= 0):
        if DEBUG:
            raise FloatingPointError("log: non-positive argument")
        d = np.maximum(d, tiny)
    return make_op("log", (x,), np.log(d), lambda g: (g / d,))


# ------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_op("sum", (x,), np.asarray(out), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


def max(x, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, idx_k, gk, axis=axis)
        return (gx,)

    return make_op("max", (x,), out, bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", (x,), out, bw)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis)
    p = e / s
    return make_op("logsumexp", (x,), out, lambda g: (np.expand_dims(g, axis) * p,))


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("cosine_similarity", a, b)
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True)), eps)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    s = dot / (na * nb)

    def bw(g):
        gk = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(gk * (b.data / (na * nb) - s * a.data / (na * na)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(gk * (a.data / (na * nb) - s * b.data / (nb * nb)), b.shape)
        return ga, gb

    return make_op("cosine_similarity", (a, b), np.squeeze(s, axis), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature size of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op("layer_norm", (x, gamma, beta), out.astype(x.data.dtype), bw)


# ------------------------------------------------------------ shape ops

def cast(x) -> Tensor:
    """Convert to the current default dtype; the gradient is cast back."""
    x = as_tensor(x)
    src = x.data.dtype
    return make_op("cast", (x,), x.data.astype(get_dtype()), lambda g: (g.astype(src),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return make_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_op("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis_n = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i]
                                     for i in range(ref.ndim) if i != axis_n):
            raise ValueError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis_n)
    splits = np.cumsum([t.shape[axis_n] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis_n))

    return make_op("concat", tensors, out, bw)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.any(isinstance(i, (np.ndarray, list)) for i in items)


def slice(x, index) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data[index]
    advanced = _is_advanced(index)

    def bw(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return make_op("slice", (x,), np.array(out), bw)


def take_along(x, indices: np.ndarray, axis: int) -> Tensor:
    """``np.take_along_axis`` with scatter-add backward."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = np.take_along_axis(x.data, indices, axis=axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        idx = list(np.ogrid[tuple(np.s_[:n] for n in g.shape)])
        idx[axis] = indices
        idx = tuple(np.broadcast_to(i, g.shape) for i in idx)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_op("take_along", (x,), out, bw)


OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "scale": scale,
    "matmul": matmul, "relu": relu, "softplus": softplus, "sigmoid": sigmoid,
    "exp": exp, "log": log, "sum": sum, "mean": mean, "max": max,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice, "softmax": softmax, "logsumexp": logsumexp,
    "cosine_similarity": cosine_similarity, "layer_norm": layer_norm,
    "cast": cast, "reshape": reshape, "transpose": transpose, "take_along": take_along,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply the op named ``kind``; unknown names raise ``KeyError``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise KeyError(f"unknown op {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)
