"""Differentiable primitives.

Every op takes Tensors (or array-likes, treated as constants) and returns a
new Tensor whose backward closure maps the upstream gradient to one gradient
per input. Layout conventions: batch first; channels/features on axis 1 for
conv and batch-norm; time on the last axis.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Context, Tensor, as_tensor, make_node, shape_error


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise shape_error(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    y = np.where(pos, x.data, alpha * np.expm1(np.minimum(x.data, 0.0)))

    def bw(g):
        return (g * np.where(pos, 1.0, y + alpha),)

    return make_node(y, (x,), bw, "elu")


def detach(x) -> Tensor:
    """Constant copy of ``x``: no gradient flows through it."""
    return Tensor(as_tensor(x).data)


# ------------------------------------------------------------------ shaping

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise shape_error("reshape", f"cannot reshape {x.shape} to {tuple(shape)}") from None
    return make_node(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise shape_error("transpose", f"axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise shape_error("stack", "nothing to stack")
    if any(x.shape != xs[0].shape for x in xs):
        raise shape_error("stack", f"mismatched shapes {[x.shape for x in xs]}")
    y = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make_node(y, tuple(xs), bw, "stack")


def index_select(x, indices: Sequence[int], axis: int = 0) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise shape_error("index_select", f"index out of range for axis {axis} of size {n}")

    def bw(g):
        gx = np.zeros_like(x.data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return make_node(np.take(x.data, idx, axis=axis), (x,), bw, "index_select")


def pick(x, labels) -> Tensor:
    """Row-wise gather: ``x[i, labels[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    labels = np.asarray(labels, dtype=np.intp)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise shape_error("pick", f"need (B,K) and (B,), got {x.shape} and {labels.shape}")
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[rows, labels] = g
        return (gx,)

    return make_node(x.data[rows, labels], (x,), bw, "pick")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_node(x.data.mean(axis=axis, keepdims=keepdims), (x,), bw, "mean")


# ------------------------------------------------------------------- linear

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise shape_error("matmul", f"incompatible shapes {a.shape} @ {b.shape}")
    try:
        y = a.data @ b.data
    except ValueError:
        raise shape_error("matmul", f"incompatible batch dims {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(y, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ------------------------------------------------------------- convolutions

def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x, w, b=None, groups: int = 1, padding: str = "same") -> Tensor:
    """Stride-1 grouped 1-D convolution (cross-correlation).

    x: (B, Cin, T); w: (Cout, Cin // groups, k); b: (Cout,) or None.
    ``padding`` is ``"same"`` (output length T) or ``"valid"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise shape_error("conv1d", f"need 3-D input and weight, got {x.shape}, {w.shape}")
    B, cin, T = x.shape
    cout, cpg, k = w.shape
    if cin % groups or cout % groups or cpg != cin // groups:
        raise shape_error("conv1d", f"channels {cin}->{cout} with weight {w.shape} and groups={groups}")
    pl, pr = _same_pad(k) if padding == "same" else (0, 0)
    if T + pl + pr < k:
        raise shape_error("conv1d", f"input length {T} shorter than kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr))) if pl or pr else x.data
    win = sliding_window_view(xp, k, axis=2)  # (B, Cin, Tout, k)
    tout = win.shape[2]
    opg = cout // groups
    # one GEMM per group: (G, B*Tout, cpg*k) @ (G, cpg*k, opg)
    cols = win.reshape(B, groups, cpg, tout, k).transpose(1, 0, 3, 2, 4).reshape(groups, B * tout, cpg * k)
    wmat = w.data.reshape(groups, opg, cpg * k).transpose(0, 2, 1)
    y = (cols @ wmat).reshape(groups, B, tout, opg).transpose(1, 0, 3, 2).reshape(B, cout, tout)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise shape_error("conv1d", f"bias shape {b.shape} != ({cout},)")
        y = y + b.data[None, :, None]
        parents = (x, w, b)

    def bw(g):
        gg = g.reshape(B, groups, opg, tout).transpose(1, 0, 3, 2).reshape(groups, B * tout, opg)
        gw = (cols.transpose(0, 2, 1) @ gg).transpose(0, 2, 1).reshape(w.shape)
        gcols = gg @ wmat.transpose(0, 2, 1)  # (G, B*Tout, cpg*k)
        gwin = gcols.reshape(groups, B, tout, cpg, k).transpose(1, 0, 3, 2, 4).reshape(B, cin, tout, k)
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        for j in range(k):
            gxp[:, :, j:j + tout] += gwin[..., j]
        gx = gxp[:, :, pl:pl + T]
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2)))
        return tuple(out)

    return make_node(y, parents, bw, "conv1d")


def spatial_conv(x, w, b=None, groups: int = 1) -> Tensor:
    """Convolution whose kernel spans the whole electrode axis.

    x: (B, F, C, T); w: (Fout, F // groups, C); returns (B, Fout, T).
    ``groups == F`` gives the depthwise spatial filter.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3:
        raise shape_error("spatial_conv", f"need (B,F,C,T) and (Fout,F/g,C), got {x.shape}, {w.shape}")
    B, F, C, T = x.shape
    fout, fpg, wc = w.shape
    if F % groups or fout % groups or fpg != F // groups or wc != C:
        raise shape_error("spatial_conv", f"input {x.shape} incompatible with weight {w.shape}, groups={groups}")
    opg = fout // groups
    xg = x.data.reshape(B, groups, fpg * C, T)
    wg = w.data.reshape(groups, opg, fpg * C)
    y = (wg @ xg).reshape(B, fout, T)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (fout,):
            raise shape_error("spatial_conv", f"bias shape {b.shape} != ({fout},)")
        y = y + b.data[None, :, None]
        parents = (x, w, b)

    def bw(g):
        gg = g.reshape(B, groups, opg, T)
        gx = (wg.transpose(0, 2, 1) @ gg).reshape(x.shape)
        gw = (gg.transpose(1, 2, 0, 3).reshape(groups, opg, B * T)
              @ xg.transpose(1, 0, 3, 2).reshape(groups, B * T, fpg * C))
        out = [gx, gw.reshape(w.shape)]
        if b is not None:
            out.append(g.sum(axis=(0, 2)))
        return tuple(out)

    return make_node(y, parents, bw, "spatial_conv")


def depthwise_conv(x, w) -> Tensor:
    """Depthwise spatial filter: w of shape (F * depth, 1, C)."""
    x = as_tensor(x)
    return spatial_conv(x, w, groups=x.shape[1] if x.ndim == 4 else 1)


def pointwise_conv(x, w, b=None) -> Tensor:
    """1x1 convolution mixing channels: x (B, Cin, T), w (Cout, Cin)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise shape_error("pointwise_conv", f"input {x.shape} incompatible with weight {w.shape}")
    B, cin, T = x.shape
    y = w.data @ x.data
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise shape_error("pointwise_conv", f"bias shape {b.shape} != ({w.shape[0]},)")
        y = y + b.data[None, :, None]
        parents = (x, w, b)

    def bw(g):
        gx = w.data.T @ g
        gw = g.transpose(1, 0, 2).reshape(-1, B * T) @ x.data.transpose(1, 0, 2).reshape(cin, B * T).T
        out = [gx, gw]
        if b is not None:
            out.append(g.sum(axis=(0, 2)))
        return tuple(out)

    return make_node(y, parents, bw, "pointwise_conv")


def avg_pool(x, window: int) -> Tensor:
    """Non-overlapping average pool on the last axis (window == stride, floor)."""
    x = as_tensor(x)
    T = x.shape[-1]
    n = T // window
    if n == 0:
        raise shape_error("avg_pool", f"length {T} shorter than window {window}")
    used = x.data[..., : n * window]
    y = used.reshape(*x.shape[:-1], n, window).mean(axis=-1)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., : n * window] = np.repeat(g / window, window, axis=-1)
        return (gx,)

    return make_node(y, (x,), bw, "avg_pool")


# ------------------------------------------------------------ normalization

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               ctx: Context, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Batch-norm over axis 1. Train mode updates the running buffers in place."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    F = x.shape[1] if x.ndim >= 2 else -1
    if gamma.shape != (F,) or beta.shape != (F,) or running_mean.shape != (F,):
        raise shape_error("batch_norm", f"feature dim {F} vs affine {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, F) + (1,) * (x.ndim - 2)
    n = x.data.size // F
    if ctx.training:
        if n < 2:
            raise shape_error("batch_norm", "train mode needs more than one value per feature")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    training = ctx.training

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return make_node(y, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise shape_error("layer_norm", f"last dim {D} vs affine {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(x.ndim - 1))
        dxhat = g * gamma.data
        dx = (inv / D) * (
            D * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(y, (x, gamma, beta), bw, "layer_norm")


# ------------------------------------------------------------------ softmax

def _sorted_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` in ascending order, one term at a time.

    numpy's own reductions pick a summation order from the memory layout, so
    equal multisets could round differently; a fixed sequential order cannot.
    """
    terms = np.moveaxis(np.sort(x, axis=axis), axis, 0)
    total = terms[0].copy()
    for t in terms[1:]:
        total += t
    return np.expand_dims(total, axis) if keepdims else total


def _softmax(z: np.ndarray, axis: int, order_invariant: bool) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = _sorted_sum(e, axis, keepdims=True) if order_invariant else e.sum(axis=axis, keepdims=True)
    return e / s


def softmax(x, axis: int = -1, order_invariant: bool = False) -> Tensor:
    """Softmax along ``axis``.

    With ``order_invariant`` the normaliser is summed in sorted order, so
    permuting the entries permutes the output bit-for-bit.
    """
    x = as_tensor(x)
    y = _softmax(x.data, axis, order_invariant)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make_node(y, (x,), bw, "log_softmax")


def convex_combine(weights, values) -> Tensor:
    """``sum_e weights[b, e] * values[b, e, :]``, summed in sorted order.

    Sorting the E products per coordinate before summation makes the result
    independent of the order of experts, bit-for-bit.
    """
    a, v = as_tensor(weights), as_tensor(values)
    if a.ndim != 2 or v.ndim != 3 or v.shape[:2] != a.shape:
        raise shape_error("convex_combine", f"weights {a.shape} vs values {v.shape}")
    y = _sorted_sum(a.data[:, :, None] * v.data, axis=1)

    def bw(g):
        return (g[:, None, :] * v.data).sum(axis=-1), a.data[:, :, None] * g[:, None, :]

    return make_node(y, (a, v), bw, "convex_combine")


# -------------------------------------------------------------- stochastic

def dropout(x, p: float, ctx: Context) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    x = as_tensor(x)
    if not ctx.training or p == 0.0:
        return x
    keep = 1.0 - p
    mask = ((ctx.rng.random(x.shape) < keep) / keep).astype(x.data.dtype)
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------- attention

def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over (..., N, d) tensors.

    The attention weights are kept on the result as ``out.extras["attn"]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1] or q.ndim < 2:
        raise shape_error("attention", f"q {q.shape}, k {k.shape}, v {v.shape}")
    d = q.shape[-1]
    s = 1.0 / math.sqrt(d)
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * s
    a = _softmax(scores, -1, False)
    y = a @ v.data

    def bw(g):
        gv = np.swapaxes(a, -1, -2) @ g
        ga = g @ np.swapaxes(v.data, -1, -2)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * s
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    out = make_node(y, (q, k, v), bw, "attention")
    out.extras = {"attn": a}
    return out
