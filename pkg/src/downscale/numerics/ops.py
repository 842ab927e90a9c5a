"""Differentiable primitives.

Each op computes its forward value with numpy, credits the flop ledger and
returns a closure producing parent gradients. Elementwise ops broadcast like
numpy; gradients are summed back to the parent's shape.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .flops import credit
from .tensor import Tensor, as_tensor, grad_enabled, make_node

ATTN_CHUNK = 512
# score matrices kept for backward beyond this size raise MemoryError instead of thrashing
ATTN_TAPE_BYTES = int(os.environ.get("DOWNSCALE_ATTN_TAPE_BYTES", 2 << 30))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype != b.dtype:
        # python scalars and constant arrays adopt the tensor's precision
        if not a.requires_grad and a.is_leaf and a.ndim == 0:
            a = Tensor(a.data, dtype=b.dtype)
        elif not b.requires_grad and b.is_leaf and b.ndim == 0:
            b = Tensor(b.data, dtype=a.dtype)
        elif not b.requires_grad and b.is_leaf:
            b = Tensor(b.data, dtype=a.dtype)
        elif not a.requires_grad and a.is_leaf:
            a = Tensor(a.data, dtype=b.dtype)
        else:
            raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data
    credit("other", out.size)
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data
    credit("other", out.size)
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data
    credit("other", out.size)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    credit("other", out.size)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def square(x):
    x = as_tensor(x)
    credit("other", x.size)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)
    credit("other", 8 * x.size)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * dinner),)

    return make_node(out, (x,), bw, "gelu")


def huber(x, delta: float):
    """Smoothed absolute value: x^2/(2 delta) inside |x| <= delta, |x| - delta/2 outside."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    x = as_tensor(x)
    a = np.abs(x.data)
    inside = a <= delta
    out = np.where(inside, x.data * x.data / (2.0 * delta), a - 0.5 * delta)
    credit("other", 2 * x.size)

    def bw(g):
        return (g * np.where(inside, x.data / delta, np.sign(x.data)),)

    return make_node(out.astype(x.dtype, copy=False), (x,), bw, "huber")


# ---------------------------------------------------------------- reductions / shape

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    credit("other", x.size)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(np.ascontiguousarray(out), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, index):
    x = as_tensor(x)
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    # basic slicing never repeats an element, so plain assignment suffices
    fancy = any(not isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_node(np.array(out), (x,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, bw, "stack")


def take_rows(table, idx):
    """Gather rows of a 2-D table; repeated indices accumulate gradient."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (table,), bw, "take_rows")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a[..., m, k] @ b[..., k, n]``; ``b`` may be 2-D and shared across a's batch."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(a.shape[:-2])) if a.ndim > 2 else 1
    credit("matmul", batch * m * n * k)

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def sparse_matmul(matrix, x):
    """Apply a constant scipy sparse matrix to a 2-D tensor: ``matrix @ x``."""
    x = as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_matmul shape mismatch: {matrix.shape} @ {x.shape}")
    out = np.asarray(matrix @ x.data, dtype=x.dtype)
    credit("other", matrix.nnz * x.shape[1])
    mt = matrix.T.tocsr()
    return make_node(out, (x,), lambda g: (np.asarray(mt @ g, dtype=x.dtype),), "sparse_matmul")


# ---------------------------------------------------------------- normalisation / attention

def _softmax_np(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax(x, axis=-1):
    x = as_tensor(x)
    if axis not in (-1, x.ndim - 1):
        moved = transpose(x, _move_last(x.ndim, axis))
        return transpose(softmax(moved), np.argsort(_move_last(x.ndim, axis)))
    p = _softmax_np(x.data)
    credit("other", 3 * x.size)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_node(p, (x,), bw, "softmax")


def _move_last(ndim, axis):
    axis = axis % ndim
    return tuple(i for i in range(ndim) if i != axis) + (axis,)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma = _pair(x, gamma)
    _, beta = _pair(x, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    credit("other", 8 * x.size)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


def attention(q, k, v):
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v`` over the last two axes.

    Credits ``2 * n * m * d`` multiply-adds per batch element to the attention
    counter (score contraction plus value contraction). Without a gradient
    tape the score matrix is materialised in query chunks to bound memory.
    """
    q, k = _pair(q, k)
    _, v = _pair(q, v)
    d = q.shape[-1]
    if d == 0:
        raise ValueError("attention head width must be positive")
    if k.shape != v.shape or k.shape[-1] != d or q.shape[:-2] != k.shape[:-2]:
        raise ValueError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    n, m = q.shape[-2], k.shape[-2]
    batch = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
    credit("attention", batch * 2 * n * m * d)
    scale = 1.0 / math.sqrt(d)
    tracked = grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)

    if not tracked:
        qf = q.data.reshape(batch, n, d)
        kf = k.data.reshape(batch, m, d)
        vf = v.data.reshape(batch, m, d)
        out = np.empty_like(qf)
        for b in range(batch):
            kt = kf[b].T * scale
            for lo in range(0, n, ATTN_CHUNK):
                p = _softmax_np(qf[b, lo:lo + ATTN_CHUNK] @ kt)
                out[b, lo:lo + ATTN_CHUNK] = p @ vf[b]
        return make_node(out.reshape(q.shape), (q, k, v), None, "attention")

    need = 2 * batch * n * m * q.dtype.itemsize
    if need > ATTN_TAPE_BYTES:
        raise MemoryError(f"attention with gradient needs {need / 2**30:.1f} GiB for {batch}x{n}x{m} scores "
                          f"(limit {ATTN_TAPE_BYTES / 2**30:.1f} GiB)")
    kt = np.swapaxes(k.data, -1, -2)
    p = _softmax_np((q.data @ kt) * scale)
    out = p @ v.data

    def bw(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    return make_node(out, (q, k, v), bw, "attention")


# ---------------------------------------------------------------- image ops

def conv2d(x, kernels, bias=None, padding="same"):
    """Cross-correlate ``x[C_in,H,W]`` with ``kernels[C_out,C_in,kh,kw]``.

    ``same`` zero-pads by half the kernel extent; ``valid`` does not pad.
    """
    x, kernels = _pair(x, kernels)
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ValueError(f"conv2d shape mismatch: x{x.shape} kernels{kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel extents must be odd")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (ph, ph), (pw, pw)))
    ho, wo = xd.shape[1] - kh + 1, xd.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {xd.shape[1:]}")
    w = kernels.data
    out = np.zeros((c_out, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(w[:, :, i, j], xd[:, i:i + ho, j:j + wo], axes=(1, 0))
    parents = (x, kernels)
    if bias is not None:
        _, bias = _pair(x, bias)
        out += bias.data[:, None, None]
        parents = (x, kernels, bias)
    credit("conv", c_out * c_in * kh * kw * ho * wo)

    def bw(g):
        gx = np.zeros_like(xd)
        gw = np.empty_like(w)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + ho, j:j + wo] += np.tensordot(w[:, :, i, j].T, g, axes=(1, 0))
                gw[:, :, i, j] = np.tensordot(g, xd[:, i:i + ho, j:j + wo], axes=([1, 2], [1, 2]))
        if ph or pw:
            gx = gx[:, ph:ph + x.shape[1], pw:pw + x.shape[2]]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(1, 2)),)
        return grads

    return make_node(out, parents, bw, "conv2d")


def pad_edge(x, width):
    """Replicate-pad the last two axes of ``x[C,H,W]``.

    ``width`` is an int or ``(top, bottom, left, right)``.
    """
    x = as_tensor(x)
    if isinstance(width, int):
        width = (width,) * 4
    top, bottom, left, right = (int(w) for w in width)
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad widths must be non-negative")
    _, h, w = x.shape
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right)), mode="edge")

    def bw(g):
        gr = g[:, top:top + h].copy()
        gr[:, 0] += g[:, :top].sum(axis=1)
        gr[:, h - 1] += g[:, top + h:].sum(axis=1)
        gx = gr[:, :, left:left + w].copy()
        gx[:, :, 0] += gr[:, :, :left].sum(axis=2)
        gx[:, :, w - 1] += gr[:, :, left + w:].sum(axis=2)
        return (gx,)

    return make_node(out, (x,), bw, "pad_edge")


def bilinear_matrix(size: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-centred (align-corners-false) upsampling."""
    a = np.zeros((size * factor, size), dtype=dtype)
    for o in range(size * factor):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        if i0 == i1:
            a[o, i0] = 1.0
        else:
            a[o, i0] += 1.0 - frac
            a[o, i1] += frac
    return a


def upsample_bilinear(x, factor: int):
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    if factor == 1:
        return make_node(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    _, h, w = x.shape
    ah = bilinear_matrix(h, factor, x.dtype)
    aw = bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)
    credit("other", 4 * out.size)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_node(out, (x,), bw, "upsample_bilinear")


def pixel_shuffle(tokens, grid_h: int, grid_w: int, channels: int, block: int):
    """Lay out per-token pixel blocks ``[gh*gw, C*b*b]`` as an image ``[C, gh*b, gw*b]``."""
    t = reshape(tokens, (grid_h, grid_w, channels, block, block))
    t = transpose(t, (2, 0, 3, 1, 4))
    return reshape(t, (channels, grid_h * block, grid_w * block))


def patchify(image, block: int):
    """Inverse layout of :func:`pixel_shuffle` for ``[C, H, W]``: returns ``[C, gh*gw, b*b]``."""
    c, h, w = image.shape
    gh, gw = h // block, w // block
    t = reshape(image, (c, gh, block, gw, block))
    t = transpose(t, (0, 1, 3, 2, 4))
    return reshape(t, (c, gh * gw, block * block))
