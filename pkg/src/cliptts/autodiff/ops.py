"""Differentiable operations over :class:`Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per tensor input.  Ops preserve the
dtype of their inputs, so the same code runs in 32-bit training mode and in
64-bit gradient-check mode.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import EmptyPool, InvalidKernel, InvalidRate, ShapeError
from .tensor import Tensor, record

MASK_VALUE = -1e9


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return record(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return record(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    # np.sign(0) == 0 gives the zero subgradient at the kink
    sign = np.sign(a.data)
    return record(np.abs(a.data), (a,), lambda g: (g * sign,))


def scale_grad(a: Tensor, factor: float) -> Tensor:
    """Identity forward; multiplies the gradient by ``factor`` (0 detaches)."""
    factor = float(factor)
    return record(a.data, (a,), lambda g: (g * factor if factor else None,))


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- linear algebra

def _mm2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a [..., k] @ b [k, n]`` as one GEMM over the flattened leading axes."""
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    A 2-D right operand is shared across every leading index of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        k, n = b.shape

        def bw(g):
            return _mm2(g, b.data.T), a.data.reshape(-1, k).T @ g.reshape(-1, n)

        return record(_mm2(a.data, b.data), (a, b), bw)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return record(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, causal: bool = False) -> Tensor:
    """1-D convolution along time with channels last.

    ``x`` is ``[..., T, Cin]`` and ``weight`` is ``[k, Cin, Cout]``.  The
    default pads ``(k-1)/2`` zeros on both ends so the output keeps length T;
    ``causal=True`` puts all ``k-1`` zeros on the left instead, so output
    frame t only reads inputs at or before t.
    """
    k, cin, cout = weight.shape
    if k % 2 == 0:
        raise InvalidKernel(f"kernel size must be odd, got {k}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    T = x.shape[-2]
    left = k - 1 if causal else (k - 1) // 2
    right = 0 if causal else (k - 1) // 2
    w2 = weight.data.reshape(k * cin, cout)

    if k == 1:
        cols = x.data
    else:
        pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
        xp = np.pad(x.data, pad)
        cols = np.concatenate([xp[..., d:d + T, :] for d in range(k)], axis=-1)
    out = _mm2(cols, w2)
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * cin).T @ g2).reshape(k, cin, cout)
        gcols = _mm2(g, w2.T)
        if k == 1:
            gx = gcols
        else:
            gxp = np.zeros(x.shape[:-2] + (T + left + right, cin), dtype=g.dtype)
            for d in range(k):
                gxp[..., d:d + T, :] += gcols[..., d * cin:(d + 1) * cin]
            gx = gxp[..., left:left + T, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bw)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine params must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return record(y, (x,), bw)


def dropout(x: Tensor, p: float, training: bool, seed=0,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    if not 0 <= p < 1:
        raise InvalidRate(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        rng = np.random.default_rng(seed)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    keep = (rng.random(x.shape) >= p) * scale
    keep = keep.astype(x.dtype)
    return record(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- gathers & masks

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into those rows."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding ids must lie in [0, {V}), got range "
                         f"[{ids.min()}, {ids.max()}]")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return record(table.data[ids], (table,), bw)


def gather_rows(x: Tensor, index) -> Tensor:
    """``out[..., m, :] = x[..., index[..., m], :]`` for ``[N, C]`` or ``[B, N, C]`` inputs."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        return embedding(x, index)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows expects [B,N,C] with [B,M] index, got {x.shape}, {index.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, index), g)
        return (gx,)

    return record(x.data[rows, index], (x,), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return record(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype),))


def mask_rows(x: Tensor, valid) -> Tensor:
    """Zero the time rows of ``x [..., T, C]`` where ``valid [..., T]`` is false."""
    valid = np.asarray(valid, dtype=bool)[..., None]
    out = np.where(valid, x.data, 0).astype(x.dtype)
    return record(out, (x,), lambda g: (np.where(valid, g, 0).astype(g.dtype),))


def masked_mean_pool(x: Tensor, mask) -> Tensor:
    """Mean over the rows of ``x [..., T, C]`` selected by ``mask [..., T]``.

    Unselected rows contribute nothing to the value or the gradient,
    whatever they contain.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ShapeError(f"mask shape {mask.shape} does not match rows of {x.shape}")
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise EmptyPool("masked_mean_pool needs at least one selected row")
    weights = (mask / counts).astype(x.dtype)[..., None]
    out = np.where(mask[..., None], x.data, 0).sum(axis=-2) / counts.astype(x.dtype)

    def bw(g):
        return (g[..., None, :] * weights,)

    return record(out.astype(x.dtype), (x,), bw)


# ---------------------------------------------------------------- losses

def loss(pred: Tensor, target, kind: str = "mae", mask=None) -> Tensor:
    """Mean absolute or mean squared error, reduced to a scalar.

    ``mask`` (broadcastable to ``pred``, or matching all but its last axis)
    restricts the mean to selected elements.  The MAE subgradient at
    ``pred == target`` is 0.
    """
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    if kind not in ("mae", "mse"):
        raise ValueError(f"unknown loss kind {kind!r}")
    diff = pred.data - target.data
    if mask is None:
        w = np.asarray(1.0 / diff.size, dtype=pred.dtype)
        wfull = None
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == pred.ndim - 1:
            mask = mask[..., None]
        mask = np.broadcast_to(mask, pred.shape)
        count = int(mask.sum())
        if count == 0:
            raise EmptyPool("loss mask selects no elements")
        wfull = (mask / count).astype(pred.dtype)
        w = wfull
    if kind == "mae":
        val = (np.abs(diff) * w).sum() if wfull is not None else np.abs(diff).mean()
        local = np.sign(diff) * w
    else:
        val = (diff * diff * w).sum() if wfull is not None else (diff * diff).mean()
        local = 2 * diff * w
    local = local.astype(pred.dtype)

    def bw(g):
        gp = g * local
        return gp, -gp

    return record(np.asarray(val, dtype=pred.dtype), (pred, target), bw)

