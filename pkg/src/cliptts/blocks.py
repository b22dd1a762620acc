"""Reusable network pieces: attention, FFT blocks, duration predictor, length regulator.

Sequence tensors are ``[B, T, C]`` (channels last).  Padding sits at the end
of each row and is described by per-item valid lengths; a single unbatched
``[T, C]`` sequence is accepted wherever a batch is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Module, Parameter, Tensor, ops
from .errors import EmptyExpansion, MaskError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 2
    n_blocks: int = 4
    ffn_hidden: int = 1024
    ffn_kernels: tuple[int, int] = (9, 1)
    dropout: float = 0.1
    dp_kernel: int = 3
    dp_hidden: int = 256
    dp_dropout: float = 0.5
    # scale on the gradient the duration predictor sends back into the encoder
    dp_grad_scale: float = 0.0
    n_mels: int = 80
    decoder_causal: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for sinusoidal positions")
        if any(k % 2 == 0 for k in (*self.ffn_kernels, self.dp_kernel)):
            raise ValueError("convolution kernel sizes must be odd")


@dataclass(frozen=True)
class AttentionMask:
    """Which keys each query may attend to.

    Keys past an item's valid length are always hidden; ``causal`` also
    hides keys after the query position.
    """

    valid_lengths: np.ndarray
    causal: bool = False

    @classmethod
    def full(cls, batch: int, T: int, causal: bool = False) -> "AttentionMask":
        return cls(np.full(batch, T, dtype=np.int64), causal)

    @classmethod
    def from_valid(cls, valid: np.ndarray, causal: bool = False) -> "AttentionMask":
        valid = np.atleast_2d(np.asarray(valid, dtype=bool))
        return cls(valid.sum(axis=1).astype(np.int64), causal)

    @property
    def mode(self) -> str:
        return "causal+padding" if self.causal else "padding"

    def key_valid(self, T: int) -> np.ndarray:
        lengths = np.asarray(self.valid_lengths)
        if np.any(lengths < 1):
            raise MaskError("every query row needs at least one visible key (found a valid length of 0)")
        if np.any(lengths > T):
            raise MaskError(f"valid length exceeds sequence length {T}")
        return np.arange(T)[None, :] < lengths[:, None]

    def allowed(self, T: int) -> np.ndarray:
        """Boolean ``[B, 1, T_query, T_key]``."""
        allowed = np.broadcast_to(self.key_valid(T)[:, None, None, :],
                                  (len(self.valid_lengths), 1, T, T))
        if self.causal:
            allowed = allowed & np.tril(np.ones((T, T), dtype=bool))
        return allowed


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise ShapeError(f"expected [T, C] or [B, T, C], got {x.shape}")
    return x, False


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------- layers

class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True) -> None:
        self.weight = Parameter((n_in, n_out))
        self.bias = Parameter((n_out,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, causal: bool = False) -> None:
        self.weight = Parameter((kernel, n_in, n_out))
        self.bias = Parameter((n_out,), init="zeros")
        self.causal = causal

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias, causal=self.causal)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.gamma = Parameter((width,), init="ones")
        self.beta = Parameter((width,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Self-attention with bias-free Q/K/V/output projections."""

    def __init__(self, d_model: int, n_heads: int) -> None:
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = Parameter((d_model, d_model))
        self.wk = Parameter((d_model, d_model))
        self.wv = Parameter((d_model, d_model))
        self.wo = Parameter((d_model, d_model))
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return ops.transpose(ops.reshape(x, (B, T, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, mask: AttentionMask | None = None) -> Tensor:
        x, squeeze = _as_batch(x)
        B, T, C = x.shape
        mask = mask or AttentionMask.full(B, T)
        allowed = mask.allowed(T)
        q = self._split(ops.matmul(x, self.wq))
        k = self._split(ops.matmul(x, self.wk))
        v = self._split(ops.matmul(x, self.wv))
        scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.head_dim))
        scores = ops.masked_fill(scores, ~allowed, ops.MASK_VALUE)
        attn = ops.softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx = ops.matmul(attn, v)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, T, C))
        return _unbatch(ops.matmul(ctx, self.wo), squeeze)


def multi_head_attention(x: Tensor, params: MultiHeadAttention,
                         mask: AttentionMask | None = None) -> Tensor:
    return params(x, mask)


class FFTBlock(Module):
    """Self-attention and a two-layer conv feed-forward, each with residual + post-norm.

    ``causal`` blocks hide future keys in attention and pad their
    convolutions on the left only, so no output frame reads a later input.
    """

    def __init__(self, d_model: int = 256, n_heads: int = 2, ffn_hidden: int = 1024,
                 kernels: Sequence[int] = (9, 1), dropout: float = 0.1,
                 causal: bool = False) -> None:
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm1 = LayerNorm(d_model)
        self.conv1 = Conv1d(d_model, ffn_hidden, kernels[0], causal=causal)
        self.conv2 = Conv1d(ffn_hidden, d_model, kernels[1], causal=causal)
        self.norm2 = LayerNorm(d_model)
        self.dropout = dropout
        self.causal = causal

    def __call__(self, x: Tensor, mask: AttentionMask | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        x, squeeze = _as_batch(x)
        B, T, _ = x.shape
        mask = mask or AttentionMask.full(B, T, self.causal)
        if mask.causal != self.causal:
            mask = AttentionMask(mask.valid_lengths, self.causal)
        valid = mask.key_valid(T)
        rng = rng if rng is not None else np.random.default_rng(0)

        a = self.attn(x, mask)
        y1 = self.norm1(ops.add(x, ops.dropout(a, self.dropout, self.training, rng=rng)))
        h = ops.relu(self.conv1(ops.mask_rows(y1, valid)))
        h = self.conv2(h)
        y2 = self.norm2(ops.add(y1, ops.dropout(h, self.dropout, self.training, rng=rng)))
        return _unbatch(y2, squeeze)


def fft_block(x: Tensor, params: FFTBlock, mask: AttentionMask | None = None,
              training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    params.train(training)
    return params(x, mask, rng)


class DurationPredictor(Module):
    """Two (conv -> ReLU -> LayerNorm -> dropout) stages, then a linear head.

    Predicts one log-duration per phoneme.
    """

    def __init__(self, d_model: int = 256, hidden: int = 256, kernel: int = 3,
                 dropout: float = 0.5) -> None:
        self.conv1 = Conv1d(d_model, hidden, kernel)
        self.norm1 = LayerNorm(hidden)
        self.conv2 = Conv1d(hidden, hidden, kernel)
        self.norm2 = LayerNorm(hidden)
        self.proj = Linear(hidden, 1)
        self.dropout = dropout

    def __call__(self, h: Tensor, valid: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        h, squeeze = _as_batch(h)
        B, N, _ = h.shape
        valid = np.ones((B, N), dtype=bool) if valid is None else np.atleast_2d(valid)
        rng = rng if rng is not None else np.random.default_rng(0)
        x = h
        for conv, norm in ((self.conv1, self.norm1), (self.conv2, self.norm2)):
            x = conv(ops.mask_rows(x, valid))
            x = norm(ops.relu(x))
            x = ops.dropout(x, self.dropout, self.training, rng=rng)
        out = ops.reshape(self.proj(x), (B, N))
        return ops.reshape(out, (N,)) if squeeze else out


def duration_predictor(h: Tensor, params: DurationPredictor, training: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
    params.train(training)
    return params(h, rng=rng)


# ---------------------------------------------------------------- length regulation

def lr_to_frames(log_d) -> np.ndarray:
    """``max(1, round(exp(log_d)))`` per phoneme."""
    log_d = log_d.data if isinstance(log_d, Tensor) else np.asarray(log_d, dtype=np.float64)
    with np.errstate(over="ignore"):
        frames = np.rint(np.exp(np.asarray(log_d, dtype=np.float64)))
    return np.maximum(1, np.minimum(frames, 2**31 - 1)).astype(np.int64)


def expand_durations(durations) -> tuple[np.ndarray, np.ndarray]:
    """Source-row index ``[B, M]`` and frame validity ``[B, M]`` for a batch of durations.

    ``M`` is the largest total; padded frames index row 0 and are invalid.
    """
    d = np.atleast_2d(np.asarray(durations, dtype=np.int64))
    if np.any(d < 0):
        raise ValueError("durations must be nonnegative")
    totals = d.sum(axis=1)
    if np.any(totals == 0):
        raise EmptyExpansion("durations sum to zero frames")
    M = int(totals.max())
    index = np.zeros((d.shape[0], M), dtype=np.int64)
    for b in range(d.shape[0]):
        index[b, :totals[b]] = np.repeat(np.arange(d.shape[1]), d[b])
    valid = np.arange(M)[None, :] < totals[:, None]
    return index, valid


def length_regulator(h: Tensor, durations) -> Tensor:
    """Repeat row i of ``h`` ``durations[i]`` times, preserving order.

    ``[N, C]`` with ``[N]`` durations gives ``[sum(d), C]``; a batch gives
    ``[B, max_total, C]`` with zeroed padding rows.
    """
    durations = np.asarray(durations, dtype=np.int64)
    if durations.shape != h.shape[:-1]:
        raise ShapeError(f"durations shape {durations.shape} does not match rows of {h.shape}")
    index, valid = expand_durations(durations)
    if h.ndim == 2:
        return ops.gather_rows(h, index[0])
    return ops.mask_rows(ops.gather_rows(h, index), valid)
