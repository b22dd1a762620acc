"""Contrastive text/mel pretraining.

A text encoder and a mel encoder each produce one unit-norm utterance
embedding. Their cosine-similarity matrix is trained toward the identity:
matched pairs go to 1 and every mismatched pair goes to 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import Adam, Module, Parameter, Tape, Tensor, backward, ops
from .blocks import AttentionMask, DurationPredictor, FFTBlock, Linear, ModelConfig, expand_durations, lr_to_frames
from .data import ClipBatch
from .errors import ContractError, DegenerateBatchWarning, NonFiniteGradient, ShapeError
from .text import PhonemeSequence, positional_encoding

LOSS_KINDS = ("sim_mse", "infonce")


@dataclass
class TextEncoding:
    hidden: Tensor          # [B, N, d] phoneme-level
    log_durations: Tensor   # [B, N]
    durations: np.ndarray   # [B, N] durations used for expansion
    frames: Tensor          # [B, M, d] length-regulated
    frame_valid: np.ndarray  # [B, M]
    pooled: Tensor          # [B, d], unit norm


class TextEncoder(Module):
    """Phoneme embedding + positions -> FFT blocks -> duration predictor -> length regulator."""

    def __init__(self, vocab_size: int, cfg: ModelConfig = ModelConfig()) -> None:
        self.cfg = cfg
        self.embedding = Parameter((vocab_size, cfg.d_model), init="normal",
                                   std=cfg.d_model ** -0.5)
        self.fft = [FFTBlock(cfg.d_model, cfg.n_heads, cfg.ffn_hidden, cfg.ffn_kernels,
                             cfg.dropout) for _ in range(cfg.n_blocks)]
        self.duration_predictor = DurationPredictor(cfg.d_model, cfg.dp_hidden, cfg.dp_kernel,
                                                    cfg.dp_dropout)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def __call__(self, ids, lengths=None, durations=None,
                 rng: np.random.Generator | None = None) -> TextEncoding:
        """Encode a padded id batch ``[B, N]``.

        With ``durations`` (teacher forcing) the phoneme states are expanded
        by them; otherwise by the rounded predictions.
        """
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        B, N = ids.shape
        lengths = np.full(B, N) if lengths is None else np.asarray(lengths, dtype=np.int64)
        mask = AttentionMask(lengths)
        valid = mask.key_valid(N)
        rng = rng if rng is not None else np.random.default_rng(0)
        d = self.cfg.d_model

        x = ops.mul(ops.embedding(self.embedding, ids), math.sqrt(d))
        x = ops.add(x, positional_encoding(N, d, self.embedding.dtype))
        x = ops.mask_rows(x, valid)
        for block in self.fft:
            x = block(x, mask, rng)
        log_d = self.duration_predictor(ops.scale_grad(x, self.cfg.dp_grad_scale), valid, rng)

        if durations is None:
            durations = lr_to_frames(log_d) * valid
        else:
            durations = np.atleast_2d(np.asarray(durations, dtype=np.int64)) * valid
        index, frame_valid = expand_durations(durations)
        frames = ops.mask_rows(ops.gather_rows(x, index), frame_valid)
        pooled = ops.l2_normalize(ops.masked_mean_pool(frames, frame_valid))
        return TextEncoding(x, log_d, durations, frames, frame_valid, pooled)


class MelEncoder(Module):
    """Linear n_mels -> d projection, positions, then FFT blocks and masked pooling."""

    def __init__(self, cfg: ModelConfig = ModelConfig()) -> None:
        self.cfg = cfg
        self.proj = Linear(cfg.n_mels, cfg.d_model)
        self.fft = [FFTBlock(cfg.d_model, cfg.n_heads, cfg.ffn_hidden, cfg.ffn_kernels,
                             cfg.dropout) for _ in range(cfg.n_blocks)]

    def __call__(self, mels, lengths=None,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
        """Return ``(frames [B,T,d], pooled [B,d], frame_valid [B,T])``."""
        mels = mels.data if isinstance(mels, Tensor) else np.asarray(mels)
        if mels.ndim == 2:
            mels = mels[None]
        if mels.shape[-1] != self.cfg.n_mels:
            raise ShapeError(f"mel encoder expects {self.cfg.n_mels} mel bins, got {mels.shape[-1]}")
        B, T, _ = mels.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
        mask = AttentionMask(lengths)
        valid = mask.key_valid(T)
        rng = rng if rng is not None else np.random.default_rng(0)

        x = self.proj(Tensor(mels, dtype=self.proj.weight.dtype))
        x = ops.add(x, positional_encoding(T, self.cfg.d_model, x.dtype))
        x = ops.mask_rows(x, valid)
        for block in self.fft:
            x = block(x, mask, rng)
        pooled = ops.l2_normalize(ops.masked_mean_pool(x, valid))
        return x, pooled, valid


@dataclass
class ClipOutput:
    similarity: Tensor
    text: TextEncoding
    mel_pooled: Tensor


class SpeechClip(Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig = ModelConfig(),
                 loss_kind: str = "sim_mse", temperature: float = 0.07) -> None:
        if loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
        self.cfg = cfg
        self.loss_kind = loss_kind
        self.init_temperature = temperature
        self.text_encoder = TextEncoder(vocab_size, cfg)
        self.mel_encoder = MelEncoder(cfg)
        self.log_temperature = Parameter((1,), init="zeros") if loss_kind == "infonce" else None
        self.bind_names()

    def initialize(self, seed: int) -> "SpeechClip":
        super().initialize(seed)
        if self.log_temperature is not None:
            self.log_temperature.data[...] = math.log(self.init_temperature)
        return self

    def __call__(self, batch: ClipBatch, rng: np.random.Generator | None = None,
                 teacher_forced: bool = True) -> ClipOutput:
        rng = rng if rng is not None else np.random.default_rng(0)
        text = self.text_encoder(batch.ids, batch.phone_lengths,
                                 batch.durations if teacher_forced else None, rng)
        _, mel_pooled, _ = self.mel_encoder(batch.mels, batch.mel_lengths, rng)
        return ClipOutput(similarity_matrix(text.pooled, mel_pooled), text, mel_pooled)


def encode_text(model: SpeechClip | TextEncoder, seq: PhonemeSequence,
                use_gt_durations: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Single-utterance text encoding: ``(frames [M,d], pooled [d], log_durations [N])``."""
    enc = model.text_encoder if isinstance(model, SpeechClip) else model
    if use_gt_durations and seq.durations is None:
        raise ValueError("use_gt_durations needs a sequence with durations")
    out = enc(seq.ids[None], durations=seq.durations[None] if use_gt_durations else None)
    frames = ops.reshape(out.frames, out.frames.shape[1:])
    return frames, ops.reshape(out.pooled, (-1,)), ops.reshape(out.log_durations, (-1,))


def encode_mel(model: SpeechClip | MelEncoder, mel) -> tuple[Tensor, Tensor]:
    """Single-utterance mel encoding: ``(frames [T,d], pooled [d])``."""
    enc = model.mel_encoder if isinstance(model, SpeechClip) else model
    frames, pooled, _ = enc(mel)
    return ops.reshape(frames, frames.shape[1:]), ops.reshape(pooled, (-1,))


def similarity_matrix(text_pooled, mel_pooled, tol: float = 1e-3) -> Tensor:
    """Cosine similarities ``S[i, j]`` of text item i against mel item j.

    Rows must already be unit length; the product of unit vectors is the
    cosine.
    """
    text_pooled = ops.as_tensor(text_pooled)
    mel_pooled = ops.as_tensor(mel_pooled, like=text_pooled)
    for name, t in (("text", text_pooled), ("mel", mel_pooled)):
        norms = np.linalg.norm(t.data, axis=-1)
        if np.any(np.abs(norms - 1) > tol):
            raise ContractError(f"{name} embeddings are not unit-normalised "
                                f"(norms in [{norms.min():.4g}, {norms.max():.4g}])")
    return ops.matmul(text_pooled, ops.transpose(mel_pooled))


def clip_loss(S: Tensor, kind: str = "sim_mse", log_temperature: Tensor | None = None) -> Tensor:
    """``sim_mse``: mean of (S - I)^2.  ``infonce``: symmetric cross-entropy of S / tau."""
    B = S.shape[0]
    if S.ndim != 2 or S.shape[1] != B:
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    if B < 2:
        warnings.warn("contrastive loss on a batch of one has no negatives",
                      DegenerateBatchWarning, stacklevel=2)
    eye = np.eye(B, dtype=S.dtype)
    if kind == "sim_mse":
        return ops.loss(S, eye, "mse")
    if kind == "infonce":
        if log_temperature is None:
            log_temperature = Tensor([math.log(0.07)], dtype=S.dtype)
        logits = ops.mul(S, ops.exp(ops.neg(log_temperature)))
        rows = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), eye))
        cols = ops.sum(ops.mul(ops.log_softmax(logits, axis=0), eye))
        return ops.mul(ops.add(rows, cols), -0.5 / B)
    raise ValueError(f"unknown contrastive loss {kind!r}")


def duration_loss(log_durations: Tensor, durations: np.ndarray, valid: np.ndarray) -> Tensor:
    """MSE between predicted and ground-truth log-durations over real phonemes."""
    target = np.log(np.maximum(durations, 1)).astype(log_durations.dtype)
    return ops.loss(log_durations, target, "mse", mask=valid)


def similarity_stats(S: np.ndarray) -> tuple[float, float]:
    B = S.shape[0]
    diag = float(np.mean(np.diag(S)))
    off = float((S.sum() - np.trace(S)) / (B * B - B)) if B > 1 else 0.0
    return diag, off


def train_clip_step(batch: ClipBatch, model: SpeechClip, opt: Adam, lr: float,
                    lambda_dur: float = 1.0,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """One optimisation step on ``batch``; returns scalar diagnostics.

    A non-finite loss or gradient raises :class:`NonFiniteGradient` before
    any parameter changes.
    """
    model.train()
    opt.zero_grad()
    with Tape():
        out = model(batch, rng=rng)
        c_loss = clip_loss(out.similarity, model.loss_kind, model.log_temperature)
        d_loss = duration_loss(out.text.log_durations, batch.durations, batch.phone_valid)
        total = ops.add(c_loss, ops.mul(d_loss, lambda_dur)) if lambda_dur else c_loss
    if not np.isfinite(total.data).all():
        raise NonFiniteGradient(f"non-finite loss {total.item()}")
    backward(total)
    opt.step(lr)
    diag, off = similarity_stats(out.similarity.data)
    return {"loss": c_loss.item(), "duration_loss": d_loss.item(), "total_loss": total.item(),
            "diag_mean": diag, "offdiag_mean": off, "lr": lr}


def retrieval_from_similarity(S: np.ndarray) -> tuple[int, int]:
    """Correct top-1 counts ``(text->mel, mel->text)`` for one similarity matrix."""
    S = np.asarray(S)
    target = np.arange(S.shape[0])
    return int((S.argmax(axis=1) == target).sum()), int((S.argmax(axis=0) == target).sum())


def retrieval_eval(batches: Iterable[ClipBatch], model: SpeechClip) -> dict[str, float]:
    """Top-1 retrieval accuracy in both directions, pooled over all items."""
    model.eval()
    t2m = m2t = total = 0
    for batch in batches:
        S = model(batch).similarity.data
        a, b = retrieval_from_similarity(S)
        t2m += a
        m2t += b
        total += len(batch)
    if total == 0:
        raise ValueError("retrieval_eval needs at least one batch")
    return {"text_to_mel_top1": t2m / total, "mel_to_text_top1": m2t / total, "n_items": total}
