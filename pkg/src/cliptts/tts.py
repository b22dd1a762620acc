"""Text-to-mel synthesis on top of a pretrained text encoder.

The text encoder is lifted out of a contrastive checkpoint; a fresh
causally masked decoder maps its length-regulated states to 80 mel bins.
Waveforms come from Griffin-Lim behind a small vocoder interface.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import numpy as np

from . import checkpoint
from .audio import StftConfig, Waveform, griffin_lim, mel_filterbank, mel_to_linear
from .autodiff import Adam, Module, Tape, Tensor, backward, ops
from .blocks import AttentionMask, FFTBlock, Linear, ModelConfig, lr_to_frames
from .data import ClipBatch, Utterance, collate
from .errors import NonFiniteGradient, ShapeError
from .speech_clip import TextEncoder, TextEncoding, duration_loss
from .text import Lexicon, PhonemeInventory, positional_encoding, text_to_phonemes

TEXT_ENCODER_PREFIX = "text_encoder."


class MelDecoder(Module):
    """Positions, causal FFT blocks, then a linear narrowing d -> n_mels."""

    def __init__(self, cfg: ModelConfig = ModelConfig()) -> None:
        self.cfg = cfg
        self.fft = [FFTBlock(cfg.d_model, cfg.n_heads, cfg.ffn_hidden, cfg.ffn_kernels,
                             cfg.dropout, causal=cfg.decoder_causal) for _ in range(cfg.n_blocks)]
        self.proj = Linear(cfg.d_model, cfg.n_mels)

    def __call__(self, expanded: Tensor, valid: np.ndarray | None = None,
                 rng: np.random.Generator | None = None) -> Tensor:
        """``[B, M, d]`` (or ``[M, d]``) frame states to ``[B, M, n_mels]`` mels."""
        squeeze = expanded.ndim == 2
        if squeeze:
            expanded = ops.reshape(expanded, (1,) + expanded.shape)
        if expanded.ndim != 3 or expanded.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"decoder expects [B, M, {self.cfg.d_model}], got {expanded.shape}")
        B, M, d = expanded.shape
        valid = np.ones((B, M), dtype=bool) if valid is None else np.atleast_2d(valid)
        mask = AttentionMask.from_valid(valid, causal=self.cfg.decoder_causal)
        rng = rng if rng is not None else np.random.default_rng(0)

        x = ops.add(expanded, positional_encoding(M, d, expanded.dtype))
        x = ops.mask_rows(x, valid)
        for block in self.fft:
            x = block(x, mask, rng)
        mel = ops.mask_rows(self.proj(x), valid)
        return ops.reshape(mel, mel.shape[1:]) if squeeze else mel


def decode_mel(decoder: "MelDecoder | ClipTTS", expanded: Tensor,
               mask: np.ndarray | None = None) -> Tensor:
    """Decode ``[M, d]`` frame states to an ``[M, n_mels]`` mel in one parallel pass."""
    dec = decoder.decoder if isinstance(decoder, ClipTTS) else decoder
    return dec(ops.as_tensor(expanded), mask)


@dataclass
class TtsOutput:
    mel: Tensor              # [B, M, n_mels]
    text: TextEncoding


class ClipTTS(Module):
    """Pretrained text encoder feeding a fresh mel decoder."""

    def __init__(self, vocab_size: int, cfg: ModelConfig = ModelConfig(),
                 gt_durations_in_training: bool = True) -> None:
        self.cfg = cfg
        self.gt_durations_in_training = gt_durations_in_training
        self.text_encoder = TextEncoder(vocab_size, cfg)
        self.decoder = MelDecoder(cfg)
        self.bind_names()

    def __call__(self, ids, lengths=None, durations=None,
                 rng: np.random.Generator | None = None) -> TtsOutput:
        rng = rng if rng is not None else np.random.default_rng(0)
        text = self.text_encoder(ids, lengths, durations, rng)
        mel = self.decoder(text.frames, text.frame_valid, rng)
        return TtsOutput(mel, text)

    def trainable_parameters(self, freeze_encoder: bool = False):
        return self.decoder.parameters() if freeze_encoder else self.parameters()


def load_pretrained_text_encoder(ckpt: Mapping[str, np.ndarray] | str | Path,
                                 model: ClipTTS | TextEncoder) -> TextEncoder:
    """Copy every ``text_encoder.*`` tensor of a checkpoint into ``model``.

    Other prefixes (mel encoder, optimizer state) are ignored; a missing or
    surplus encoder tensor raises :class:`CheckpointMismatch`.
    """
    state = checkpoint.load(ckpt) if isinstance(ckpt, (str, Path)) else ckpt
    enc = model.text_encoder if isinstance(model, ClipTTS) else model
    enc.load_state_dict(state, prefix=TEXT_ENCODER_PREFIX, strict=True)
    return enc


def tts_loss(out: TtsOutput, batch: ClipBatch, lambda_dur: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, mel_mae, duration_mse)`` for a teacher-forced forward pass."""
    if out.mel.shape[:2] != batch.mels.shape[:2]:
        raise ShapeError(f"expanded length {out.mel.shape[1]} != mel frames {batch.mels.shape[1]}")
    mae = ops.loss(out.mel, batch.mels, "mae", mask=batch.mel_valid)
    d_loss = duration_loss(out.text.log_durations, batch.durations, batch.phone_valid)
    total = ops.add(mae, ops.mul(d_loss, lambda_dur)) if lambda_dur else mae
    return total, mae, d_loss


def train_tts_step(batch: ClipBatch, model: ClipTTS, opt: Adam, lr: float,
                   lambda_dur: float = 1.0,
                   rng: np.random.Generator | None = None) -> dict[str, float]:
    """One teacher-forced step on every parameter ``opt`` holds."""
    model.train()
    model.zero_grad()
    with Tape():
        out = model(batch.ids, batch.phone_lengths, batch.durations, rng)
        total, mae, d_loss = tts_loss(out, batch, lambda_dur)
    if not np.isfinite(total.data).all():
        raise NonFiniteGradient(f"non-finite loss {total.item()}")
    backward(total)
    opt.step(lr)
    return {"mel_mae": mae.item(), "duration_loss": d_loss.item(),
            "total_loss": total.item(), "lr": lr}


# ---------------------------------------------------------------- vocoder

class Vocoder(Protocol):
    def __call__(self, mel: np.ndarray) -> Waveform: ...


@dataclass(frozen=True)
class GriffinLimVocoder:
    """Log-mel -> pseudo-inverse linear magnitude -> Griffin-Lim."""

    stft: StftConfig = StftConfig()
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    iters: int = 60
    seed: int = 0

    def __call__(self, mel: np.ndarray) -> Waveform:
        fb = mel_filterbank(self.stft, self.n_mels, self.f_min, self.f_max)
        spec = mel_to_linear(mel, fb)
        return griffin_lim(spec, self.stft, iters=self.iters, seed=self.seed)


@dataclass
class Synthesis:
    mel: np.ndarray            # [M, n_mels] log-mel
    wav: Waveform
    phoneme_ids: np.ndarray
    durations: np.ndarray      # frames per phoneme
    timings: dict[str, float] = field(default_factory=dict)


class StageError(RuntimeError):
    """Wraps an upstream failure with the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def synthesize(text: str, model: ClipTTS, inventory: PhonemeInventory,
               vocoder: Vocoder | None = None, lexicon: Lexicon | None = None,
               log_duration_override: float | None = None) -> Synthesis:
    """Text to waveform with predicted durations.

    :class:`EmptyText` is raised as is; other failures are wrapped in
    :class:`StageError` naming the stage.  ``log_duration_override`` replaces
    every predicted log duration (a testing hook).
    """
    vocoder = vocoder or GriffinLimVocoder()
    model.eval()
    timings: dict[str, float] = {}
    seq = text_to_phonemes(text, inventory, lexicon)

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            return fn()
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            timings[name] = time.perf_counter() - t0

    def encode():
        enc = model.text_encoder(seq.ids[None])
        if log_duration_override is None:
            return enc
        forced = lr_to_frames(np.full(len(seq), log_duration_override))
        return model.text_encoder(seq.ids[None], durations=forced[None])

    enc = stage("text_encoder", encode)
    mel = stage("decoder", lambda: model.decoder(enc.frames, enc.frame_valid).data[0])
    wav = stage("vocoder", lambda: vocoder(mel))
    return Synthesis(mel, wav, seq.ids, enc.durations[0], timings)


def eval_tts(data: Iterable[Utterance] | Iterable[ClipBatch], model: ClipTTS) -> dict[str, float]:
    """Per-utterance teacher-forced mel MAE and duration MAE in frames, averaged."""
    model.eval()
    maes: list[float] = []
    dur_errs: list[float] = []
    for item in data:
        batch = collate([item]) if isinstance(item, Utterance) else item
        out = model(batch.ids, batch.phone_lengths, batch.durations)
        err = np.abs(out.mel.data.astype(np.float64) - batch.mels)
        pred = lr_to_frames(out.text.log_durations)
        for b in range(len(batch)):
            T, N = batch.mel_lengths[b], batch.phone_lengths[b]
            maes.append(float(err[b, :T].mean()))
            dur_errs.append(float(np.abs(pred[b, :N] - batch.durations[b, :N]).mean()))
    if not maes:
        raise ValueError("eval_tts needs at least one utterance")
    return {"mel_mae": float(np.mean(maes)), "duration_mae_frames": float(np.mean(dur_errs)),
            "n_utterances": len(maes)}
