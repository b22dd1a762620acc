"""Waveform I/O, STFT analysis, 80-band log-mel features and Griffin-Lim inversion.

Framing never pads: a signal of ``n`` samples yields
``1 + (n - win_length) // hop_length`` frames, and the inverse transform of
``T`` frames has ``(T - 1) * hop_length + win_length`` samples.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .errors import EmptyAudio, InputTooShort, InvalidRange, UnsupportedFormat

LOG_FLOOR = 1e-5
MEL_FLOOR_VALUE = float(np.log(LOG_FLOOR))


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 1 <= self.hop_length <= self.win_length <= self.n_fft:
            raise ValueError("need 1 <= hop_length <= win_length <= n_fft")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise InputTooShort(f"{n_samples} samples is shorter than one window ({self.win_length})")
        return 1 + (n_samples - self.win_length) // self.hop_length

    def num_samples(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop_length + self.win_length


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


# ---------------------------------------------------------------- WAV I/O

def wav_read(path) -> Waveform:
    """Read 16-bit PCM; stereo is averaged to mono, -32768 maps to -1.0."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if width != 2:
        raise UnsupportedFormat(f"{path}: only 16-bit PCM is supported, got {8 * width}-bit")
    if not raw:
        raise EmptyAudio(f"{path}: no audio frames")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        pcm = pcm.reshape(-1, n_channels).mean(axis=1)
    return Waveform(pcm, rate)


def wav_write(path, w: Waveform) -> None:
    if len(w) == 0:
        raise EmptyAudio("refusing to write an empty waveform")
    pcm = np.clip(np.rint(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- STFT

@lru_cache(maxsize=8)
def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window, read-only."""
    n = np.arange(length)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / length)
    w.setflags(write=False)
    return w


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    T = cfg.num_frames(x.shape[0])
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[::cfg.hop_length][:T]
    return view * hann_window(cfg.win_length)


def stft_complex(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex spectra ``[T, n_fft/2+1]`` of Hann-windowed frames."""
    return np.fft.rfft(_frames(np.asarray(samples, dtype=np.float64), cfg), n=cfg.n_fft, axis=-1)


def stft(w: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Magnitude spectrogram ``[T, n_fft/2+1]``."""
    samples = w.samples if isinstance(w, Waveform) else w
    return np.abs(stft_complex(samples, cfg))


def istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_complex`.

    The squared-window normaliser is floored so the edge samples, which only
    one tapered frame covers, are not blown up.
    """
    T = spec.shape[0]
    win = hann_window(cfg.win_length)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=-1)[:, :cfg.win_length] * win
    n = cfg.num_samples(T)
    out = np.zeros(n)
    norm = np.zeros(n)
    hop, wl = cfg.hop_length, cfg.win_length
    w2 = win * win
    for t in range(T):
        out[t * hop:t * hop + wl] += frames[t]
        norm[t * hop:t * hop + wl] += w2
    return out / np.maximum(norm, 0.1 * norm.max())


# ---------------------------------------------------------------- mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    weights: np.ndarray      # [n_mels, n_bins]
    edges_hz: np.ndarray     # [n_mels + 2]; filter m spans edges[m]..edges[m+2]
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def centers_hz(self) -> np.ndarray:
        return self.edges_hz[1:-1]

    @cached_property
    def pinv(self) -> np.ndarray:
        """Moore-Penrose pseudo-inverse ``[n_bins, n_mels]``."""
        return np.linalg.pinv(self.weights)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: StftConfig = StftConfig(), n_mels: int = 80, f_min: float = 0.0,
                   f_max: float = 8000.0) -> MelFilterbank:
    """Peak-1 triangular filters with centres evenly spaced in mel.

    No area normalisation.  The result is cached and its arrays are
    read-only, so one instance can be shared.
    """
    nyquist = cfg.sample_rate / 2
    if not 0 <= f_min < f_max <= nyquist:
        raise InvalidRange(f"need 0 <= f_min < f_max <= Nyquist ({nyquist}), got {f_min}, {f_max}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    edges[0], edges[-1] = f_min, f_max
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    edges.setflags(write=False)
    return MelFilterbank(weights, edges, float(f_min), float(f_max))


def mel_spectrogram(w: Waveform | np.ndarray, cfg: StftConfig = StftConfig(),
                    fb: MelFilterbank | None = None) -> np.ndarray:
    """Natural-log mel magnitudes ``[T, n_mels]``, floored at ``log(1e-5)``."""
    if isinstance(w, Waveform) and w.sample_rate != cfg.sample_rate:
        raise InvalidRange(f"waveform rate {w.sample_rate} != configured {cfg.sample_rate}")
    fb = fb or mel_filterbank(cfg)
    mag = stft(w, cfg)
    return np.log(np.maximum(mag @ fb.weights.T, LOG_FLOOR)).astype(np.float32)


def mel_to_linear(mel: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    """Least-squares linear magnitudes from log-mel frames, clamped at 0."""
    lin = np.exp(np.asarray(mel, dtype=np.float64)) @ fb.pinv.T
    return np.maximum(lin, 0.0)


# ---------------------------------------------------------------- Griffin-Lim

def griffin_lim(spec: np.ndarray, cfg: StftConfig = StftConfig(), iters: int = 60,
                seed: int = 0) -> Waveform:
    """Recover a waveform whose STFT magnitude approximates ``spec``.

    Starts from seeded uniform random phase and alternates inverse/forward
    transforms, re-imposing ``spec`` each time.  The result is scaled to a
    peak of 0.95 (silence stays silent).
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    spec = np.asarray(spec, dtype=np.float64)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(spec.shape))
    y = istft(spec * phase, cfg)
    for _ in range(iters):
        rebuilt = stft_complex(y, cfg)
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-16)
        y = istft(spec * phase, cfg)
    peak = np.max(np.abs(y)) if y.size else 0.0
    if peak > 0:
        y = y * (0.95 / peak)
    return Waveform(y, cfg.sample_rate)


def spectral_convergence(y: Waveform | np.ndarray, spec: np.ndarray, cfg: StftConfig) -> float:
    """``|| |STFT(y)| - S || / ||S||`` with ``y`` rescaled to best match ``S``.

    The least-squares gain removes Griffin-Lim's peak normalisation from the
    comparison.
    """
    mag = stft(y, cfg)
    spec = np.asarray(spec, dtype=np.float64)
    denom = float((mag * mag).sum())
    gain = float((mag * spec).sum()) / denom if denom > 0 else 0.0
    return float(np.linalg.norm(gain * mag - spec) / max(np.linalg.norm(spec), 1e-12))


def sine(freq: float, n_samples: int, sample_rate: int = 22050, amplitude: float = 0.5,
         phase: float = 0.0) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t + phase)
