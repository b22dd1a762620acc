"""Corpora, duration targets and padded batch assembly.

Every :class:`Utterance` satisfies ``sum(durations) == mel frames``; the
constructor enforces it, so nothing downstream has to truncate or pad a
target to make lengths agree.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .audio import MEL_FLOOR_VALUE, StftConfig, Waveform, mel_filterbank, mel_spectrogram, wav_read, wav_write
from .errors import DurationMismatch, ManifestError, TooShort
from .text import BUILTIN_SYMBOLS, PAD_ID, Lexicon, PhonemeInventory, PhonemeSequence, build_inventory, text_to_phonemes

logger = logging.getLogger(__name__)


@dataclass
class Utterance:
    id: str
    phonemes: PhonemeSequence
    mel: np.ndarray
    gt_durations: np.ndarray
    text: str = ""
    wav: Waveform | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mel = np.asarray(self.mel, dtype=np.float32)
        self.gt_durations = np.asarray(self.gt_durations, dtype=np.int64)
        if self.mel.ndim != 2 or self.mel.shape[0] < 1:
            raise ValueError(f"{self.id}: mel must be [T >= 1, n_mels], got {self.mel.shape}")
        if self.gt_durations.shape != self.phonemes.ids.shape:
            raise DurationMismatch(f"{self.id}: {len(self.gt_durations)} durations for "
                                   f"{len(self.phonemes)} phonemes")
        if np.any(self.gt_durations < 1):
            raise DurationMismatch(f"{self.id}: durations must be >= 1")
        if int(self.gt_durations.sum()) != self.mel.shape[0]:
            raise DurationMismatch(f"{self.id}: durations sum to {int(self.gt_durations.sum())} "
                                   f"but mel has {self.mel.shape[0]} frames")
        if self.phonemes.durations is None:
            self.phonemes.durations = self.gt_durations

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


@dataclass
class ClipBatch:
    """Padded batch: phoneme ids/durations ``[B, N]`` and log-mels ``[B, T, n_mels]``."""

    ids: np.ndarray
    phone_lengths: np.ndarray
    durations: np.ndarray
    mels: np.ndarray
    mel_lengths: np.ndarray
    utterance_ids: list[str]

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def phone_valid(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.phone_lengths[:, None]

    @property
    def mel_valid(self) -> np.ndarray:
        return np.arange(self.mels.shape[1])[None, :] < self.mel_lengths[:, None]


def collate(utterances: Sequence[Utterance]) -> ClipBatch:
    if not utterances:
        raise ValueError("cannot collate an empty batch")
    B = len(utterances)
    N = max(len(u.phonemes) for u in utterances)
    T = max(u.n_frames for u in utterances)
    n_mels = utterances[0].mel.shape[1]
    ids = np.full((B, N), PAD_ID, dtype=np.int64)
    durs = np.zeros((B, N), dtype=np.int64)
    mels = np.full((B, T, n_mels), MEL_FLOOR_VALUE, dtype=np.float32)
    for b, u in enumerate(utterances):
        n, t = len(u.phonemes), u.n_frames
        ids[b, :n] = u.phonemes.ids
        durs[b, :n] = u.gt_durations
        mels[b, :t] = u.mel
    return ClipBatch(
        ids=ids,
        phone_lengths=np.array([len(u.phonemes) for u in utterances], dtype=np.int64),
        durations=durs,
        mels=mels,
        mel_lengths=np.array([u.n_frames for u in utterances], dtype=np.int64),
        utterance_ids=[u.id for u in utterances],
    )


def batch_plan(n_frames: Sequence[int], batch_size: int = 16, seed: int = 0,
               bucket_width: int | None = 64) -> list[list[int]]:
    """Utterance indices of each batch; see :func:`make_batches`."""
    if len(n_frames) == 0:
        raise ValueError("no utterances to batch")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = [int(i) for i in np.random.default_rng(seed).permutation(len(n_frames))]
    if bucket_width:
        buckets: dict[int, list[int]] = {}
        for i in order:
            buckets.setdefault(int(n_frames[i]) // bucket_width, []).append(i)
        groups = [buckets[k] for k in sorted(buckets)]
    else:
        groups = [order]
    return [g[i:i + batch_size] for g in groups for i in range(0, len(g), batch_size)]


def make_batches(utterances: Sequence[Utterance], batch_size: int = 16, seed: int = 0,
                 bucket_width: int | None = 64) -> list[ClipBatch]:
    """Shuffle, group by mel length (``bucket_width`` frames per bucket) and pad.

    Buckets are emitted shortest first and batches within a bucket keep the
    shuffled order, so the result depends only on the inputs and ``seed``.
    ``bucket_width=None`` turns bucketing off.
    """
    plan = batch_plan([u.n_frames for u in utterances], batch_size, seed, bucket_width)
    return [collate([utterances[i] for i in idx]) for idx in plan]


# ---------------------------------------------------------------- duration targets

def uniform_duration_targets(n_phonemes: int, mel_frames: int) -> np.ndarray:
    """Split ``mel_frames`` as evenly as possible; earlier phonemes take the remainder."""
    if n_phonemes < 1:
        raise ValueError("need at least one phoneme")
    if mel_frames < n_phonemes:
        raise TooShort(f"{mel_frames} frames cannot cover {n_phonemes} phonemes")
    base, extra = divmod(mel_frames, n_phonemes)
    out = np.full(n_phonemes, base, dtype=np.int64)
    out[:extra] += 1
    return out


# ---------------------------------------------------------------- toy corpus

@dataclass(frozen=True)
class ToyCorpusSpec:
    """Utterances built from pure tones, one frequency per phoneme."""

    n_phonemes: int = 8
    length_range: tuple[int, int] = (3, 10)
    duration_range: tuple[int, int] = (2, 6)
    freq_range: tuple[float, float] = (200.0, 1800.0)
    amplitude: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_phonemes <= len(BUILTIN_SYMBOLS):
            raise ValueError(f"n_phonemes must be in [1, {len(BUILTIN_SYMBOLS)}]")
        if not 1 <= self.length_range[0] <= self.length_range[1]:
            raise ValueError("bad length_range")
        if not 1 <= self.duration_range[0] <= self.duration_range[1]:
            raise ValueError("bad duration_range")

    @property
    def symbols(self) -> tuple[str, ...]:
        return BUILTIN_SYMBOLS[:self.n_phonemes]

    @property
    def frequencies(self) -> np.ndarray:
        if self.n_phonemes == 1:
            return np.array([self.freq_range[0]])
        return np.linspace(*self.freq_range, self.n_phonemes)


def synthesize_tones(phonemes: Sequence[int], durations: Sequence[int], spec: ToyCorpusSpec,
                     cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Phase-continuous tone sequence whose STFT has exactly ``sum(durations)`` frames.

    Phoneme i covers ``durations[i] * hop`` samples; the ``win - hop`` extra
    samples needed by unpadded framing are split between the two ends, so
    frame t is centred on the t-th hop of the tone stream.
    """
    hop, win = cfg.hop_length, cfg.win_length
    lead = (win - hop) // 2
    tail = win - hop - lead
    lengths = [int(d) * hop for d in durations]
    lengths[0] += lead
    lengths[-1] += tail
    freqs = spec.frequencies[np.asarray(phonemes)]
    inst = np.repeat(freqs, lengths)
    phase = 2 * np.pi * np.cumsum(inst) / cfg.sample_rate
    return spec.amplitude * np.sin(phase - phase[0])


def gen_toy_corpus(spec: ToyCorpusSpec, n_utterances: int, cfg: StftConfig = StftConfig(),
                   keep_audio: bool = False) -> list[Utterance]:
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    inventory = build_inventory()
    fb = mel_filterbank(cfg)
    rng = np.random.default_rng(spec.seed)
    sym_ids = np.array([inventory.index(s) for s in spec.symbols])
    out = []
    for i in range(n_utterances):
        n = int(rng.integers(spec.length_range[0], spec.length_range[1] + 1))
        phones = rng.integers(0, spec.n_phonemes, size=n)
        durs = rng.integers(spec.duration_range[0], spec.duration_range[1] + 1, size=n)
        samples = synthesize_tones(phones, durs, spec, cfg)
        mel = mel_spectrogram(samples, cfg, fb)
        text = " ".join(spec.symbols[p] for p in phones)
        seq = PhonemeSequence(sym_ids[phones], durs, source_text=text)
        out.append(Utterance(f"toy-{i:05d}", seq, mel, durs, text=text,
                             wav=Waveform(samples, cfg.sample_rate) if keep_audio else None))
    return out


def toy_band_of(freq: float, cfg: StftConfig = StftConfig()) -> int:
    """Mel band with the strongest response to a pure tone at ``freq``."""
    probe = np.sin(2 * np.pi * freq * np.arange(cfg.win_length) / cfg.sample_rate)
    return int(mel_spectrogram(probe, cfg)[0].argmax())


def export_corpus(utterances: Sequence[Utterance], root) -> None:
    """Write ``metadata.csv`` plus ``wavs/<id>.wav`` in the LJSpeech layout."""
    root = Path(root)
    (root / "wavs").mkdir(parents=True, exist_ok=True)
    with open(root / "metadata.csv", "w", encoding="utf-8", newline="") as fh:
        for u in utterances:
            fh.write(f"{u.id}|{u.text}|{u.text}\n")
            if u.wav is not None:
                wav_write(root / "wavs" / f"{u.id}.wav", u.wav)


# ---------------------------------------------------------------- LJSpeech

@dataclass
class CorpusManifest:
    root: Path
    entries: list[tuple[str, str]]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def wav_path(self, utt_id: str) -> Path:
        return self.root / "wavs" / f"{utt_id}.wav"

    def split(self, val_fraction: float = 0.05, seed: int = 0):
        order = np.random.default_rng(seed).permutation(len(self.entries))
        n_val = int(round(val_fraction * len(self.entries)))
        val = [self.entries[i] for i in sorted(order[:n_val])]
        train = [self.entries[i] for i in sorted(order[n_val:])]
        return train, val


def load_ljspeech(root) -> CorpusManifest:
    """Parse ``metadata.csv`` (``id|transcript[|normalized]``).

    Entries whose wav file is missing are reported in ``skipped`` instead of
    failing the whole corpus.
    """
    root = Path(root)
    meta = root / "metadata.csv"
    if not meta.is_file():
        raise ManifestError(f"missing metadata file: {meta}")
    entries: list[tuple[str, str]] = []
    skipped: list[str] = []
    seen: set[str] = set()
    with open(meta, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="|", quoting=csv.QUOTE_NONE), 1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise ManifestError(f"{meta}:{lineno}: expected 'id|transcript[|normalized]'")
            utt_id = row[0].strip()
            text = row[2] if len(row) >= 3 and row[2].strip() else row[1]
            if utt_id in seen:
                raise ManifestError(f"{meta}:{lineno}: duplicate id {utt_id!r}")
            seen.add(utt_id)
            if not (root / "wavs" / f"{utt_id}.wav").is_file():
                skipped.append(utt_id)
                continue
            entries.append((utt_id, text))
    if not entries and not skipped:
        warnings.warn(f"{meta} lists no utterances", stacklevel=2)
    if skipped:
        logger.warning("%d utterance(s) skipped for missing audio", len(skipped))
    return CorpusManifest(root, entries, skipped)


def ljspeech_utterances(manifest: CorpusManifest, inventory: PhonemeInventory,
                        lexicon: Lexicon | None = None,
                        cfg: StftConfig = StftConfig()) -> list[Utterance]:
    """Mel features and uniform-split duration targets for every manifest entry."""
    fb = mel_filterbank(cfg)
    out = []
    for utt_id, text in manifest.entries:
        wav = wav_read(manifest.wav_path(utt_id))
        mel = mel_spectrogram(wav, cfg, fb)
        seq = text_to_phonemes(text, inventory, lexicon)
        durs = uniform_duration_targets(len(seq), mel.shape[0])
        out.append(Utterance(utt_id, seq, mel, durs, text=text))
    return out


# ---------------------------------------------------------------- feature cache

def save_cache(path, utterances: Sequence[Utterance]) -> None:
    tensors: dict[str, np.ndarray] = {}
    for u in utterances:
        tensors[f"mel/{u.id}"] = u.mel
        tensors[f"dur/{u.id}"] = u.gt_durations.astype(np.float32)
        tensors[f"phn/{u.id}"] = u.phonemes.ids.astype(np.float32)
    checkpoint.save(path, tensors)


def load_cache(path, texts: dict[str, str] | None = None) -> list[Utterance]:
    tensors = checkpoint.load(path)
    ids = [k[4:] for k in tensors if k.startswith("mel/")]
    out = []
    for utt_id in ids:
        try:
            durs = tensors[f"dur/{utt_id}"].astype(np.int64)
            phn = tensors[f"phn/{utt_id}"].astype(np.int64)
        except KeyError as exc:
            raise ManifestError(f"cache {path} lacks {exc.args[0]}") from None
        text = (texts or {}).get(utt_id, "")
        out.append(Utterance(utt_id, PhonemeSequence(phn, durs, text), tensors[f"mel/{utt_id}"],
                             durs, text=text))
    return out
