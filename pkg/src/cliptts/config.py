"""Run configuration: dotted ``key = value`` files with range-checked values.

Every tunable default lives here.  Unknown keys and out-of-range values are
rejected at parse time, and :func:`dumps` writes the fully resolved config
back in the same format so a run can be reproduced from its echo.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

from .audio import StftConfig
from .blocks import ModelConfig
from .data import ToyCorpusSpec
from .errors import ConfigError


@dataclass
class ModelSection:
    d_model: int = 256
    n_heads: int = 2
    n_blocks: int = 4
    ffn_hidden: int = 1024
    ffn_kernel: int = 9
    ffn_kernel2: int = 1
    dropout: float = 0.1
    dp_kernel: int = 3
    dp_hidden: int = 256
    dp_dropout: float = 0.5
    dp_grad_scale: float = 0.0
    n_mels: int = 80
    decoder_causal: bool = True


@dataclass
class AudioSection:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256


@dataclass
class ToySection:
    n_utterances: int = 64
    n_phonemes: int = 8
    min_phonemes: int = 3
    max_phonemes: int = 10
    min_duration: int = 2
    max_duration: int = 6
    f_low: float = 200.0
    f_high: float = 1800.0
    amplitude: float = 0.5
    seed: int = 1


@dataclass
class TrainSection:
    seed: int = 0
    batch_size: int = 16
    steps: int = 2000
    checkpoint_every: int = 500
    log_flush_every: int = 10
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_dur: float = 1.0
    loss: str = "sim_mse"
    temperature: float = 0.07
    bucket_width: int = 64
    freeze_encoder: bool = False


@dataclass
class VocoderSection:
    iters: int = 60
    seed: int = 0


@dataclass
class PathsSection:
    cache: str = ""
    lexicon: str = ""


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    audio: AudioSection = field(default_factory=AudioSection)
    toy: ToySection = field(default_factory=ToySection)
    train: TrainSection = field(default_factory=TrainSection)
    vocoder: VocoderSection = field(default_factory=VocoderSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # ---- views used by the library
    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(m.d_model, m.n_heads, m.n_blocks, m.ffn_hidden,
                           (m.ffn_kernel, m.ffn_kernel2), m.dropout, m.dp_kernel, m.dp_hidden,
                           m.dp_dropout, m.dp_grad_scale, m.n_mels, m.decoder_causal)

    def stft_config(self) -> StftConfig:
        a = self.audio
        return StftConfig(a.sample_rate, a.n_fft, a.win_length, a.hop_length)

    def toy_spec(self) -> ToyCorpusSpec:
        t = self.toy
        return ToyCorpusSpec(t.n_phonemes, (t.min_phonemes, t.max_phonemes),
                             (t.min_duration, t.max_duration), (t.f_low, t.f_high),
                             t.amplitude, t.seed)

    def get(self, key: str) -> Any:
        section, name = _split_key(key)
        return getattr(getattr(self, section), name)

    def set(self, key: str, raw: str) -> None:
        section, name = _split_key(key)
        sec = getattr(self, section)
        ftype = {f.name: f.type for f in dataclasses.fields(sec)}[name]
        setattr(sec, name, _coerce(key, raw, ftype))


_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _split_key(key: str) -> tuple[str, str]:
    section, _, name = key.partition(".")
    if section not in _SECTIONS or not name:
        raise ConfigError(f"unknown config key {key!r}")
    names = {f.name for f in dataclasses.fields(_SECTIONS[section]())}
    if name not in names:
        raise ConfigError(f"unknown config key {key!r}")
    return section, name


def _coerce(key: str, raw: str, ftype) -> Any:
    raw = raw.strip()
    try:
        if ftype in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if ftype in (int, "int"):
            return int(raw)
        if ftype in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(ftype, '__name__', ftype)}") from None


def _pos(x) -> bool:
    return x > 0


def _nonneg(x) -> bool:
    return x >= 0


def _odd(x) -> bool:
    return x >= 1 and x % 2 == 1


def _unit_open(x) -> bool:
    return 0 <= x < 1


_CHECKS: dict[str, tuple[Callable[[Any], bool], str]] = {
    "model.d_model": (lambda x: x >= 2 and x % 2 == 0, "an even integer >= 2"),
    "model.n_heads": (_pos, "positive"),
    "model.n_blocks": (_pos, "positive"),
    "model.ffn_hidden": (_pos, "positive"),
    "model.ffn_kernel": (_odd, "an odd positive integer"),
    "model.ffn_kernel2": (_odd, "an odd positive integer"),
    "model.dropout": (_unit_open, "in [0, 1)"),
    "model.dp_kernel": (_odd, "an odd positive integer"),
    "model.dp_hidden": (_pos, "positive"),
    "model.dp_dropout": (_unit_open, "in [0, 1)"),
    "model.dp_grad_scale": (lambda x: 0 <= x <= 1, "in [0, 1]"),
    "model.n_mels": (_pos, "positive"),
    "audio.sample_rate": (_pos, "positive"),
    "audio.n_fft": (_pos, "positive"),
    "audio.win_length": (_pos, "positive"),
    "audio.hop_length": (_pos, "positive"),
    "toy.n_utterances": (_pos, "positive"),
    "toy.n_phonemes": (lambda x: 1 <= x <= 26, "in [1, 26]"),
    "toy.min_phonemes": (_pos, "positive"),
    "toy.max_phonemes": (_pos, "positive"),
    "toy.min_duration": (_pos, "positive"),
    "toy.max_duration": (_pos, "positive"),
    "toy.f_low": (_pos, "positive"),
    "toy.f_high": (_pos, "positive"),
    "toy.amplitude": (lambda x: 0 < x <= 1, "in (0, 1]"),
    "train.batch_size": (_pos, "positive"),
    "train.steps": (_nonneg, "nonnegative"),
    "train.checkpoint_every": (_pos, "positive"),
    "train.log_flush_every": (_pos, "positive"),
    "train.warmup_steps": (_pos, "positive"),
    "train.lr_scale": (_pos, "positive"),
    "train.beta1": (_unit_open, "in [0, 1)"),
    "train.beta2": (_unit_open, "in [0, 1)"),
    "train.eps": (_pos, "positive"),
    "train.lambda_dur": (_nonneg, "nonnegative"),
    "train.loss": (lambda x: x in ("sim_mse", "infonce"), "sim_mse or infonce"),
    "train.temperature": (_pos, "positive"),
    "train.bucket_width": (_nonneg, "nonnegative (0 disables bucketing)"),
    "vocoder.iters": (_pos, "positive"),
}


def validate(cfg: RunConfig) -> RunConfig:
    for key, (ok, what) in _CHECKS.items():
        value = cfg.get(key)
        if not ok(value):
            raise ConfigError(f"{key} = {value!r} must be {what}")
    m, a, t = cfg.model, cfg.audio, cfg.toy
    if m.d_model % m.n_heads:
        raise ConfigError(f"model.d_model {m.d_model} is not divisible by model.n_heads {m.n_heads}")
    if a.win_length > a.n_fft:
        raise ConfigError("audio.win_length must not exceed audio.n_fft")
    if a.sample_rate < 16000:
        raise ConfigError("audio.sample_rate must be >= 16000 (the mel bank spans 0-8000 Hz)")
    if t.min_phonemes > t.max_phonemes or t.min_duration > t.max_duration:
        raise ConfigError("toy ranges must satisfy min <= max")
    if not t.f_low < t.f_high:
        raise ConfigError("toy.f_low must be below toy.f_high")
    return cfg


def parse(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return validate(cfg)


def load(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse(text, str(path), cfg)
    if overrides:
        cfg = parse("\n".join(overrides), "<override>", cfg)
    return validate(cfg)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        section = getattr(cfg, sec.name)
        lines.append(f"# {sec.name}")
        for f in dataclasses.fields(section):
            lines.append(f"{sec.name}.{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)
