"""Resumable training loop: checkpoints, metrics log and run-directory lock.

A step's batch and dropout stream depend only on ``(seed, step)``, so a run
resumed from any checkpoint continues bitwise identically.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .autodiff import Adam, LrSchedule, Module
from .data import ClipBatch, Utterance, batch_plan, collate
from .errors import CheckpointMismatch, ClipTTSError, NonFiniteGradient

CKPT_RE = re.compile(r"^ckpt-(\d{7})\.spcl$")
LOCK_NAME = "run.lock"
METRICS_NAME = "metrics.tsv"
CONFIG_NAME = "config.txt"


class RunLocked(ClipTTSError):
    pass


class RunLock:
    """Exclusive ownership of a run directory via an ``O_EXCL`` lockfile."""

    def __init__(self, out_dir: Path) -> None:
        self.path = Path(out_dir) / LOCK_NAME

    def __enter__(self) -> "RunLock":
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"{self.path.parent} is in use by another run "
                            f"(remove {self.path} if that run is gone)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc) -> None:
        self.path.unlink(missing_ok=True)


class MetricsLog:
    """Append-only ``step<TAB>key<TAB>value`` lines, flushed every ``flush_every`` writes."""

    def __init__(self, path: Path, flush_every: int = 10) -> None:
        self.path = Path(path)
        self.flush_every = flush_every
        self._fh = open(self.path, "a", encoding="utf-8")
        self._pending = 0
        self.last_step = -1

    def write(self, step: int, metrics: dict[str, float]) -> None:
        if step < self.last_step:
            raise ValueError(f"metrics step went backwards: {step} < {self.last_step}")
        self.last_step = step
        for key, value in metrics.items():
            self._fh.write(f"{step}\t{key}\t{value!r}\n")
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        self._fh.flush()
        self._pending = 0

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _truncate_metrics(path: Path, step: int) -> None:
    """Drop lines logged after ``step`` (written past the last checkpoint)."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines(keepends=True)
            if int(ln.split("\t", 1)[0]) <= step]
    path.write_text("".join(keep), encoding="utf-8")


def read_metrics(path) -> list[tuple[int, str, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        step, key, value = line.split("\t")
        rows.append((int(step), key, float(value)))
    return rows


# ---------------------------------------------------------------- checkpoints

def training_state(model: Module, step: int) -> dict[str, np.ndarray]:
    """Parameters plus Adam moments and per-parameter step counts."""
    state = model.state_dict()
    for name, p in model.named_parameters():
        state[f"adam_m/{name}"] = p.adam_m
        state[f"adam_v/{name}"] = p.adam_v
        state[f"adam_t/{name}"] = np.array(p.step_count, dtype=np.float32)
    state["meta/step"] = np.array(step, dtype=np.float32)
    return state


def restore_training_state(model: Module, state: dict[str, np.ndarray]) -> int:
    """Load parameters and optimizer state; returns the step the checkpoint was taken at."""
    params = {k: v for k, v in state.items() if "/" not in k}
    model.load_state_dict(params, strict=True)
    for name, p in model.named_parameters():
        try:
            p.adam_m[...] = state[f"adam_m/{name}"]
            p.adam_v[...] = state[f"adam_v/{name}"]
            p.step_count = int(state[f"adam_t/{name}"])
        except KeyError as exc:
            raise CheckpointMismatch(f"checkpoint lacks optimizer state {exc.args[0]}") from None
    return int(state["meta/step"])


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return Path(out_dir) / f"ckpt-{step:07d}.spcl"


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted(p for p in Path(out_dir).glob("ckpt-*.spcl") if CKPT_RE.match(p.name))
    return found[-1] if found else None


# ---------------------------------------------------------------- loop

StepFn = Callable[[ClipBatch, Adam, float, np.random.Generator], dict[str, float]]


@dataclass
class LoopSettings:
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    checkpoint_every: int = 500
    bucket_width: int = 64
    log_flush_every: int = 10
    schedule: LrSchedule = LrSchedule()


class BatchStream:
    """Maps a 1-based step to a batch; epoch ``e`` is shuffled with ``seed + e``."""

    def __init__(self, utterances: Sequence[Utterance], batch_size: int, seed: int,
                 bucket_width: int) -> None:
        self.utterances = list(utterances)
        self.batch_size = batch_size
        self.seed = seed
        self.bucket_width = bucket_width or None
        self._frames = [u.n_frames for u in self.utterances]
        self._epoch_sizes: list[int] = []
        self._plan: tuple[int, list[list[int]]] | None = None

    def _plan_for(self, epoch: int) -> list[list[int]]:
        if self._plan is None or self._plan[0] != epoch:
            self._plan = (epoch, batch_plan(self._frames, self.batch_size, self.seed + epoch,
                                            self.bucket_width))
        return self._plan[1]

    def locate(self, step: int) -> tuple[int, int]:
        """``(epoch, batch index)`` of a step."""
        remaining, epoch = step - 1, 0
        while True:
            if epoch == len(self._epoch_sizes):
                self._epoch_sizes.append(len(self._plan_for(epoch)))
            if remaining < self._epoch_sizes[epoch]:
                return epoch, remaining
            remaining -= self._epoch_sizes[epoch]
            epoch += 1

    def __call__(self, step: int) -> ClipBatch:
        epoch, i = self.locate(step)
        return collate([self.utterances[j] for j in self._plan_for(epoch)[i]])


def run_training(model: Module, opt: Adam, utterances: Sequence[Utterance],
                 step_fn: StepFn, settings: LoopSettings, out_dir: Path,
                 log: Callable[[str], None] = lambda s: None) -> int:
    """Train to ``settings.steps``, resuming from the newest checkpoint in ``out_dir``.

    Returns the final step.  A non-finite loss writes
    ``diagnostic-<step>.spcl`` with the pre-step state and re-raises.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stream = BatchStream(utterances, settings.batch_size, settings.seed, settings.bucket_width)
    start = 0
    latest = latest_checkpoint(out_dir)
    if latest is not None:
        start = restore_training_state(model, checkpoint.load(latest))
        _truncate_metrics(out_dir / METRICS_NAME, start)
        log(f"resumed from {latest.name} at step {start}")
    if start == 0 and latest is None:
        checkpoint.save(checkpoint_path(out_dir, 0), training_state(model, 0))

    with MetricsLog(out_dir / METRICS_NAME, settings.log_flush_every) as metrics:
        for step in range(start + 1, settings.steps + 1):
            rng = np.random.default_rng([settings.seed, step])
            try:
                m = step_fn(stream(step), opt, settings.schedule(step), rng)
            except NonFiniteGradient:
                checkpoint.save(out_dir / f"diagnostic-{step:07d}.spcl",
                                training_state(model, step - 1))
                metrics.flush()
                raise
            metrics.write(step, m)
            if step % settings.checkpoint_every == 0 or step == settings.steps:
                metrics.flush()
                checkpoint.save(checkpoint_path(out_dir, step), training_state(model, step))
                log(f"step {step}: " + " ".join(f"{k}={v:.4g}" for k, v in m.items()))
    return max(start, settings.steps)
