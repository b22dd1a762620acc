"""Command-line entry point: ``cliptts {prepare,train-clip,train-tts,synth,eval}``.

Exit codes: 0 success, 2 input or config error, 3 numerical failure,
4 usage error (including empty text).
"""

from __future__ import annotations

import argparse
import shutil
import sys
import time
from pathlib import Path
from typing import Sequence

from . import checkpoint, config as config_mod
from .audio import wav_write
from .autodiff import Adam, LrSchedule
from .data import (gen_toy_corpus, ljspeech_utterances, load_cache, load_ljspeech, make_batches,
                   save_cache)
from .errors import (CheckpointMismatch, ClipTTSError, ConfigError, EmptyText, ManifestError,
                     NonFiniteGradient)
from .runner import CONFIG_NAME, LoopSettings, MetricsLog, RunLock, run_training
from .speech_clip import SpeechClip, retrieval_eval, train_clip_step
from .text import PhonemeInventory, build_inventory, read_lexicon
from .tts import (ClipTTS, GriffinLimVocoder, StageError, eval_tts, load_pretrained_text_encoder,
                  synthesize, train_tts_step)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 4
CACHE_NAME = "cache.spcl"
INVENTORY_NAME = "inventory.txt"
MANIFEST_NAME = "manifest.tsv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- shared helpers

def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config, args.set or ())
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be >= 0")
        cfg.train.steps = args.steps
    return cfg


def _inventory(cfg: config_mod.RunConfig):
    lexicon = read_lexicon(cfg.paths.lexicon) if cfg.paths.lexicon else None
    return build_inventory(lexicon), lexicon


def write_inventory(path: Path, inventory: PhonemeInventory) -> None:
    path.write_text("\n".join(inventory.symbols[2:]) + "\n", encoding="utf-8")


def read_inventory(path: Path) -> PhonemeInventory:
    return PhonemeInventory([s for s in path.read_text(encoding="utf-8").splitlines() if s])


def _cache_file(path: str | Path) -> Path:
    path = Path(path)
    return path / CACHE_NAME if path.is_dir() else path


def _load_utterances(cache: str | Path):
    if not cache:
        raise ConfigError("no feature cache given (use --cache or paths.cache)")
    path = _cache_file(cache)
    if not path.exists():
        raise ManifestError(f"feature cache {path} does not exist")
    utts = load_cache(path)
    if not utts:
        raise ManifestError(f"feature cache {path} is empty")
    return utts, path.parent


def _vocab_from_state(state: dict) -> int:
    for key in ("text_encoder.embedding",):
        if key in state:
            return int(state[key].shape[0])
    raise CheckpointMismatch("checkpoint has no text_encoder.embedding")


def _ckpt_kind(state: dict) -> str:
    if any(k.startswith("decoder.") for k in state):
        return "tts"
    if any(k.startswith("mel_encoder.") for k in state):
        return "clip"
    raise CheckpointMismatch("checkpoint holds neither a mel encoder nor a mel decoder")


def _run_config_for(ckpt: Path, args) -> config_mod.RunConfig:
    """Prefer the config echoed next to a checkpoint; flags still override."""
    echoed = ckpt.parent / CONFIG_NAME
    base = args.config if args.config else (echoed if echoed.exists() else None)
    return config_mod.load(base, args.set or ())


def _params_only(state: dict) -> dict:
    return {k: v for k, v in state.items() if "/" not in k}


def _build_clip(vocab: int, cfg: config_mod.RunConfig) -> SpeechClip:
    return SpeechClip(vocab, cfg.model_config(), cfg.train.loss, cfg.train.temperature)


def _settings(cfg: config_mod.RunConfig) -> LoopSettings:
    t = cfg.train
    return LoopSettings(t.steps, t.batch_size, t.seed, t.checkpoint_every, t.bucket_width,
                        t.log_flush_every, LrSchedule(cfg.model.d_model, t.warmup_steps, t.lr_scale))


def _prepare_run_dir(out_dir: Path, cfg: config_mod.RunConfig, cache_dir: Path) -> None:
    (out_dir / CONFIG_NAME).write_text(config_mod.dumps(cfg), encoding="utf-8")
    inv = cache_dir / INVENTORY_NAME
    if inv.exists():
        shutil.copyfile(inv, out_dir / INVENTORY_NAME)


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    stft = cfg.stft_config()
    out = Path(args.out)
    if args.corpus == "toy":
        if args.n is not None:
            cfg.toy.n_utterances = args.n
        if args.seed is not None:
            cfg.toy.seed = args.seed
        config_mod.validate(cfg)
        inventory = build_inventory()
        utts = gen_toy_corpus(cfg.toy_spec(), cfg.toy.n_utterances, stft)
    else:
        if not args.root:
            raise UsageError("prepare --corpus ljspeech needs --root")
        manifest = load_ljspeech(args.root)
        for utt_id in manifest.skipped:
            _say(f"skipped {utt_id}: missing {manifest.wav_path(utt_id)}")
        inventory, lexicon = _inventory(cfg)
        utts = ljspeech_utterances(manifest, inventory, lexicon, stft)
    out.mkdir(parents=True, exist_ok=True)
    save_cache(out / CACHE_NAME, utts)
    write_inventory(out / INVENTORY_NAME, inventory)
    with open(out / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(f"{u.id}\t{u.n_frames}\t{u.text}\n")
    (out / CONFIG_NAME).write_text(config_mod.dumps(cfg), encoding="utf-8")
    total = sum(u.n_frames for u in utts)
    _say(f"prepared {len(utts)} utterances, {total} frames -> {out / CACHE_NAME}")
    return EXIT_OK


def _train(args, kind: str) -> int:
    cfg = _load_config(args)
    cache = args.cache or cfg.paths.cache
    utts, cache_dir = _load_utterances(cache)
    cfg.paths.cache = str(_cache_file(cache))
    vocab = max(len(read_inventory(cache_dir / INVENTORY_NAME))
                if (cache_dir / INVENTORY_NAME).exists() else 0,
                max(int(u.phonemes.ids.max()) for u in utts) + 1)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = cfg.train

    if kind == "clip":
        model = _build_clip(vocab, cfg).initialize(t.seed)
        opt = Adam(model.parameters(), t.beta1, t.beta2, t.eps)

        def step_fn(batch, opt, lr, rng):
            return train_clip_step(batch, model, opt, lr, t.lambda_dur, rng)
    else:
        model = ClipTTS(vocab, cfg.model_config()).initialize(t.seed)
        if args.init_from:
            load_pretrained_text_encoder(args.init_from, model)
            _say(f"text encoder initialised from {args.init_from}")
        else:
            _say("no --init-from given; training the text encoder from scratch")
        opt = Adam(model.trainable_parameters(t.freeze_encoder), t.beta1, t.beta2, t.eps)

        def step_fn(batch, opt, lr, rng):
            return train_tts_step(batch, model, opt, lr, t.lambda_dur, rng)

    with RunLock(out_dir):
        _prepare_run_dir(out_dir, cfg, cache_dir)
        t0 = time.perf_counter()
        step = run_training(model, opt, utts, step_fn, _settings(cfg), out_dir, _say)
    _say(f"done: step {step} in {time.perf_counter() - t0:.1f}s -> {out_dir}")
    return EXIT_OK


def cmd_train_clip(args) -> int:
    return _train(args, "clip")


def cmd_train_tts(args) -> int:
    return _train(args, "tts")


def cmd_synth(args) -> int:
    if not args.text or not args.text.strip():
        raise EmptyText("--text is empty")
    ckpt = Path(args.ckpt)
    state = checkpoint.load(ckpt)
    if _ckpt_kind(state) != "tts":
        raise CheckpointMismatch(f"{ckpt} is not a TTS checkpoint")
    cfg = _run_config_for(ckpt, args)
    inv_path = ckpt.parent / INVENTORY_NAME
    inventory = read_inventory(inv_path) if inv_path.exists() else _inventory(cfg)[0]
    lexicon = read_lexicon(cfg.paths.lexicon) if cfg.paths.lexicon else None
    model = ClipTTS(_vocab_from_state(state), cfg.model_config())
    model.load_state_dict(_params_only(state))
    seed = cfg.vocoder.seed if args.seed is None else args.seed
    vocoder = GriffinLimVocoder(cfg.stft_config(), cfg.model.n_mels, iters=cfg.vocoder.iters,
                                seed=seed)
    result = synthesize(args.text, model, inventory, vocoder, lexicon)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wav_write(out, result.wav)
    if args.dump_mel:
        checkpoint.save(args.dump_mel, {"mel": result.mel})
    for stage, secs in result.timings.items():
        _say(f"{stage:>12s}: {secs * 1000:8.1f} ms")
    _say(f"wrote {out} ({result.mel.shape[0]} frames, {len(result.wav.samples)} samples)")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    state = checkpoint.load(ckpt)
    kind = _ckpt_kind(state)
    wanted = "clip" if args.mode == "retrieval" else "tts"
    if kind != wanted:
        raise CheckpointMismatch(f"--mode {args.mode} needs a {wanted} checkpoint, "
                                 f"{ckpt} is a {kind} checkpoint")
    cfg = _run_config_for(ckpt, args)
    utts, _ = _load_utterances(args.cache or cfg.paths.cache)
    vocab = _vocab_from_state(state)
    if max(int(u.phonemes.ids.max()) for u in utts) >= vocab:
        raise CheckpointMismatch("cache uses phoneme ids beyond the checkpoint's vocabulary")
    if kind == "clip":
        model = _build_clip(vocab, cfg)
        model.load_state_dict(_params_only(state))
        batches = make_batches(utts, cfg.train.batch_size, cfg.train.seed,
                               cfg.train.bucket_width or None)
        metrics = retrieval_eval(batches, model)
    else:
        model = ClipTTS(vocab, cfg.model_config())
        model.load_state_dict(_params_only(state))
        metrics = eval_tts(utts, model)
    step = int(state["meta/step"]) if "meta/step" in state else 0
    metrics_path = Path(args.metrics) if args.metrics else ckpt.parent / "eval.tsv"
    with MetricsLog(metrics_path, flush_every=1) as log:
        log.write(step, {f"eval_{args.mode}/{k}": float(v) for k, v in metrics.items()})
    for k, v in metrics.items():
        _say(f"{k}\t{v:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cliptts", description="Contrastive text/mel pretraining and TTS.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("prepare", help="build a mel/duration feature cache")
    common(sp)
    sp.add_argument("--corpus", choices=("ljspeech", "toy"), required=True)
    sp.add_argument("--root", help="LJSpeech-layout corpus root")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--n", type=int, help="toy corpus size")
    sp.add_argument("--seed", type=int, help="toy corpus seed")
    sp.set_defaults(func=cmd_prepare)

    for name, func, help_ in (("train-clip", cmd_train_clip, "contrastive pretraining"),
                              ("train-tts", cmd_train_tts, "TTS fine-tuning")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--cache", help="feature cache file or prepare output directory")
        sp.add_argument("--out-dir", required=True)
        sp.add_argument("--steps", type=int, help="override train.steps")
        if name == "train-tts":
            sp.add_argument("--init-from", help="contrastive checkpoint supplying the text encoder")
        sp.set_defaults(func=func)

    sp = sub.add_parser("synth", help="synthesize a wav from text")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--out", required=True, help="output wav path")
    sp.add_argument("--dump-mel", metavar="PATH", help="also write the mel to a container file")
    sp.add_argument("--seed", type=int, help="vocoder phase seed")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval", help="retrieval or TTS metrics")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--cache")
    sp.add_argument("--mode", choices=("retrieval", "tts"), required=True)
    sp.add_argument("--metrics", help="metrics TSV to append to (default: eval.tsv by the ckpt)")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, EmptyText) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteGradient as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, NonFiniteGradient) else EXIT_INPUT
    except (ClipTTSError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
