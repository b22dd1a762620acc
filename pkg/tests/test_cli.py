import numpy as np
import pytest

from cliptts import checkpoint, cli
from cliptts.errors import NonFiniteGradient

TINY = ["--set", "model.d_model=16", "--set", "model.ffn_hidden=32", "--set", "model.dp_hidden=16",
        "--set", "model.n_blocks=1", "--set", "train.batch_size=4", "--set", "train.checkpoint_every=2",
        "--set", "vocoder.iters=3", "--set", "train.warmup_steps=10"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["prepare", "--corpus", "toy", "--out", str(root / "data"), "--n", "6",
                     "--seed", "1"]) == 0
    assert cli.main(["train-clip", "--cache", str(root / "data"), "--out-dir", str(root / "clip"),
                     "--steps", "2", *TINY]) == 0
    assert cli.main(["train-tts", "--cache", str(root / "data"), "--out-dir", str(root / "tts"),
                     "--steps", "2", "--init-from", str(root / "clip" / "ckpt-0000002.spcl"),
                     *TINY]) == 0
    return root


def test_prepare_deterministic_and_complete(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["prepare", "--corpus", "toy", "--out", str(tmp_path / name),
                         "--n", "5", "--seed", "1"]) == 0
    a = (tmp_path / "a" / "cache.spcl").read_bytes()
    assert a == (tmp_path / "b" / "cache.spcl").read_bytes()
    ids = [ln.split("\t")[0] for ln in (tmp_path / "a" / "manifest.tsv").read_text().splitlines()]
    keys = set(checkpoint.load(tmp_path / "a" / "cache.spcl"))
    assert all(f"mel/{i}" in keys and f"dur/{i}" in keys for i in ids) and len(ids) == 5
    assert "prepared 5 utterances" in capsys.readouterr().out


def test_prepare_ljspeech_errors(tmp_path, capsys):
    assert cli.main(["prepare", "--corpus", "ljspeech", "--root", str(tmp_path),
                     "--out", str(tmp_path / "o")]) == 2
    assert "metadata.csv" in capsys.readouterr().err
    assert cli.main(["prepare", "--corpus", "ljspeech", "--out", str(tmp_path / "o")]) == 4


def test_usage_and_config_errors(tmp_path):
    assert cli.main(["frobnicate"]) == 4
    assert cli.main(["prepare", "--corpus", "toy", "--out", str(tmp_path),
                     "--set", "model.nope=1"]) == 2
    assert cli.main(["prepare", "--corpus", "toy", "--out", str(tmp_path),
                     "--config", str(tmp_path / "missing.txt")]) == 2


def test_steps_zero_writes_init_only(workspace, tmp_path):
    assert cli.main(["train-clip", "--cache", str(workspace / "data"), "--out-dir",
                     str(tmp_path / "run"), "--steps", "0", *TINY]) == 0
    ckpts = sorted(p.name for p in (tmp_path / "run").glob("*.spcl"))
    assert ckpts == ["ckpt-0000000.spcl"]
    echoed = (tmp_path / "run" / "config.txt").read_text()
    assert "train.batch_size = 4" in echoed and "model.d_model = 16" in echoed
    assert not (tmp_path / "run" / "run.lock").exists()


def test_default_batch_size_echoed(workspace, tmp_path):
    assert cli.main(["train-clip", "--cache", str(workspace / "data"), "--out-dir",
                     str(tmp_path / "run"), "--steps", "0", "--set", "model.d_model=16",
                     "--set", "model.ffn_hidden=32", "--set", "model.dp_hidden=16",
                     "--set", "model.n_blocks=1"]) == 0
    assert "train.batch_size = 16" in (tmp_path / "run" / "config.txt").read_text()


def test_training_outputs(workspace):
    clip = workspace / "clip"
    assert {p.name for p in clip.glob("ckpt-*.spcl")} == {"ckpt-0000000.spcl", "ckpt-0000002.spcl"}
    rows = (clip / "metrics.tsv").read_text().splitlines()
    assert rows[0].startswith("1\t") and rows[-1].startswith("2\t")
    assert (workspace / "tts" / "inventory.txt").exists()


def test_resume_continues(workspace, tmp_path):
    import shutil
    run = tmp_path / "clip"
    shutil.copytree(workspace / "clip", run)
    assert cli.main(["train-clip", "--cache", str(workspace / "data"), "--out-dir", str(run),
                     "--steps", "4", *TINY]) == 0
    assert (run / "ckpt-0000004.spcl").exists()
    steps = [int(ln.split("\t")[0]) for ln in (run / "metrics.tsv").read_text().splitlines()]
    assert steps == sorted(steps) and steps[-1] == 4


def test_locked_run_dir(workspace, tmp_path):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "run.lock").write_text("123\n")
    assert cli.main(["train-clip", "--cache", str(workspace / "data"), "--out-dir",
                     str(tmp_path / "run"), "--steps", "1", *TINY]) == 2


def test_nonfinite_exit_code(workspace, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NonFiniteGradient("loss is nan")

    monkeypatch.setattr(cli, "train_clip_step", boom)
    assert cli.main(["train-clip", "--cache", str(workspace / "data"), "--out-dir",
                     str(tmp_path / "run"), "--steps", "3", *TINY]) == 3
    assert (tmp_path / "run" / "diagnostic-0000001.spcl").exists()


def test_tts_init_from_wrong_checkpoint(workspace, tmp_path):
    tts_ckpt = workspace / "tts" / "ckpt-0000002.spcl"
    bad = tmp_path / "bad.spcl"
    state = checkpoint.load(tts_ckpt)
    checkpoint.save(bad, {k: v for k, v in state.items() if not k.startswith("text_encoder.")})
    assert cli.main(["train-tts", "--cache", str(workspace / "data"), "--out-dir",
                     str(tmp_path / "run"), "--steps", "1", "--init-from", str(bad), *TINY]) == 2


def test_synth(workspace, tmp_path, capsys):
    ckpt = str(workspace / "tts" / "ckpt-0000002.spcl")
    for name in ("a", "b"):
        assert cli.main(["synth", "--ckpt", ckpt, "--text", "A B C", "--out",
                         str(tmp_path / f"{name}.wav"), "--dump-mel", str(tmp_path / f"{name}.spcl")]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()
    mel = checkpoint.load(tmp_path / "a.spcl")["mel"]
    assert mel.ndim == 2 and mel.shape[1] == 80
    assert "vocoder" in capsys.readouterr().out


def test_synth_errors(workspace, tmp_path):
    ckpt = str(workspace / "tts" / "ckpt-0000002.spcl")
    assert cli.main(["synth", "--ckpt", ckpt, "--text", "", "--out", str(tmp_path / "x.wav")]) == 4
    assert cli.main(["synth", "--ckpt", ckpt, "--text", " ?! ", "--out", str(tmp_path / "x.wav")]) == 4
    clip = str(workspace / "clip" / "ckpt-0000002.spcl")
    assert cli.main(["synth", "--ckpt", clip, "--text", "AB", "--out", str(tmp_path / "x.wav")]) == 2
    assert cli.main(["synth", "--ckpt", str(tmp_path / "none.spcl"), "--text", "AB",
                     "--out", str(tmp_path / "x.wav")]) == 2


def test_eval_modes(workspace, tmp_path, capsys):
    tts = str(workspace / "tts" / "ckpt-0000002.spcl")
    clip = str(workspace / "clip" / "ckpt-0000002.spcl")
    data = str(workspace / "data")
    outs = []
    for _ in range(2):
        assert cli.main(["eval", "--ckpt", tts, "--cache", data, "--mode", "tts",
                         "--metrics", str(tmp_path / "m.tsv")]) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] and "mel_mae" in outs[0]
    assert cli.main(["eval", "--ckpt", clip, "--cache", data, "--mode", "retrieval",
                     "--metrics", str(tmp_path / "m.tsv")]) == 0
    assert "text_to_mel_top1" in capsys.readouterr().out
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert any("eval_retrieval/mel_to_text_top1" in ln for ln in lines)
    assert cli.main(["eval", "--ckpt", tts, "--cache", data, "--mode", "retrieval"]) == 2
    assert cli.main(["eval", "--ckpt", clip, "--cache", data, "--mode", "tts"]) == 2


def test_eval_empty_cache(workspace, tmp_path):
    checkpoint.save(tmp_path / "cache.spcl", {})
    tts = str(workspace / "tts" / "ckpt-0000002.spcl")
    assert cli.main(["eval", "--ckpt", tts, "--cache", str(tmp_path), "--mode", "tts"]) == 2


def test_inventory_sidecar_roundtrip(tmp_path):
    from cliptts.text import build_inventory
    inv = build_inventory()
    cli.write_inventory(tmp_path / "inv.txt", inv)
    assert cli.read_inventory(tmp_path / "inv.txt") == inv
