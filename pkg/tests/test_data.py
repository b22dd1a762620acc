import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cliptts import checkpoint
from cliptts.audio import MEL_FLOOR_VALUE, StftConfig, stft
from cliptts.data import (ToyCorpusSpec, Utterance, batch_plan, collate, export_corpus, gen_toy_corpus,
                          ljspeech_utterances, load_cache, load_ljspeech, make_batches, save_cache,
                          synthesize_tones, toy_band_of, uniform_duration_targets)
from cliptts.errors import DurationMismatch, ManifestError, TooShort
from cliptts.text import PAD_ID, PhonemeSequence, build_inventory


def fake_utt(i, n_frames, n_phones=2):
    durs = uniform_duration_targets(n_phones, n_frames)
    return Utterance(f"u{i}", PhonemeSequence(np.arange(2, 2 + n_phones)),
                     np.zeros((n_frames, 80)), durs)


# ---------------------------------------------------------------- duration targets

def test_uniform_duration_examples():
    np.testing.assert_array_equal(uniform_duration_targets(3, 9), [3, 3, 3])
    np.testing.assert_array_equal(uniform_duration_targets(3, 10), [4, 3, 3])
    np.testing.assert_array_equal(uniform_duration_targets(1, 7), [7])
    with pytest.raises(TooShort):
        uniform_duration_targets(4, 3)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 50), extra=st.integers(0, 500))
def test_uniform_duration_properties(n, extra):
    d = uniform_duration_targets(n, n + extra)
    assert d.sum() == n + extra and d.min() >= 1 and d.max() - d.min() <= 1
    assert np.all(np.diff(d) <= 0)


def test_utterance_gate():
    with pytest.raises(DurationMismatch):
        Utterance("x", PhonemeSequence([2, 3]), np.zeros((5, 80)), [2, 2])
    with pytest.raises(DurationMismatch):
        Utterance("x", PhonemeSequence([2, 3]), np.zeros((5, 80)), [5])
    with pytest.raises(DurationMismatch):
        Utterance("x", PhonemeSequence([2, 3]), np.zeros((5, 80)), [5, 0])


# ---------------------------------------------------------------- batching

def test_batch_sizes_33_at_16():
    utts = [fake_utt(i, 20) for i in range(33)]
    assert [len(b) for b in make_batches(utts, 16)] == [16, 16, 1]


def test_equal_length_batch_has_full_masks():
    batch = collate([fake_utt(i, 12) for i in range(4)])
    assert batch.mel_valid.all() and batch.phone_valid.all()


def test_collate_pads_with_floor_and_pad_id():
    batch = collate([fake_utt(0, 10, 2), fake_utt(1, 4, 1)])
    assert batch.ids.shape == (2, 2) and batch.ids[1, 1] == PAD_ID
    assert np.all(batch.mels[1, 4:] == MEL_FLOOR_VALUE)
    np.testing.assert_array_equal(batch.mel_valid.sum(1), [10, 4])
    with pytest.raises(ValueError):
        collate([])


@settings(max_examples=50, deadline=None)
@given(lengths=st.lists(st.integers(2, 300), min_size=1, max_size=60),
       bs=st.integers(1, 20), seed=st.integers(0, 100))
def test_batch_plan_partition_and_purity(lengths, bs, seed):
    plan = batch_plan(lengths, bs, seed)
    flat = sorted(i for b in plan for i in b)
    assert flat == list(range(len(lengths)))
    assert all(1 <= len(b) <= bs for b in plan)
    assert all(len({lengths[i] // 64 for i in b}) == 1 for b in plan)
    assert plan == batch_plan(lengths, bs, seed)


def test_bucketing_can_be_disabled():
    lengths = [10, 200, 10, 200]
    plan = batch_plan(lengths, 4, seed=0, bucket_width=None)
    assert len(plan) == 1 and sorted(plan[0]) == [0, 1, 2, 3]


# ---------------------------------------------------------------- toy corpus

def test_toy_corpus_invariants():
    spec = ToyCorpusSpec(seed=4)
    utts = gen_toy_corpus(spec, 12, keep_audio=True)
    again = gen_toy_corpus(spec, 12, keep_audio=True)
    cfg = StftConfig()
    for u, v in zip(utts, again):
        assert int(u.gt_durations.sum()) == u.n_frames
        assert stft(u.wav.samples, cfg).shape[0] == u.n_frames
        assert 3 <= len(u.phonemes) <= 10
        assert u.gt_durations.min() >= 2 and u.gt_durations.max() <= 6
        assert u.id == v.id and u.wav.samples.tobytes() == v.wav.samples.tobytes()
        np.testing.assert_array_equal(u.gt_durations, v.gt_durations)
    assert len(set(spec.frequencies)) == spec.n_phonemes


def test_toy_frequencies_have_distinct_bands():
    spec = ToyCorpusSpec()
    bands = [toy_band_of(f) for f in spec.frequencies]
    assert len(set(bands)) == spec.n_phonemes


def test_toy_segment_oracle_recovers_phonemes():
    spec = ToyCorpusSpec(seed=5)
    inv = build_inventory()
    bands = np.array([toy_band_of(f) for f in spec.frequencies])
    sym_ids = np.array([inv.index(s) for s in spec.symbols])
    correct = total = 0
    for u in gen_toy_corpus(spec, 40):
        starts = np.concatenate([[0], np.cumsum(u.gt_durations)[:-1]])
        for start, d, pid in zip(starts, u.gt_durations, u.phonemes.ids):
            peak = u.mel[start:start + d].mean(axis=0).argmax()
            guess = sym_ids[np.argmin(np.abs(bands - peak))]
            correct += guess == pid
            total += 1
    assert correct == total


def test_distinct_phonemes_distinct_segment_peaks():
    spec = ToyCorpusSpec()
    samples = synthesize_tones([0, 7], [6, 6], spec)
    from cliptts.audio import mel_spectrogram
    mel = mel_spectrogram(samples)
    assert mel.shape[0] == 12
    assert mel[:6].mean(0).argmax() != mel[6:].mean(0).argmax()


def test_toy_spec_validation():
    with pytest.raises(ValueError):
        ToyCorpusSpec(n_phonemes=0)
    with pytest.raises(ValueError):
        ToyCorpusSpec(duration_range=(0, 3))
    with pytest.raises(ValueError):
        gen_toy_corpus(ToyCorpusSpec(), 0)


# ---------------------------------------------------------------- LJSpeech layout

def test_ljspeech_roundtrip_via_export(tmp_path):
    utts = gen_toy_corpus(ToyCorpusSpec(seed=6), 3, keep_audio=True)
    export_corpus(utts, tmp_path)
    (tmp_path / "metadata.csv").open("a").write("LJ-missing|text|text.\n")
    manifest = load_ljspeech(tmp_path)
    assert [e[0] for e in manifest.entries] == [u.id for u in utts]
    assert manifest.skipped == ["LJ-missing"]
    rebuilt = ljspeech_utterances(manifest, build_inventory())
    for u, r in zip(utts, rebuilt):
        np.testing.assert_array_equal(r.phonemes.ids, u.phonemes.ids)
        assert r.n_frames == u.n_frames
        # 16-bit quantisation lifts the quiet bins; energetic bins survive
        loud = u.mel > -3.0
        np.testing.assert_allclose(r.mel[loud], u.mel[loud], atol=2e-2)
        np.testing.assert_array_equal(r.mel.argmax(1), u.mel.argmax(1))


def test_ljspeech_field_selection(tmp_path):
    (tmp_path / "wavs").mkdir()
    (tmp_path / "wavs" / "LJ001-0001.wav").write_bytes(b"")
    (tmp_path / "wavs" / "LJ001-0002.wav").write_bytes(b"")
    (tmp_path / "metadata.csv").write_text("LJ001-0001|text|text.\nLJ001-0002|raw only\n")
    m = load_ljspeech(tmp_path)
    assert m.entries == [("LJ001-0001", "text."), ("LJ001-0002", "raw only")]


def test_ljspeech_errors(tmp_path):
    with pytest.raises(ManifestError, match="metadata.csv"):
        load_ljspeech(tmp_path)
    (tmp_path / "metadata.csv").write_text("a|b\nonlyone\n")
    with pytest.raises(ManifestError, match=":2:"):
        load_ljspeech(tmp_path)
    (tmp_path / "metadata.csv").write_text("")
    with pytest.warns(UserWarning):
        assert len(load_ljspeech(tmp_path)) == 0
    (tmp_path / "metadata.csv").write_text("a|x\na|y\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_ljspeech(tmp_path)


def test_manifest_split_is_seeded(tmp_path):
    (tmp_path / "wavs").mkdir()
    lines = []
    for i in range(20):
        (tmp_path / "wavs" / f"u{i}.wav").write_bytes(b"")
        lines.append(f"u{i}|t")
    (tmp_path / "metadata.csv").write_text("\n".join(lines))
    m = load_ljspeech(tmp_path)
    train, val = m.split(0.25, seed=3)
    assert len(val) == 5 and len(train) == 15
    assert (train, val) == m.split(0.25, seed=3)


# ---------------------------------------------------------------- cache

def test_cache_roundtrip(tmp_path):
    utts = gen_toy_corpus(ToyCorpusSpec(seed=7), 5)
    save_cache(tmp_path / "c.spcl", utts)
    back = load_cache(tmp_path / "c.spcl")
    assert [u.id for u in back] == [u.id for u in utts]
    for u, b in zip(utts, back):
        assert u.mel.tobytes() == b.mel.tobytes()
        np.testing.assert_array_equal(u.gt_durations, b.gt_durations)
        np.testing.assert_array_equal(u.phonemes.ids, b.phonemes.ids)
    tensors = checkpoint.load(tmp_path / "c.spcl")
    del tensors[f"dur/{utts[0].id}"]
    checkpoint.save(tmp_path / "bad.spcl", tensors)
    with pytest.raises(ManifestError):
        load_cache(tmp_path / "bad.spcl")
