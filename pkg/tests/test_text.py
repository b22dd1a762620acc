import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cliptts.errors import EmptyText, InvalidDim, InventoryError
from cliptts.text import (PAD_ID, UNK_ID, Lexicon, PhonemeInventory, PhonemeSequence,
                          build_inventory, positional_encoding, read_lexicon, text_to_phonemes)


@pytest.fixture
def lexicon_file(tmp_path):
    path = tmp_path / "lex.tsv"
    path.write_text("# comment\nCAB\tK AA B\n\nBAD\tB AA D\nCAB\tZZ\n", encoding="utf-8")
    return path


def test_empty_lexicon_inventory(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    inv = build_inventory(path)
    assert len(inv) == 2
    assert inv.symbols == ("<pad>", "<unk>")


def test_inventory_sorted_and_stable(lexicon_file):
    inv = build_inventory(lexicon_file)
    assert inv.symbols == ("<pad>", "<unk>", "AA", "B", "D", "K")
    assert build_inventory(lexicon_file) == inv
    assert inv.index("AA") == 2 and inv.index("nope") == UNK_ID


def test_two_phoneme_lexicon(tmp_path):
    path = tmp_path / "two.tsv"
    path.write_text("X\tB AA\n", encoding="utf-8")
    inv = build_inventory(path)
    assert len(inv) == 4 and inv.index("AA") == 2 and inv.index("B") == 3


def test_inventory_errors(tmp_path):
    with pytest.raises(InventoryError):
        PhonemeInventory(["A", "A"])
    with pytest.raises(InventoryError):
        PhonemeInventory(["<pad>"])
    bad = tmp_path / "bad.tsv"
    bad.write_text("NOTAB\n", encoding="utf-8")
    with pytest.raises(InventoryError):
        read_lexicon(bad)


def test_lexicon_first_entry_wins(lexicon_file):
    lex = read_lexicon(lexicon_file)
    assert lex["CAB"] == ("K", "AA", "B")


def test_text_to_phonemes_lexicon_and_fallback(lexicon_file):
    lex = read_lexicon(lexicon_file)
    inv = build_inventory(lexicon_file)
    seq = text_to_phonemes("cab, bad!", inv, lex)
    assert inv.lookup(seq.ids) == ["K", "AA", "B", "B", "AA", "D"]
    # out-of-lexicon word spelled out; letters outside the inventory map to UNK
    seq = text_to_phonemes("dbq", inv, lex)
    assert list(seq.ids) == [inv.index("D"), inv.index("B"), UNK_ID]
    assert seq.source_text == "dbq"


def test_toy_text_builtin_inventory():
    inv = build_inventory()
    seq = text_to_phonemes("A B A", inv)
    assert list(seq.ids) == [inv.index("A"), inv.index("B"), inv.index("A")]


def test_empty_text():
    inv = build_inventory()
    for text in ("", "   ", "?!..,"):
        with pytest.raises(EmptyText):
            text_to_phonemes(text, inv)


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=1, max_size=40))
def test_text_to_phonemes_total_and_deterministic(text):
    inv = build_inventory()
    try:
        seq = text_to_phonemes(text, inv)
    except EmptyText:
        return
    assert len(seq) >= 1
    assert PAD_ID not in seq.ids
    assert np.all((seq.ids >= 0) & (seq.ids < len(inv)))
    assert np.array_equal(text_to_phonemes(text, inv).ids, seq.ids)


def test_phoneme_sequence_invariants():
    with pytest.raises(ValueError):
        PhonemeSequence([2, 3], durations=[1])
    with pytest.raises(ValueError):
        PhonemeSequence([2, 3], durations=[1, 0])
    assert len(PhonemeSequence([2, 3], durations=[1, 2])) == 2


def test_positional_encoding_values():
    pe = positional_encoding(50)
    assert pe.shape == (50, 256)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert float(pe[1, 0]) == pytest.approx(math.sin(1.0), abs=1e-7)
    assert float(pe[1, 0]) == pytest.approx(0.84147, abs=1e-5)
    # channel pair i uses frequency 10000^(-2i/d)
    assert float(pe[7, 2 * 5 + 1]) == pytest.approx(math.cos(7 / 10000 ** (10 / 256)), abs=1e-6)
    assert np.all(np.abs(pe) <= 1.0)


def test_positional_encoding_errors():
    with pytest.raises(InvalidDim):
        positional_encoding(4, 7)
    with pytest.raises(ValueError):
        positional_encoding(0)


def test_positional_encoding_rows_distinct():
    pe = positional_encoding(10000, dtype=np.float64)
    assert len(np.unique(pe, axis=0)) == 10000


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 600), d=st.sampled_from([2, 8, 64, 256]))
def test_positional_encoding_prefix_consistent(T, d):
    full = positional_encoding(600, d)
    np.testing.assert_array_equal(positional_encoding(T, d), full[:T])


def test_lexicon_is_immutable_mapping():
    lex = Lexicon({"A": ("X",)})
    assert "A" in lex and "B" not in lex
