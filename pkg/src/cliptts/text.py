"""Phoneme inventory, lexicon-based G2P and sinusoidal positional encodings."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyText, InvalidDim, InventoryError

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1

# builtin inventory: one symbol per Latin letter (the toy corpus uses the first K)
BUILTIN_SYMBOLS = tuple(string.ascii_uppercase)

_WORD_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)*")


class PhonemeInventory:
    """Ordered symbol table with ``<pad>`` at 0 and ``<unk>`` at 1."""

    def __init__(self, symbols: Iterable[str] = ()) -> None:
        table = [PAD, UNK, *symbols]
        index: dict[str, int] = {}
        for i, sym in enumerate(table):
            if sym in index:
                raise InventoryError(f"duplicate phoneme symbol {sym!r}")
            index[sym] = i
        self.symbols: tuple[str, ...] = tuple(table)
        self._index = index

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, PhonemeInventory) and self.symbols == other.symbols

    def __repr__(self) -> str:
        return f"PhonemeInventory(size={len(self)})"

    def index(self, sym: str) -> int:
        return self._index.get(sym, UNK_ID)

    def lookup(self, ids: Iterable[int]) -> list[str]:
        return [self.symbols[i] for i in ids]


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    durations: np.ndarray | None = None
    source_text: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.durations is not None:
            self.durations = np.asarray(self.durations, dtype=np.int64)
            if self.durations.shape != self.ids.shape:
                raise ValueError(f"{len(self.durations)} durations for {len(self.ids)} phonemes")
            if np.any(self.durations < 1):
                raise ValueError("phoneme durations must be >= 1 frame")

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class Lexicon:
    entries: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> tuple[str, ...]:
        return self.entries[word]


def read_lexicon(path) -> Lexicon:
    """Parse ``WORD<TAB>PH1 PH2 ...`` lines; ``#`` lines and blanks are skipped.

    A repeated word keeps its first pronunciation.
    """
    entries: dict[str, tuple[str, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise InventoryError(f"{path}:{lineno}: expected WORD<TAB>PHONEMES")
            word, phones = line.split("\t", 1)
            phones = tuple(phones.split())
            if not phones:
                raise InventoryError(f"{path}:{lineno}: word {word!r} has no phonemes")
            entries.setdefault(word.strip().upper(), phones)
    return Lexicon(entries)


def build_inventory(lexicon: Lexicon | str | Path | None = None) -> PhonemeInventory:
    """Reserved symbols followed by the lexicon's distinct phonemes in sorted order.

    ``None`` selects the builtin single-letter inventory.
    """
    if lexicon is None:
        return PhonemeInventory(BUILTIN_SYMBOLS)
    if not isinstance(lexicon, Lexicon):
        lexicon = read_lexicon(lexicon)
    phones = sorted({p for pron in lexicon.entries.values() for p in pron})
    return PhonemeInventory(phones)


def text_to_phonemes(text: str, inventory: PhonemeInventory,
                     lexicon: Lexicon | None = None) -> PhonemeSequence:
    """Uppercase words go through the lexicon, otherwise letter by letter.

    Letters missing from the inventory become ``<unk>``; punctuation is
    dropped.
    """
    lexicon = lexicon or Lexicon()
    ids: list[int] = []
    for word in _WORD_RE.findall(text.upper()):
        if word in lexicon:
            ids.extend(inventory.index(p) for p in lexicon[word])
        else:
            ids.extend(inventory.index(ch) for ch in word if ch != "'")
    if not ids:
        raise EmptyText(f"no phonemes in {text!r}")
    return PhonemeSequence(np.array(ids), source_text=text)


def positional_encoding(T: int, d: int = 256, dtype=np.float32) -> np.ndarray:
    """Sinusoidal table ``[T, d]``: sin on even channels, cos on odd ones."""
    if d % 2:
        raise InvalidDim(f"positional encoding width must be even, got {d}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    return _pe_table(T, d).astype(dtype)


_PE_CACHE: dict[int, np.ndarray] = {}


def _pe_table(T: int, d: int) -> np.ndarray:
    table = _PE_CACHE.get(d)
    if table is None or table.shape[0] < T:
        n = max(T, 2 * (table.shape[0] if table is not None else 256))
        t = np.arange(n, dtype=np.float64)[:, None]
        freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
        table = np.empty((n, d))
        table[:, 0::2] = np.sin(t * freq)
        table[:, 1::2] = np.cos(t * freq)
        _PE_CACHE[d] = table
    return table[:T]


def symbols_for(ids: Sequence[int], inventory: PhonemeInventory) -> str:
    return " ".join(inventory.lookup(ids))
