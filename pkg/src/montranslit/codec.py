"""Script codec: Traditional Mongolian <-> Latin transcription and tokenization.

The Traditional script is never manipulated as glyphs here.  A data-driven
table (see ``data/traditional_latin.tsv``) maps script symbols to Latin
codes, and every conversion is defined relative to the loaded table.  The
Cyrillic side needs no table: words are tokenized per character, with the
initial capital folded to lowercase and remembered on the token sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

CYRILLIC = "cyrillic"
LATIN = "latin"
SIDES = (CYRILLIC, LATIN)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)


class CodecError(ValueError):
    """Base class for codec failures."""


class DuplicateEntry(CodecError):
    """Two table entries share a script symbol or a latin code."""


class MalformedLine(CodecError):
    """A line of an input file does not match the expected format."""


class EmptyTable(CodecError):
    """The table file contains no entries."""


class AmbiguousTable(CodecError):
    """A latin code is a proper prefix of another, breaking longest-match."""


class UnknownSymbol(CodecError):
    """A script symbol has no table entry."""


class UnparseableLatin(CodecError):
    """A latin string cannot be decomposed into table codes."""


class EmptyInput(CodecError):
    """An empty word where a non-empty one is required."""


@dataclass(frozen=True)
class TransliterationTable:
    """Bijective script-symbol <-> latin-code mapping, order preserved."""

    entries: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "_to_latin", dict(self.entries))
        object.__setattr__(self, "_to_script", {lat: sym for sym, lat in self.entries})
        lens_s = sorted({len(sym) for sym, _ in self.entries}, reverse=True)
        lens_l = sorted({len(lat) for _, lat in self.entries}, reverse=True)
        object.__setattr__(self, "_script_lens", tuple(lens_s))
        object.__setattr__(self, "_latin_lens", tuple(lens_l))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def script_symbols(self) -> tuple[str, ...]:
        return tuple(sym for sym, _ in self.entries)

    @property
    def latin_codes(self) -> tuple[str, ...]:
        return tuple(lat for _, lat in self.entries)

    def latin_of(self, symbol: str) -> str | None:
        return self._to_latin.get(symbol)

    def script_of(self, latin: str) -> str | None:
        return self._to_script.get(latin)


def load_table(table_text: str) -> TransliterationTable:
    """Parse a ``symbol<TAB>latin`` table, validating the codec invariants.

    Rejects duplicate symbols or codes, empty fields, latin codes that are
    not lowercase ASCII, and any latin code that is a proper prefix of
    another (longest-match parsing must be unambiguous).
    """
    entries: list[tuple[str, str]] = []
    seen_script: set[str] = set()
    seen_latin: set[str] = set()
    for lineno, raw in enumerate(table_text.splitlines(), start=1):
        line = raw.strip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedLine(f"line {lineno}: expected 'symbol<TAB>latin', got {line!r}")
        sym, lat = parts[0].strip(), parts[1].strip()
        if not sym or not lat:
            raise MalformedLine(f"line {lineno}: empty field in {line!r}")
        if not lat.isascii() or any(c.isupper() or c.isspace() for c in lat):
            raise MalformedLine(f"line {lineno}: latin code {lat!r} must be lowercase ASCII")
        if sym in seen_script:
            raise DuplicateEntry(f"line {lineno}: script symbol {sym!r} already mapped")
        if lat in seen_latin:
            raise DuplicateEntry(f"line {lineno}: latin code {lat!r} already mapped")
        seen_script.add(sym)
        seen_latin.add(lat)
        entries.append((sym, lat))
    if not entries:
        raise EmptyTable("table has no entries")
    codes = sorted(seen_latin)
    for a, b in zip(codes, codes[1:]):
        if b.startswith(a):
            raise AmbiguousTable(f"latin code {a!r} is a proper prefix of {b!r}")
    return TransliterationTable(tuple(entries))


def default_table_path() -> Path:
    """Path of the transliteration table shipped with the package."""
    return Path(__file__).parent / "data" / "traditional_latin.tsv"


def load_default_table() -> TransliterationTable:
    return load_table(default_table_path().read_text(encoding="utf-8"))


def traditional_to_latin(word: str, table: TransliterationTable) -> str:
    """Convert a Traditional-script word to its Latin transcription.

    Greedy longest-match over the script side; raises :class:`UnknownSymbol`
    (with the character position) when no entry matches.
    """
    out: list[str] = []
    i = 0
    while i < len(word):
        for ln in table._script_lens:  # longest first
            piece = word[i : i + ln]
            lat = table.latin_of(piece) if len(piece) == ln else None
            if lat is not None:
                out.append(lat)
                i += ln
                break
        else:
            raise UnknownSymbol(f"no table entry for symbol at position {i}: {word[i]!r}")
    return "".join(out)


def latin_to_traditional(latin: str, table: TransliterationTable) -> str:
    """Inverse of :func:`traditional_to_latin` on table-covered inputs."""
    out: list[str] = []
    i = 0
    while i < len(latin):
        for ln in table._latin_lens:
            piece = latin[i : i + ln]
            sym = table.script_of(piece) if len(piece) == ln else None
            if sym is not None:
                out.append(sym)
                i += ln
                break
        else:
            raise UnparseableLatin(f"cannot parse latin residue at offset {i}: {latin[i:]!r}")
    return "".join(out)


@dataclass(frozen=True)
class CharSeq:
    """A tokenized word: one token per logical character of one script side."""

    tokens: tuple[str, ...]
    side: str
    initial_capital: bool = False

    @property
    def text(self) -> str:
        return "".join(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(word: str, side: str) -> CharSeq:
    """Split a word into one token per logical character.

    On the cyrillic side an initial capital is folded to lowercase and the
    fold is recorded on the sequence; the latin side splits per ASCII
    character.
    """
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    word = word.strip()
    if not word:
        raise EmptyInput("cannot tokenize an empty word")
    cap = False
    if side == CYRILLIC:
        head = word[0]
        if head != head.lower():
            word = head.lower() + word[1:]
            cap = True
    return CharSeq(tuple(word), side, cap)


@dataclass(frozen=True)
class Vocabulary:
    """Dense symbol<->id map with fixed reserved ids PAD=0 BOS=1 EOS=2 UNK=3."""

    symbols: tuple[str, ...]
    side: str

    def __post_init__(self) -> None:
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        if any(s in RESERVED for s in self.symbols):
            raise ValueError("reserved token listed as a plain symbol")
        index = {s: i + len(RESERVED) for i, s in enumerate(self.symbols)}
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.symbols) + len(RESERVED)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        if 0 <= idx < len(RESERVED):
            return RESERVED[idx]
        if idx < self.size:
            return self.symbols[idx - len(RESERVED)]
        raise IndexError(f"id {idx} out of range for vocabulary of size {self.size}")

    def __contains__(self, token: str) -> bool:
        return token in self._index


def encode_ids(seq: CharSeq, vocab: Vocabulary, add_bos_eos: bool = False) -> list[int]:
    """Map tokens to ids; out-of-vocabulary tokens become UNK."""
    ids = [vocab.id_of(t) for t in seq.tokens]
    if add_bos_eos:
        return [BOS_ID] + ids + [EOS_ID]
    return ids


def decode_ids(ids: list[int], vocab: Vocabulary, side: str) -> CharSeq:
    """Inverse of :func:`encode_ids` for UNK-free sequences; framing dropped."""
    tokens = [vocab.token_of(i) for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]
    return CharSeq(tuple(tokens), side)
