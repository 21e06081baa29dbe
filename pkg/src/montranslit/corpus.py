"""Word-pair corpora: parsing, splitting, vocabularies and padded batches.

A corpus file is one word pair per line, ``source<TAB>ref1|ref2|...``, with
``#`` comments.  A source may map to several references (the scripts are
not one-to-one); groups keep all references for evaluation, while training
expands each group into one (source, reference) pair per reference.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .codec import (
    BOS_ID,
    CYRILLIC,
    EOS_ID,
    LATIN,
    PAD_ID,
    CharSeq,
    MalformedLine,
    TransliterationTable,
    Vocabulary,
    encode_ids,
    tokenize,
    traditional_to_latin,
)

DIRECTIONS = ("C2T", "T2C")


class SplitSizeError(ValueError):
    """Requested split sizes do not add up to the corpus size."""


@dataclass(frozen=True)
class WordPairGroup:
    source: CharSeq
    references: tuple[CharSeq, ...]
    line_no: int = -1

    def __post_init__(self) -> None:
        if not self.references:
            raise ValueError("a word pair group needs at least one reference")


@dataclass(frozen=True)
class Corpus:
    groups: tuple[WordPairGroup, ...]
    direction: str

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def source_side(self) -> str:
        return CYRILLIC if self.direction == "C2T" else LATIN

    @property
    def target_side(self) -> str:
        return LATIN if self.direction == "C2T" else CYRILLIC

    def pairs(self) -> list[tuple[CharSeq, CharSeq]]:
        """One (source, reference) pair per reference, corpus order."""
        return [(g.source, ref) for g in self.groups for ref in g.references]


@dataclass(frozen=True)
class SplitSpec:
    train_count: int
    test_count: int
    seed: int


def _traditional_entry_tokens(entry: str, table: TransliterationTable | None) -> CharSeq:
    # Traditional-side entries may already be Latin transcription; anything
    # non-ASCII is script form and goes through the table first.
    if not entry.isascii():
        if table is None:
            raise MalformedLine(
                f"script-form entry {entry!r} needs a transliteration table"
            )
        entry = traditional_to_latin(entry, table)
    return tokenize(entry, LATIN)


def parse_corpus(
    text: str, direction: str, table: TransliterationTable | None = None
) -> Corpus:
    """Parse ``source<TAB>ref1|ref2|...`` lines into a tokenized corpus."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    groups: list[WordPairGroup] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise MalformedLine(f"line {lineno}: missing TAB separator")
        src_text, ref_text = line.split("\t", 1)
        src_text = src_text.strip()
        ref_texts = [r.strip() for r in ref_text.split("|") if r.strip()]
        if not src_text or not ref_texts:
            raise MalformedLine(f"line {lineno}: empty source or reference list")
        if direction == "C2T":
            source = tokenize(src_text, CYRILLIC)
            refs = [_traditional_entry_tokens(r, table) for r in ref_texts]
        else:
            source = _traditional_entry_tokens(src_text, table)
            refs = [tokenize(r, CYRILLIC) for r in ref_texts]
        unique: list[CharSeq] = []
        for ref in refs:
            if ref not in unique:
                unique.append(ref)
        groups.append(WordPairGroup(source, tuple(unique), lineno))
    return Corpus(tuple(groups), direction)


def split_corpus(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus]:
    """Deterministic shuffle by seed, then prefix/suffix split."""
    if spec.train_count + spec.test_count != len(corpus):
        raise SplitSizeError(
            f"train {spec.train_count} + test {spec.test_count} != corpus size {len(corpus)}"
        )
    if spec.train_count <= 0 or spec.test_count <= 0:
        raise SplitSizeError("both split parts must be positive")
    order = list(range(len(corpus)))
    random.Random(spec.seed).shuffle(order)
    shuffled = [corpus.groups[i] for i in order]
    train = Corpus(tuple(shuffled[: spec.train_count]), corpus.direction)
    test = Corpus(tuple(shuffled[spec.train_count :]), corpus.direction)
    return train, test


def build_vocabulary(corpus: Corpus, side: str) -> Vocabulary:
    """All symbols observed on one side, sorted, ids from 4 upward."""
    symbols: set[str] = set()
    if side == corpus.source_side:
        for g in corpus.groups:
            symbols.update(g.source.tokens)
    elif side == corpus.target_side:
        for g in corpus.groups:
            for ref in g.references:
                symbols.update(ref.tokens)
    else:
        raise ValueError(f"side {side!r} not present in a {corpus.direction} corpus")
    return Vocabulary(tuple(sorted(symbols)), side)


@dataclass(frozen=True)
class Batch:
    """Padded id arrays for one training batch.

    ``src`` has no framing; ``tgt_in`` is BOS-shifted and ``tgt_out`` is
    EOS-terminated so that position t of ``tgt_in`` predicts position t of
    ``tgt_out``.  Masks are 1.0 on real positions, 0.0 on padding.
    """

    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        mask[i, : len(r)] = 1.0
    return ids, mask


def make_batch(
    pairs: list[tuple[CharSeq, CharSeq]],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
) -> Batch:
    src_rows = [encode_ids(s, src_vocab) for s, _ in pairs]
    tgt_rows = [encode_ids(t, tgt_vocab) for _, t in pairs]
    src, src_mask = _pad(src_rows)
    tgt_in, tgt_mask = _pad([[BOS_ID] + r for r in tgt_rows])
    tgt_out, _ = _pad([r + [EOS_ID] for r in tgt_rows])
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)


def batch_iter(
    corpus: Corpus,
    batch_size: int,
    seed: int,
    epoch: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    unit: str = "sequences",
):
    """Yield padded batches covering every (source, reference) pair once.

    The shuffle is keyed by (seed, epoch).  With ``unit="sequences"`` each
    batch holds ``batch_size`` pairs (last one short); with ``unit="tokens"``
    pairs accumulate while batch rows times the widest target stays within
    the ``batch_size`` token budget.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if unit not in ("sequences", "tokens"):
        raise ValueError(f"unknown batch unit {unit!r}")
    pairs = corpus.pairs()
    order = list(range(len(pairs)))
    # int-combined key: tuple seeding would go through hash() and vary by process
    random.Random(seed * 1_000_003 + epoch).shuffle(order)
    shuffled = [pairs[i] for i in order]
    if unit == "sequences":
        for start in range(0, len(shuffled), batch_size):
            yield make_batch(shuffled[start : start + batch_size], src_vocab, tgt_vocab)
        return
    chunk: list[tuple[CharSeq, CharSeq]] = []
    widest = 0
    for pair in shuffled:
        tlen = len(pair[1]) + 1  # EOS
        if chunk and (len(chunk) + 1) * max(widest, tlen) > batch_size:
            yield make_batch(chunk, src_vocab, tgt_vocab)
            chunk, widest = [], 0
        chunk.append(pair)
        widest = max(widest, tlen)
    if chunk:
        yield make_batch(chunk, src_vocab, tgt_vocab)
