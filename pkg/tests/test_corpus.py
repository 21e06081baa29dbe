import numpy as np
import pytest

from montranslit import codec
from montranslit.codec import MalformedLine, Vocabulary
from montranslit.corpus import (
    Corpus,
    SplitSizeError,
    SplitSpec,
    batch_iter,
    build_vocabulary,
    parse_corpus,
    split_corpus,
)


def toy_corpus(n=10, direction="T2C"):
    lines = [f"w{i:02d}ab\tс{i:02d}х" for i in range(n)]
    return parse_corpus("\n".join(lines), direction)


class TestParse:
    def test_two_references(self):
        corpus = parse_corpus("дала\tdala|dalv", "C2T")
        assert len(corpus) == 1
        assert len(corpus.groups[0].references) == 2

    def test_missing_tab(self):
        with pytest.raises(MalformedLine, match="line 1"):
            parse_corpus("dala dalv", "C2T")

    def test_empty_reference_list(self):
        with pytest.raises(MalformedLine):
            parse_corpus("w\t", "T2C")

    def test_three_lines(self):
        corpus = parse_corpus("a\tx\nb\ty\nc\tz", "T2C")
        assert len(corpus) == 3
        assert [g.line_no for g in corpus.groups] == [1, 2, 3]

    def test_duplicate_references_dropped(self):
        corpus = parse_corpus("a\tx|x|y", "T2C")
        assert len(corpus.groups[0].references) == 2

    def test_script_form_entries_go_through_table(self):
        table = codec.load_default_table()
        word = codec.latin_to_traditional("dala", table)
        corpus = parse_corpus(f"{word}\tдал", "T2C", table)
        assert corpus.groups[0].source.tokens == ("d", "a", "l", "a")

    def test_comments_ignored(self):
        assert len(parse_corpus("# note\na\tx", "T2C")) == 1


class TestSplit:
    def test_sizes(self):
        corpus = toy_corpus(20)
        train, test = split_corpus(corpus, SplitSpec(15, 5, seed=7))
        assert (len(train), len(test)) == (15, 5)

    def test_partition(self):
        corpus = toy_corpus(12)
        train, test = split_corpus(corpus, SplitSpec(8, 4, seed=3))
        seen = {g.source.text for g in train.groups} | {g.source.text for g in test.groups}
        assert seen == {g.source.text for g in corpus.groups}
        assert not ({g.source.text for g in train.groups} & {g.source.text for g in test.groups})

    def test_deterministic(self):
        corpus = toy_corpus(16)
        a = split_corpus(corpus, SplitSpec(10, 6, seed=42))
        b = split_corpus(corpus, SplitSpec(10, 6, seed=42))
        assert [g.source.text for g in a[0].groups] == [g.source.text for g in b[0].groups]

    def test_count_mismatch(self):
        with pytest.raises(SplitSizeError):
            split_corpus(toy_corpus(15), SplitSpec(10, 10, seed=0))


class TestVocab:
    def test_size_counts_reserved(self):
        corpus = parse_corpus("ba\tср", "T2C")
        vocab = build_vocabulary(corpus, "latin")
        assert vocab.size == 6  # 4 reserved + {a, b}

    def test_deterministic_and_sorted(self):
        c1 = parse_corpus("ba\tх\nab\tс", "T2C")
        c2 = parse_corpus("ab\tс\nba\tх", "T2C")
        assert build_vocabulary(c1, "latin").symbols == build_vocabulary(c2, "latin").symbols == ("a", "b")

    def test_wrong_side_rejected(self):
        with pytest.raises(ValueError):
            build_vocabulary(toy_corpus(2, "T2C"), "greek")


class TestBatches:
    def _vocabs(self, corpus):
        return (
            build_vocabulary(corpus, corpus.source_side),
            build_vocabulary(corpus, corpus.target_side),
        )

    def test_batch_sizes(self):
        corpus = toy_corpus(10)
        sv, tv = self._vocabs(corpus)
        sizes = [b.size for b in batch_iter(corpus, 4, seed=1, epoch=0, src_vocab=sv, tgt_vocab=tv)]
        assert sizes == [4, 4, 2]

    def test_same_seed_epoch_identical(self):
        corpus = toy_corpus(9)
        sv, tv = self._vocabs(corpus)
        a = [b.src.tolist() for b in batch_iter(corpus, 4, 5, 3, sv, tv)]
        b = [b.src.tolist() for b in batch_iter(corpus, 4, 5, 3, sv, tv)]
        assert a == b

    def test_different_epoch_reshuffles(self):
        corpus = toy_corpus(32)
        sv, tv = self._vocabs(corpus)
        a = [b.src.tolist() for b in batch_iter(corpus, 8, 5, 0, sv, tv)]
        b = [b.src.tolist() for b in batch_iter(corpus, 8, 5, 1, sv, tv)]
        assert a != b

    def test_masks_match_padding(self):
        corpus = parse_corpus("ab\tхос\nabcdef\tх", "T2C")
        sv, tv = self._vocabs(corpus)
        (batch,) = batch_iter(corpus, 2, 0, 0, sv, tv)
        assert np.array_equal(batch.src_mask == 1.0, batch.src != 0)
        assert batch.tgt_in[:, 0].tolist() == [1, 1]  # BOS
        # every row of tgt_out ends its real span with EOS
        for row, mask in zip(batch.tgt_out, batch.tgt_mask):
            last = int(mask.sum()) - 1
            assert row[last] == 2

    def test_every_pair_once_per_epoch(self):
        corpus = toy_corpus(11)
        sv, tv = self._vocabs(corpus)
        seen = []
        for batch in batch_iter(corpus, 3, 9, 4, sv, tv):
            seen.extend(batch.src.tolist())
        assert len(seen) == 11
        assert len({tuple(r) for r in seen}) == 11

    def test_token_budget_mode(self):
        corpus = toy_corpus(10)
        sv, tv = self._vocabs(corpus)
        batches = list(batch_iter(corpus, 16, 0, 0, sv, tv, unit="tokens"))
        assert sum(b.size for b in batches) == 10
        for b in batches:
            assert b.size * b.tgt_out.shape[1] <= 16

    def test_multi_reference_groups_expand(self):
        corpus = parse_corpus("ab\tх|хо", "T2C")
        sv, tv = self._vocabs(corpus)
        (batch,) = batch_iter(corpus, 4, 0, 0, sv, tv)
        assert batch.size == 2
