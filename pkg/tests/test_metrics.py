import itertools

import pytest
from hypothesis import given, settings, strategies as st

from montranslit.codec import CharSeq
from montranslit.corpus import WordPairGroup
from montranslit.metrics import (
    AlignmentError,
    DuplicateLabel,
    cer,
    edit_distance,
    evaluate,
    sweep_report,
    wer,
)


def brute_force_distance(a, b):
    """Textbook recursive Levenshtein, the oracle for the DP implementation."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        brute_force_distance(a[1:], b[1:]) + (a[0] != b[0]),
        brute_force_distance(a[1:], b) + 1,
        brute_force_distance(a, b[1:]) + 1,
    )


def group(src, *refs, side="latin"):
    return WordPairGroup(
        CharSeq(tuple(src), side), tuple(CharSeq(tuple(r), side) for r in refs)
    )


class TestEditDistance:
    def test_equal(self):
        assert edit_distance("abc", "abc").total == 0

    def test_kitten_sitting(self):
        ops = edit_distance("kitten", "sitting")
        assert brute_force_distance("kitten", "sitting") == 3
        assert ops.total == 3

    def test_pure_insertions(self):
        ops = edit_distance("", "ab")
        assert (ops.insertions, ops.deletions, ops.substitutions) == (2, 0, 0)

    def test_exhaustive_small_alphabet(self):
        """DP equals recursive brute force for all pairs of length <= 4 here;
        the acceptance suite extends this to length 6."""
        alphabet = "abc"
        words = [
            "".join(w)
            for n in range(4)
            for w in itertools.product(alphabet, repeat=n)
        ]
        for a in words:
            for b in words:
                assert edit_distance(a, b).total == brute_force_distance(a, b)

    def test_symmetry_swaps_ins_del(self):
        fwd = edit_distance("abcd", "bcx")
        rev = edit_distance("bcx", "abcd")
        assert fwd.total == rev.total
        assert (fwd.insertions, fwd.deletions) == (rev.deletions, rev.insertions)
        assert fwd.substitutions == rev.substitutions

    @given(
        st.text(alphabet="abc", max_size=6),
        st.text(alphabet="abc", max_size=6),
        st.text(alphabet="abc", max_size=6),
    )
    @settings(max_examples=80, deadline=None)
    def test_triangle_inequality(self, a, b, c):
        assert (
            edit_distance(a, c).total
            <= edit_distance(a, b).total + edit_distance(b, c).total
        )


class TestWer:
    def test_all_correct(self):
        groups = [group("ab", "ab"), group("cd", "cd")]
        value, report = wer([("a", "b"), ("c", "d")], groups)
        assert value == 0.0
        assert report.n_correct == 2

    def test_second_reference_counts_as_correct(self):
        groups = [group("дал", "dala", "dalv", side="latin")]
        value, _ = wer([tuple("dalv")], groups)
        assert value == 0.0

    def test_one_wrong_of_four(self):
        groups = [group(s, s) for s in ("aa", "bb", "cc", "dd")]
        preds = [tuple("aa"), tuple("bb"), tuple("cc"), tuple("zz")]
        value, _ = wer(preds, groups)
        assert value == pytest.approx(0.25)

    def test_length_mismatch(self):
        with pytest.raises(AlignmentError):
            wer([tuple("a")], [group("a", "a"), group("b", "b")])


class TestCer:
    def test_exact_matches_zero(self):
        groups = [group("abc", "abc")]
        assert cer([tuple("abc")], groups)[0] == 0.0

    def test_four_substitutions_over_ten(self):
        # 10-character reference with exactly 4 substituted positions
        ref = "alagavbtvr"
        pred = "elegevbtvl"
        assert brute_force_distance(pred[:5], ref[:5]) + brute_force_distance(pred[5:], ref[5:]) == 4
        value, report = cer([tuple(pred)], [group("x", ref)])
        assert report.words[0].ops.total == 4
        assert report.words[0].ops.substitutions == 4
        assert value == pytest.approx(0.4)

    def test_closest_reference_chosen(self):
        groups = [group("x", "abz", "aby", "ab")]  # distances 2 / 2 / 1 to "abq"... pick min
        _, report = cer([tuple("abq")], groups)
        assert report.words[0].ops.total == 1
        assert report.words[0].reference_index in (0, 1)  # distance-1 refs

    def test_min_rule_distances_2_and_1(self):
        groups = [group("x", "aaa", "aba")]
        _, report = cer([tuple("abb")], groups)
        assert report.words[0].reference_index == 1
        assert report.words[0].ops.total == 1

    def test_zero_iff_all_match(self):
        groups = [group("ab", "ab"), group("cd", "cd")]
        w, rep = wer([tuple("ab"), tuple("cd")], groups)
        assert w == 0.0 and rep.cer == 0.0
        w2, rep2 = wer([tuple("ab"), tuple("cx")], groups)
        assert w2 > 0.0 and rep2.cer > 0.0


class TestSweepReport:
    def test_csv_shape(self):
        rows = [(f"N={n}", 0.5 - 0.01 * n, 0.2) for n in range(1, 11)]
        report = sweep_report(rows)
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "label,wer,cer"
        assert len(lines) == 11

    def test_argmin(self):
        report = sweep_report([("A", 0.2, 0.3), ("B", 0.1, 0.4)])
        assert report.argmin("wer") == "B"
        assert report.argmin("cer") == "A"

    def test_empty(self):
        report = sweep_report([])
        assert report.to_csv() == "label,wer,cer\n"
        assert report.argmin("wer") is None

    def test_duplicate_label(self):
        with pytest.raises(DuplicateLabel):
            sweep_report([("A", 0.1, 0.1), ("A", 0.2, 0.2)])
