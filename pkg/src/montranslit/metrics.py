"""Edit-distance based evaluation: WER, CER and sweep-report tables.

A prediction counts as a correct word only if it exactly matches one of a
group's references; character errors are counted against the reference
with the smallest edit distance.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence

from .corpus import WordPairGroup


class AlignmentError(ValueError):
    """Predictions and groups have different lengths."""


class DuplicateLabel(ValueError):
    """Two sweep rows share a label."""


@dataclass(frozen=True)
class EditOps:
    insertions: int
    deletions: int
    substitutions: int

    @property
    def total(self) -> int:
        return self.insertions + self.deletions + self.substitutions


def edit_distance(a: Sequence[str], b: Sequence[str]) -> EditOps:
    """Unit-cost Levenshtein operations turning ``a`` into ``b``.

    The total is the classic distance; the insertion/deletion/substitution
    split comes from a backtrace that prefers substitution, then deletion,
    then insertion on ties, so op counts are reproducible.
    """
    la, lb = len(a), len(b)
    dist = [[0] * (lb + 1) for _ in range(la + 1)]
    for i in range(la + 1):
        dist[i][0] = i
    for j in range(lb + 1):
        dist[0][j] = j
    for i in range(1, la + 1):
        row, prev = dist[i], dist[i - 1]
        ai = a[i - 1]
        for j in range(1, lb + 1):
            row[j] = min(
                prev[j - 1] + (ai != b[j - 1]),
                prev[j] + 1,
                row[j - 1] + 1,
            )
    ins = dele = sub = 0
    i, j = la, lb
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and dist[i - 1][j - 1] + (a[i - 1] != b[j - 1]) == here:
            if a[i - 1] != b[j - 1]:
                sub += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1][j] + 1 == here:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditOps(ins, dele, sub)


@dataclass(frozen=True)
class WordResult:
    correct: bool
    ops: EditOps
    reference_index: int
    reference_length: int


@dataclass(frozen=True)
class EvalReport:
    n_total: int
    n_correct: int
    words: tuple[WordResult, ...]

    @property
    def wer(self) -> float:
        return 1.0 - self.n_correct / self.n_total

    @property
    def total_edit_ops(self) -> int:
        return sum(w.ops.total for w in self.words)

    @property
    def total_reference_chars(self) -> int:
        return sum(w.reference_length for w in self.words)

    @property
    def cer(self) -> float:
        chars = self.total_reference_chars
        return self.total_edit_ops / chars if chars else 0.0


def evaluate(
    predictions: Sequence[Sequence[str]], groups: Sequence[WordPairGroup]
) -> EvalReport:
    """Score one prediction per group under the multi-reference rules.

    Word correctness is exact match against any reference; character ops
    are taken against the reference minimizing the edit-op total (first
    reference wins ties), whose length is the CER denominator share.
    """
    if len(predictions) != len(groups):
        raise AlignmentError(
            f"{len(predictions)} predictions for {len(groups)} groups"
        )
    if not groups:
        raise AlignmentError("nothing to evaluate")
    words: list[WordResult] = []
    n_correct = 0
    for pred, group in zip(predictions, groups):
        pred = tuple(pred)
        best: tuple[int, int, EditOps] | None = None
        correct = False
        for idx, ref in enumerate(group.references):
            ops = edit_distance(pred, ref.tokens)
            if pred == ref.tokens:
                correct = True
            if best is None or ops.total < best[0]:
                best = (ops.total, idx, ops)
        assert best is not None
        _, idx, ops = best
        n_correct += correct
        words.append(WordResult(correct, ops, idx, len(group.references[idx])))
    return EvalReport(len(groups), n_correct, tuple(words))


def wer(
    predictions: Sequence[Sequence[str]], groups: Sequence[WordPairGroup]
) -> tuple[float, EvalReport]:
    report = evaluate(predictions, groups)
    return report.wer, report


def cer(
    predictions: Sequence[Sequence[str]], groups: Sequence[WordPairGroup]
) -> tuple[float, EvalReport]:
    report = evaluate(predictions, groups)
    return report.cer, report


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[tuple[str, float, float], ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("label,wer,cer\n")
        for label, w, c in self.rows:
            buf.write(f"{label},{w:.6f},{c:.6f}\n")
        return buf.getvalue()

    def argmin(self, metric: str) -> str | None:
        """Label of the best (lowest) row for ``"wer"`` or ``"cer"``."""
        if not self.rows:
            return None
        col = {"wer": 1, "cer": 2}[metric]
        return min(self.rows, key=lambda r: (r[col], r[0]))[0]


def sweep_report(results: Sequence[tuple[str, float, float]]) -> SweepReport:
    labels = [label for label, _, _ in results]
    for label in labels:
        if labels.count(label) > 1:
            raise DuplicateLabel(f"label {label!r} appears more than once")
    return SweepReport(tuple(results))
