"""Joint-sequence baseline: graphone alignment by EM plus an n-gram model.

A graphone pairs a short source substring with a short target substring
(either half may be empty, not both).  Word pairs are represented as
monotone paths through a lattice of graphone edges; EM over the lattices
estimates a unigram distribution on graphones, 1-best segmentations feed
an absolute-discounted backoff n-gram, and decoding is a beam search over
graphone extensions that consume the source.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .codec import CharSeq
from .corpus import Corpus

NEG_INF = float("-inf")

# boundary marks used in n-gram histories / prediction targets
BOS_MARK = "<g:bos>"
EOS_MARK = "<g:eos>"


class UnalignablePair(ValueError):
    """No lattice path exists for a pair under the current inventory."""


class EmptyModel(ValueError):
    """No training material for the n-gram estimator."""


class DecodeFailure(ValueError):
    """Beam search exhausted its budget without a complete hypothesis."""


@dataclass(frozen=True, order=True)
class Graphone:
    source: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.source and not self.target:
            raise ValueError("graphone with both halves empty")

    def __repr__(self) -> str:
        return f"{''.join(self.source)}:{''.join(self.target)}"


@dataclass
class GraphoneLattice:
    """Monotone segmentation DAG for one (source, target) pair.

    Nodes are positions ``(i, j)``; an edge labeled ``g`` runs from
    ``(i, j)`` to ``(i + |g.source|, j + |g.target|)``.
    """

    n: int
    m: int
    edges: dict[tuple[int, int], list[tuple[Graphone, int, int]]]

    def count_paths(self) -> int:
        counts = {(0, 0): 1}
        for i in range(self.n + 1):
            for j in range(self.m + 1):
                c = counts.get((i, j), 0)
                if not c:
                    continue
                for _, i2, j2 in self.edges.get((i, j), ()):
                    counts[(i2, j2)] = counts.get((i2, j2), 0) + c
        return counts.get((self.n, self.m), 0)


def _tokens(seq) -> tuple[str, ...]:
    return tuple(seq.tokens) if isinstance(seq, CharSeq) else tuple(seq)


def build_lattice(
    source,
    target,
    max_source: int,
    max_target: int,
    allow_epsilon: bool = True,
    inventory: set[Graphone] | None = None,
) -> GraphoneLattice:
    """All monotone segmentations of a pair into legal graphones.

    ``allow_epsilon`` permits one empty half per graphone (insertions and
    deletions); ``inventory`` restricts edges to a known graphone set.
    """
    if max_source < 1 or max_target < 1:
        raise ValueError("graphone size bounds must be >= 1")
    src, tgt = _tokens(source), _tokens(target)
    n, m = len(src), len(tgt)
    edges: dict[tuple[int, int], list[tuple[Graphone, int, int]]] = {}
    lo = 0 if allow_epsilon else 1
    for i in range(n + 1):
        for j in range(m + 1):
            out = []
            for di in range(lo, min(max_source, n - i) + 1):
                for dj in range(lo, min(max_target, m - j) + 1):
                    if di == 0 and dj == 0:
                        continue
                    g = Graphone(src[i : i + di], tgt[j : j + dj])
                    if inventory is not None and g not in inventory:
                        continue
                    out.append((g, i + di, j + dj))
            if out:
                edges[(i, j)] = out
    return GraphoneLattice(n, m, edges)


def _incoming(lattice: GraphoneLattice):
    inc: dict[tuple[int, int], list[tuple[Graphone, int, int]]] = {}
    for (i, j), outs in lattice.edges.items():
        for g, i2, j2 in outs:
            inc.setdefault((i2, j2), []).append((g, i, j))
    return inc


def _logsumexp(values: list[float]) -> float:
    best = max(values, default=NEG_INF)
    if best == NEG_INF:
        return NEG_INF
    return best + math.log(sum(math.exp(v - best) for v in values))


def _forward(lattice: GraphoneLattice, logp: dict[Graphone, float]):
    alpha = {(0, 0): 0.0}
    inc = _incoming(lattice)
    for i in range(lattice.n + 1):
        for j in range(lattice.m + 1):
            if (i, j) == (0, 0):
                continue
            terms = [
                alpha[(pi, pj)] + logp.get(g, NEG_INF)
                for g, pi, pj in inc.get((i, j), ())
                if (pi, pj) in alpha and logp.get(g, NEG_INF) > NEG_INF
            ]
            if terms:
                alpha[(i, j)] = _logsumexp(terms)
    return alpha


def _backward_scores(lattice: GraphoneLattice, logp: dict[Graphone, float]):
    beta = {(lattice.n, lattice.m): 0.0}
    for i in range(lattice.n, -1, -1):
        for j in range(lattice.m, -1, -1):
            if (i, j) == (lattice.n, lattice.m):
                continue
            terms = [
                beta[(i2, j2)] + logp.get(g, NEG_INF)
                for g, i2, j2 in lattice.edges.get((i, j), ())
                if (i2, j2) in beta and logp.get(g, NEG_INF) > NEG_INF
            ]
            if terms:
                beta[(i, j)] = _logsumexp(terms)
    return beta


@dataclass
class AlignmentModel:
    """Unigram graphone distribution (log domain) with its EM history."""

    log_probs: dict[Graphone, float]
    max_source: int
    max_target: int
    allow_epsilon: bool
    ll_history: list[float] = field(default_factory=list)

    @property
    def inventory(self) -> list[Graphone]:
        return sorted(self.log_probs)


def em_train(
    corpus: Corpus,
    max_source: int = 2,
    max_target: int = 2,
    iterations: int = 10,
    prune_eps: float = 1e-6,
    allow_epsilon: bool = True,
) -> AlignmentModel:
    """Forward-backward EM over pair lattices with posterior-mass trimming.

    Starts uniform over every graphone seen in any lattice; each iteration
    accumulates expected counts, renormalizes, and drops graphones whose
    count mass fell below ``prune_eps``.  The recorded corpus
    log-likelihood is non-decreasing (the trimmed mass is itself below the
    pruning threshold, so renormalization offsets the lost paths to first
    order).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    pairs = [(_tokens(s), _tokens(t)) for s, t in corpus.pairs()]
    if not pairs:
        raise EmptyModel("empty corpus")
    lattices = []
    seen: set[Graphone] = set()
    for k, (src, tgt) in enumerate(pairs):
        lat = build_lattice(src, tgt, max_source, max_target, allow_epsilon)
        if lat.count_paths() == 0:
            raise UnalignablePair(f"pair {k}: {''.join(src)!r} / {''.join(tgt)!r}")
        lattices.append(lat)
        for outs in lat.edges.values():
            seen.update(g for g, _, _ in outs)
    uniform = -math.log(len(seen))
    logp = {g: uniform for g in seen}
    ll_history: list[float] = []

    for _ in range(iterations):
        counts: dict[Graphone, float] = {}
        total_ll = 0.0
        for k, lat in enumerate(lattices):
            alpha = _forward(lat, logp)
            z = alpha.get((lat.n, lat.m), NEG_INF)
            if z == NEG_INF:
                src, tgt = pairs[k]
                raise UnalignablePair(
                    f"pair {k}: {''.join(src)!r} / {''.join(tgt)!r} "
                    "has no path under the retained inventory"
                )
            beta = _backward_scores(lat, logp)
            total_ll += z
            for (i, j), outs in lat.edges.items():
                if (i, j) not in alpha:
                    continue
                a = alpha[(i, j)]
                for g, i2, j2 in outs:
                    lp = logp.get(g, NEG_INF)
                    if lp == NEG_INF or (i2, j2) not in beta:
                        continue
                    counts[g] = counts.get(g, 0.0) + math.exp(a + lp + beta[(i2, j2)] - z)
        ll_history.append(total_ll)
        total = sum(counts.values())
        kept = {g: c for g, c in counts.items() if c / total >= prune_eps}
        kept_total = sum(kept.values())
        logp = {g: math.log(c / kept_total) for g, c in kept.items()} if kept else {}

    return AlignmentModel(logp, max_source, max_target, allow_epsilon, ll_history)


def viterbi_segment(source, target, model: AlignmentModel) -> tuple[Graphone, ...]:
    """Best-scoring monotone segmentation of a pair under the unigram model.

    Ties break toward fewer graphones, then lexicographically.
    """
    src, tgt = _tokens(source), _tokens(target)
    lattice = build_lattice(
        src, tgt, model.max_source, model.max_target,
        model.allow_epsilon, set(model.log_probs),
    )
    inc = _incoming(lattice)
    # per node: (score, length, sequence)
    best: dict[tuple[int, int], tuple[float, int, tuple[Graphone, ...]]] = {
        (0, 0): (0.0, 0, ())
    }
    for i in range(lattice.n + 1):
        for j in range(lattice.m + 1):
            if (i, j) == (0, 0):
                continue
            cand = None
            for g, pi, pj in inc.get((i, j), ()):
                prev = best.get((pi, pj))
                if prev is None:
                    continue
                score = prev[0] + model.log_probs[g]
                entry = (score, prev[1] + 1, prev[2] + (g,))
                if (
                    cand is None
                    or entry[0] > cand[0]
                    or (entry[0] == cand[0] and (entry[1], entry[2]) < (cand[1], cand[2]))
                ):
                    cand = entry
            if cand is not None:
                best[(i, j)] = cand
    final = best.get((lattice.n, lattice.m))
    if final is None:
        raise UnalignablePair(f"{''.join(src)!r} / {''.join(tgt)!r}")
    return final[2]


@dataclass
class NGramModel:
    """Absolute-discounted interpolated backoff model over graphone events.

    Raw counts are kept per order; probabilities are computed on demand so
    persistence round-trips exactly.  Prediction targets are the graphone
    inventory plus the end mark; histories may contain the begin mark.
    """

    order: int
    discount: float
    trim_min_count: float
    inventory: tuple[Graphone, ...]
    counts: list[dict[tuple, dict[object, float]]]  # index k: histories of length k

    def __post_init__(self) -> None:
        if not 1 <= self.order <= 10:
            raise ValueError("order must be within 1..10")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must be in [0, 1)")

    @property
    def n_predictions(self) -> int:
        return len(self.inventory) + 1  # graphones + EOS_MARK

    def _history_key(self, history: tuple) -> tuple:
        h = tuple(history)[-(self.order - 1) :] if self.order > 1 else ()
        return h

    def prob(self, pred, history: tuple) -> float:
        return self._prob(pred, self._history_key(history))

    def log_prob(self, pred, history: tuple) -> float:
        p = self.prob(pred, history)
        return math.log(p) if p > 0.0 else NEG_INF

    def _prob(self, pred, h: tuple) -> float:
        if not h:
            table = self.counts[0].get((), {})
            total = sum(table.values())
            if total <= 0:
                return 1.0 / self.n_predictions
            c = table.get(pred, 0.0)
            lam = self.discount * len(table) / total
            return max(c - self.discount, 0.0) / total + lam / self.n_predictions
        table = self.counts[len(h)].get(h)
        if table is None:
            return self._prob(pred, h[1:])
        total = sum(table.values())
        c = table.get(pred, 0.0)
        lam = self.discount * len(table) / total
        backoff = self._prob(pred, h[1:])
        return max(c - self.discount, 0.0) / total + lam * backoff

    def histories(self) -> list[tuple]:
        return [h for k in range(self.order) for h in self.counts[k]]


def estimate_ngram(
    sequences: list[tuple[Graphone, ...]],
    order: int,
    discount: float = 0.5,
    trim_min_count: float = 1.0,
    inventory: tuple[Graphone, ...] | None = None,
) -> NGramModel:
    """Count graphone events at all orders up to ``order`` and smooth.

    Histories below ``trim_min_count`` total are dropped (served by
    backoff); the begin mark pads histories and the end mark closes every
    sequence.
    """
    if not sequences:
        raise EmptyModel("no training sequences")
    if inventory is None:
        inventory = tuple(sorted({g for seq in sequences for g in seq}))
    counts: list[dict[tuple, dict[object, float]]] = [dict() for _ in range(order)]
    for seq in sequences:
        events = list(seq) + [EOS_MARK]
        padded = [BOS_MARK] * (order - 1) + list(seq)
        for t, pred in enumerate(events):
            full = tuple(padded[t : t + order - 1]) if order > 1 else ()
            for k in range(order):
                h = full[len(full) - k :] if k else ()
                table = counts[k].setdefault(h, {})
                table[pred] = table.get(pred, 0.0) + 1.0
    for k in range(1, order):
        counts[k] = {
            h: table
            for h, table in counts[k].items()
            if sum(table.values()) >= trim_min_count
        }
    return NGramModel(order, discount, trim_min_count, inventory, counts)


@dataclass(frozen=True)
class _JointHyp:
    pos: int
    history: tuple
    target: tuple[str, ...]
    score: float
    steps: int


def decode_joint(
    source,
    align: AlignmentModel,
    lm: NGramModel,
    beam: int = 8,
    max_expand: int = 100_000,
) -> tuple[str, ...]:
    """Beam search over graphone extensions consuming the source.

    A hypothesis scores the sum of n-gram log-probabilities of its
    graphones; completion adds the end-mark probability.  With a beam at
    least the number of segmentations this is exhaustive.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    src = _tokens(source)
    n = len(src)
    by_source: dict[tuple[str, ...], list[Graphone]] = {}
    for g in align.inventory:
        by_source.setdefault(g.source, []).append(g)

    active = [_JointHyp(0, (), (), 0.0, 0)]
    completed: list[_JointHyp] = []
    expansions = 0
    max_steps = 2 * n + 5
    while active:
        children: list[_JointHyp] = []
        for hyp in active:
            if hyp.pos == n:
                lp = lm.log_prob(EOS_MARK, hyp.history)
                if lp > NEG_INF:
                    completed.append(
                        _JointHyp(n, hyp.history, hyp.target, hyp.score + lp, hyp.steps)
                    )
                # end-position hypotheses may still extend via insertions
            if hyp.steps >= max_steps:
                continue
            for di in range(0, align.max_source + 1):
                part = src[hyp.pos : hyp.pos + di]
                if len(part) != di:
                    continue
                for g in by_source.get(part, ()):
                    lp = lm.log_prob(g, hyp.history)
                    expansions += 1
                    if lp == NEG_INF:
                        continue
                    children.append(
                        _JointHyp(
                            hyp.pos + di,
                            hyp.history + (g,),
                            hyp.target + g.target,
                            hyp.score + lp,
                            hyp.steps + 1,
                        )
                    )
        if expansions > max_expand:
            if completed:
                break
            raise DecodeFailure(f"no complete hypothesis within {max_expand} expansions")
        children.sort(key=lambda h: (-h.score, h.steps, h.target))
        active = children[:beam]
    if not completed:
        raise DecodeFailure(f"no complete hypothesis for source {''.join(src)!r}")
    best = min(completed, key=lambda h: (-h.score, h.steps, h.target))
    return best.target


# ---------------------------------------------------------------------------
# persistence: text format, versioned header


JOINT_MAGIC = "JOINT-NGRAM v1"


class CorruptModel(ValueError):
    """Joint model file is malformed or truncated."""


def _graphone_to_json(g: Graphone) -> list:
    return [list(g.source), list(g.target)]


def _graphone_from_json(item) -> Graphone:
    return Graphone(tuple(item[0]), tuple(item[1]))


def save_joint_model(path, align: AlignmentModel, lm: NGramModel, meta: dict) -> None:
    inv = sorted(align.log_probs)
    index = {g: k for k, g in enumerate(inv)}

    def pred_id(pred):
        return -2 if pred == EOS_MARK else index[pred]

    def hist_ids(h):
        return [-1 if item == BOS_MARK else index[item] for item in h]

    lines = [JOINT_MAGIC]
    header = dict(meta)
    header.update(
        max_source=align.max_source,
        max_target=align.max_target,
        allow_epsilon=align.allow_epsilon,
        order=lm.order,
        discount=lm.discount,
        trim_min_count=lm.trim_min_count,
    )
    lines.append(json.dumps(header, sort_keys=True, ensure_ascii=False))
    lines.append(f"GRAPHONES {len(inv)}")
    for g in inv:
        lines.append(
            json.dumps([_graphone_to_json(g), align.log_probs[g]], ensure_ascii=False)
        )
    records = []
    for k in range(lm.order):
        for h in sorted(lm.counts[k], key=repr):
            for pred in sorted(lm.counts[k][h], key=repr):
                records.append([k, hist_ids(h), pred_id(pred), lm.counts[k][h][pred]])
    lines.append(f"NGRAMS {len(records)}")
    lines.extend(json.dumps(r, ensure_ascii=False) for r in records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_joint_model(path) -> tuple[AlignmentModel, NGramModel, dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != JOINT_MAGIC:
        raise CorruptModel("bad magic line")
    try:
        header = json.loads(lines[1])
        pos = 2
        tag, count = lines[pos].split()
        assert tag == "GRAPHONES"
        pos += 1
        inv: list[Graphone] = []
        log_probs: dict[Graphone, float] = {}
        for _ in range(int(count)):
            item, lp = json.loads(lines[pos])
            g = _graphone_from_json(item)
            inv.append(g)
            log_probs[g] = lp
            pos += 1
        tag, count = lines[pos].split()
        assert tag == "NGRAMS"
        pos += 1
        order = header["order"]
        counts: list[dict[tuple, dict[object, float]]] = [dict() for _ in range(order)]

        def item_of(idx):
            return BOS_MARK if idx == -1 else EOS_MARK if idx == -2 else inv[idx]

        for _ in range(int(count)):
            k, hist, pred, c = json.loads(lines[pos])
            h = tuple(item_of(i) for i in hist)
            counts[k].setdefault(h, {})[item_of(pred)] = c
            pos += 1
    except (IndexError, KeyError, ValueError, AssertionError) as exc:
        raise CorruptModel(f"truncated or malformed joint model: {exc}") from exc
    align = AlignmentModel(
        log_probs, header["max_source"], header["max_target"], header["allow_epsilon"]
    )
    lm = NGramModel(
        order, header["discount"], header["trim_min_count"], tuple(inv), counts
    )
    return align, lm, header
