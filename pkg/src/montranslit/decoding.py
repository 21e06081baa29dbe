"""Greedy and beam-search inference shared by both neural backbones.

A model exposes ``start_session(src_ids)``; a session yields next-token
log-probabilities and an ``advanced(token)`` successor, so the search is
the same whether the state is an LSTM carry or a growing prefix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import EOS_ID


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int = 4
    max_len: int = 32
    length_norm_alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.beam_width < 1 or self.max_len < 1:
            raise ValueError("beam_width and max_len must be >= 1")


@dataclass(frozen=True)
class Hypothesis:
    ids: tuple[int, ...]  # generated tokens, BOS excluded
    score: float
    finished: bool
    session: object

    def ranking_key(self, alpha: float) -> float:
        length = max(len(self.ids), 1)
        return self.score / (length**alpha) if alpha else self.score


def default_max_len(source_len: int) -> int:
    """Generous cap: target lengths stay near the source length."""
    return 2 * source_len + 5


def greedy_decode(model, src_ids, max_len: int) -> list[int]:
    """Per-step argmax, ties to the lowest token id; stops at EOS or cap."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    session = model.start_session(src_ids)
    out: list[int] = []
    for _ in range(max_len):
        token = int(np.argmax(session.logprobs()))
        if token == EOS_ID:
            break
        out.append(token)
        session = session.advanced(token)
    return out


def beam_decode(model, src_ids, cfg: BeamConfig) -> list[int]:
    """Width-limited best-first search over full token expansions.

    Each round ranks every one-token extension of the live hypotheses and
    keeps the top ``beam_width`` overall; EOS extensions among them move to
    the finished pool (never dropped afterwards), the rest stay live.
    That makes width 1 trace greedy decoding step for step.  Live
    hypotheses that can no longer beat the best finished score are pruned
    (per-step log-probabilities are nonpositive, so scores only fall).
    The answer maximizes score over length^alpha among finished
    hypotheses, falling back to the best live one at the cap.
    """
    root = Hypothesis((), 0.0, False, model.start_session(src_ids))
    active = [root]
    finished: list[Hypothesis] = []
    for _ in range(cfg.max_len):
        if not active:
            break
        candidates: list[Hypothesis] = []
        for hyp in active:
            logprobs = hyp.session.logprobs()
            for token in range(logprobs.shape[0]):
                score = hyp.score + float(logprobs[token])
                if token == EOS_ID:
                    candidates.append(Hypothesis(hyp.ids, score, True, None))
                else:
                    candidates.append(
                        Hypothesis(hyp.ids + (token,), score, False, (hyp.session, token))
                    )
        candidates.sort(key=lambda h: (-h.score, len(h.ids), h.ids))
        next_active: list[Hypothesis] = []
        for cand in candidates[: cfg.beam_width]:
            if cand.finished:
                finished.append(cand)
            else:
                session, token = cand.session
                next_active.append(
                    Hypothesis(cand.ids, cand.score, False, session.advanced(token))
                )
        if cfg.length_norm_alpha == 0.0 and finished:
            best_done = max(h.score for h in finished)
            next_active = [h for h in next_active if h.score > best_done]
        active = next_active
    pool = finished if finished else active
    if not pool:
        return []
    alpha = cfg.length_norm_alpha
    best = min(pool, key=lambda h: (-h.ranking_key(alpha), len(h.ids), h.ids))
    return list(best.ids)
