"""Greedy and beam-search decoding.

Decoders talk to models through a *scorer*: ``model.scorer(src)`` returns a
function mapping a list of equal-length, BOS-initial prefixes to an array of
next-token log-probabilities ``[len(prefixes), vocab]``. Any object with that
method can be decoded, which is how the tests drive hand-built models.

Lengths count generated tokens (EOS included, BOS excluded); generation stops
after ``len(src) + max_extra`` tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import BOS, EOS


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha."""
    if length < 1:
        raise ContractError("length penalty is defined for length >= 1")
    return ((5.0 + length) / 6.0) ** alpha


@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False
    alpha: float = 0.0

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    @property
    def score(self) -> float:
        return self.logprob / length_penalty(max(self.length, 1), self.alpha)

    def output(self) -> list[int]:
        """Generated tokens with BOS and EOS removed."""
        toks = list(self.tokens[1:])
        if toks and toks[-1] == EOS:
            toks.pop()
        return toks


def _check(src_tokens, max_extra: int) -> int:
    if len(src_tokens) == 0:
        raise ContractError("cannot decode an empty source")
    if max_extra < 0:
        raise ContractError("max_extra must be non-negative")
    return len(src_tokens) + max_extra


def greedy_decode(model, src_tokens, max_extra: int = 50, eos: int = EOS, bos: int = BOS) -> list[int]:
    """Argmax decoding (ties go to the lowest token id)."""
    cap = _check(src_tokens, max_extra)
    score = model.scorer(src_tokens)
    seq = [bos]
    for _ in range(cap):
        tok = int(np.argmax(score([seq])[0]))
        if tok == eos:
            break
        seq.append(tok)
    return seq[1:]


def beam_search(
    model,
    src_tokens,
    beam_size: int = 4,
    alpha: float = 0.6,
    max_extra: int = 50,
    eos: int = EOS,
    bos: int = BOS,
    early_stop: bool = True,
) -> tuple[list[int], float]:
    """Length-penalised beam search; returns ``(tokens, score)``.

    Each step ranks every one-token extension of the live beam by cumulative
    log-probability and keeps the best ``beam_size``; extensions ending in EOS
    leave the beam for the finished pool. With ``early_stop`` the search ends
    once no live hypothesis can still beat the best finished score.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be >= 1")
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    cap = _check(src_tokens, max_extra)
    score = model.scorer(src_tokens)
    cap_penalty = length_penalty(cap, alpha)
    width = 2 * beam_size

    live = [BeamHypothesis((bos,), 0.0, alpha=alpha)]
    finished: list[BeamHypothesis] = []
    best: BeamHypothesis | None = None

    for _ in range(cap):
        logp = score([h.tokens for h in live])
        cands = []
        for h, row in zip(live, logp):
            # a token outside the per-hypothesis top 2k can never make the global top k
            top = np.argsort(-row, kind="stable")[:width]
            for tok in top:
                lp = float(row[tok])
                if lp == -math.inf:
                    break
                cands.append((h.logprob + lp, -lp, h.tokens + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        live = []
        for lp, _, toks in cands[:beam_size]:
            hyp = BeamHypothesis(toks, lp, toks[-1] == eos, alpha)
            if hyp.finished:
                finished.append(hyp)
                if best is None or _better(hyp, best):
                    best = hyp
            else:
                live.append(hyp)
        if not live:
            break
        if early_stop and best is not None:
            # extending only lowers logprob, and the penalty is largest at the cap
            bound = max(h.logprob for h in live) / cap_penalty
            if bound < best.score:
                break

    if best is None:
        if not live:
            return [], -math.inf
        best = min(live, key=lambda h: (-h.logprob, h.tokens))
    return best.output(), best.score


def _better(a: BeamHypothesis, b: BeamHypothesis) -> bool:
    return (-a.score, a.tokens) < (-b.score, b.tokens)


def token_accuracy(model, pairs, max_extra: int = 50) -> float:
    """Position-wise agreement of greedy outputs with references.

    Each pair contributes ``max(len(output), len(reference))`` positions, so
    missing and surplus tokens both count as errors.
    """
    hits = total = 0
    for src, ref in pairs:
        out = greedy_decode(model, src, max_extra)
        hits += sum(a == b for a, b in zip(out, ref))
        total += max(len(out), len(ref))
    return hits / total if total else 1.0
