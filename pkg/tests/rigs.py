"""Hand-built next-token models and an exhaustive decoding oracle."""

import itertools

import numpy as np

from atnl.decoding import length_penalty
from atnl.model import BOS, EOS


class TableModel:
    """Next-token log-probabilities drawn per full prefix from Dirichlet(1).

    PAD and BOS get zero mass, so every step chooses between EOS and the
    content ids ``3 .. vocab-1``. Distributions are created lazily but
    deterministically from ``seed``.
    """

    def __init__(self, vocab: int, seed: int, concentration: float = 1.0):
        self.vocab = vocab
        self._gen = np.random.default_rng(seed)
        self._conc = concentration
        self._table: dict[tuple[int, ...], np.ndarray] = {}

    def logprobs(self, prefix) -> np.ndarray:
        key = tuple(int(t) for t in prefix)
        if key not in self._table:
            p = np.zeros(self.vocab)
            p[EOS:] = self._gen.dirichlet([self._conc] * (self.vocab - EOS))
            with np.errstate(divide="ignore"):
                self._table[key] = np.log(p)
        return self._table[key]

    def scorer(self, src):
        return lambda prefixes: np.array([self.logprobs(p) for p in prefixes])


class FixedModel:
    """Same distribution at every step."""

    def __init__(self, logprobs):
        self.row = np.asarray(logprobs, dtype=np.float64)

    def scorer(self, src):
        return lambda prefixes: np.tile(self.row, (len(prefixes), 1))


def rigged(index: int):
    """The ``index``-th rigged instance: (model, horizon)."""
    gen = np.random.default_rng(1000 + index)
    vocab = int(gen.integers(4, 7))
    horizon = int(gen.integers(1, 5))
    return TableModel(vocab, index), horizon


def exhaustive_best(model, cap: int, alpha: float):
    """Best (score, tokens) over every EOS-terminated sequence of length <= cap."""
    best = None
    content = range(3, model.vocab)
    for n in range(1, cap + 1):
        for body in itertools.product(content, repeat=n - 1):
            toks = (BOS, *body, EOS)
            lp = sum(model.logprobs(toks[:i])[toks[i]] for i in range(1, len(toks)))
            score = lp / length_penalty(n, alpha)
            if best is None or score > best[0]:
                best = (score, list(body))
    return best
