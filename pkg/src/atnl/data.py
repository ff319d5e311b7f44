"""Synthetic transduction tasks, vocabularies and length-bucketed batching."""

from __future__ import annotations

import string
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, OversizePairError, VocabularyError
from .model import BOS, EOS, PAD

RESERVED = ("<pad>", "<s>", "</s>")


class Vocabulary:
    """Bijection between symbols and ids; ids 0/1/2 are PAD/BOS/EOS."""

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ConfigError("duplicate symbols in vocabulary")
        clash = set(symbols) & set(RESERVED)
        if clash:
            raise ConfigError(f"symbols collide with reserved tokens: {sorted(clash)}")
        self.symbols = symbols
        self._ids = {s: i + len(RESERVED) for i, s in enumerate(symbols)}

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        """Letters ``a``..``z`` first, then ``t26``, ``t27``, ... as needed."""
        n = vocab_size - len(RESERVED)
        if n < 1:
            raise ConfigError(f"vocab_size {vocab_size} leaves no room for symbols")
        letters = list(string.ascii_lowercase)
        return cls(letters[:n] + [f"t{i}" for i in range(len(letters), n)])

    def __len__(self) -> int:
        return len(self.symbols) + len(RESERVED)

    def encode(self, symbols: Sequence[str]) -> list[int]:
        try:
            return [self._ids[s] for s in symbols]
        except KeyError as exc:
            raise VocabularyError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i < len(RESERVED):
                if strip:
                    continue
                out.append(RESERVED[i])
            elif i < len(self):
                out.append(self.symbols[i - len(RESERVED)])
            else:
                raise VocabularyError(f"id {i} outside vocabulary of size {len(self)}")
        return out

    def token(self, i: int) -> str:
        return self.decode([i], strip=False)[0]


# ---------------------------------------------------------------- tasks

TASKS = ("copy", "reverse", "sort")


def synth_task(kind: str, vocab_size: int, len_range: tuple[int, int], count: int, seed: int = 0, max_len: int = 512):
    """Random ``(src, tgt)`` id pairs for copy, reverse or sort."""
    if kind not in TASKS:
        raise ConfigError(f"unknown task {kind!r}; choose from {TASKS}")
    if vocab_size <= len(RESERVED):
        raise ConfigError("synthetic tasks need vocab_size > 3")
    lo, hi = len_range
    if not 1 <= lo <= hi <= max_len:
        raise ConfigError(f"length range {len_range} must satisfy 1 <= lo <= hi <= {max_len}")
    if count < 0:
        raise ConfigError("count must be non-negative")
    gen = rngmod.stream(seed, f"task-{kind}")
    pairs = []
    for _ in range(count):
        n = int(gen.integers(lo, hi + 1))
        src = [int(t) for t in gen.integers(len(RESERVED), vocab_size, n)]
        pairs.append((src, apply_task(kind, src)))
    return pairs


def disjoint_from(pairs, reference) -> list:
    """Drop every pair whose source also occurs in ``reference``."""
    seen = {tuple(s) for s, _ in reference}
    return [(s, t) for s, t in pairs if tuple(s) not in seen]


def apply_task(kind: str, src: Sequence[int]) -> list[int]:
    if kind == "copy":
        return list(src)
    if kind == "reverse":
        return list(reversed(src))
    if kind == "sort":
        return sorted(src)
    raise ConfigError(f"unknown task {kind!r}")


def read_pairs(path, vocab: Vocabulary | None = None):
    """Read ``src TAB tgt`` lines of space-separated symbols.

    Without a vocabulary one is built from the file (symbols in order of
    first appearance). Returns ``(pairs, vocab)``.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'src<TAB>tgt'")
        src, tgt = line.split("\t", 1)
        rows.append((src.split(), tgt.split()))
    if vocab is None:
        seen: dict[str, None] = {}
        for src, tgt in rows:
            for s in (*src, *tgt):
                seen.setdefault(s, None)
        vocab = Vocabulary(list(seen))
    return [(vocab.encode(s), vocab.encode(t)) for s, t in rows], vocab


def write_pairs(path, pairs, vocab: Vocabulary) -> None:
    lines = [" ".join(vocab.decode(s)) + "\t" + " ".join(vocab.decode(t)) for s, t in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def src_pad(self) -> np.ndarray:
        return self.src == PAD

    @property
    def tgt_pad(self) -> np.ndarray:
        return self.tgt_out == PAD

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def src_tokens(self) -> int:
        return int((~self.src_pad).sum())

    @property
    def tgt_tokens(self) -> int:
        return int((~self.tgt_pad).sum())


def make_batch(pairs) -> Batch:
    """Pad a list of pairs; the target gets EOS appended and a BOS-shifted copy."""
    b = len(pairs)
    ls = max(len(s) for s, _ in pairs)
    lt = max(len(t) for _, t in pairs) + 1
    src = np.full((b, ls), PAD, dtype=np.int64)
    tgt_in = np.full((b, lt), PAD, dtype=np.int64)
    tgt_out = np.full((b, lt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t) + 1] = t
    return Batch(src, tgt_in, tgt_out)


def pair_footprint(pair) -> tuple[int, int]:
    """(source tokens, target tokens incl. EOS/BOS) occupied by one pair."""
    return len(pair[0]), len(pair[1]) + 1


def plan_batches(pairs, token_budget: int) -> list[list[int]]:
    """Group pair indices by source length under a padded-token budget.

    Each group satisfies ``B * max_len <= token_budget`` separately for the
    source and the (EOS-extended) target side.
    """
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, pair in enumerate(pairs):
        s, t = pair_footprint(pair)
        if s > token_budget or t > token_budget:
            raise OversizePairError(f"pair {i} needs {max(s, t)} tokens, budget is {token_budget}")
        buckets[s].append(i)
    plan = []
    for length in sorted(buckets):
        group: list[int] = []
        max_t = 0
        for i in buckets[length]:
            t = pair_footprint(pairs[i])[1]
            new_t = max(max_t, t)
            n = len(group) + 1
            if group and (n * length > token_budget or n * new_t > token_budget):
                plan.append(group)
                group, new_t = [], t
            group.append(i)
            max_t = new_t
        if group:
            plan.append(group)
    return plan


def batch_by_length(pairs, token_budget: int = 512, seed: int = 0, epoch: int = 0) -> list[Batch]:
    """One epoch of length-bucketed batches, batch order shuffled by ``(seed, epoch)``."""
    plan = plan_batches(pairs, token_budget)
    order = rngmod.stream(seed, "batch-order", epoch).permutation(len(plan))
    return [make_batch([pairs[i] for i in plan[j]]) for j in order]


def batch_stream(pairs, token_budget: int = 512, seed: int = 0) -> Iterator[Batch]:
    """Endless stream of epochs; each epoch reshuffles the batch order."""
    if not pairs:
        raise ConfigError("cannot batch an empty corpus")
    epoch = 0
    while True:
        yield from batch_by_length(pairs, token_budget, seed, epoch)
        epoch += 1
