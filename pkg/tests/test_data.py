from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atnl.data import (
    Vocabulary,
    apply_task,
    batch_by_length,
    batch_stream,
    disjoint_from,
    make_batch,
    pair_footprint,
    plan_batches,
    read_pairs,
    synth_task,
    write_pairs,
)
from atnl.errors import ConfigError, OversizePairError, VocabularyError
from atnl.model import BOS, EOS, PAD


def test_task_examples():
    assert apply_task("copy", [5, 7, 9]) == [5, 7, 9]
    assert apply_task("reverse", [5, 7, 9]) == [9, 7, 5]
    assert apply_task("sort", [9, 5, 7]) == [5, 7, 9]


@pytest.mark.parametrize("kind", ["copy", "reverse", "sort"])
def test_synth_task_contract(kind):
    pairs = synth_task(kind, 16, (3, 10), 200, seed=4)
    assert len(pairs) == 200
    for src, tgt in pairs:
        assert 3 <= len(src) <= 10 and all(3 <= t < 16 for t in src)
        assert tgt == apply_task(kind, src)
    assert pairs == synth_task(kind, 16, (3, 10), 200, seed=4)
    assert pairs != synth_task(kind, 16, (3, 10), 200, seed=5)


@pytest.mark.parametrize(
    "args", [("shuffle", 16, (3, 5)), ("copy", 3, (3, 5)), ("copy", 16, (0, 5)), ("copy", 16, (6, 5)), ("copy", 16, (3, 600))]
)
def test_synth_task_rejects_bad_ranges(args):
    with pytest.raises(ConfigError):
        synth_task(*args, count=5)


def test_disjoint_from_drops_shared_sources():
    train = [([3, 4], [3, 4]), ([5], [5])]
    held = [([3, 4], [3, 4]), ([6], [6])]
    assert disjoint_from(held, train) == [([6], [6])]


# ---------------------------------------------------------------- vocabulary


def test_synthetic_vocabulary():
    v = Vocabulary.synthetic(16)
    assert len(v) == 16 and v.symbols[:3] == ["a", "b", "c"]
    assert v.encode(["a", "m"]) == [3, 15]
    assert v.token(PAD) == "<pad>" and v.token(BOS) == "<s>" and v.token(EOS) == "</s>"
    big = Vocabulary.synthetic(40)
    assert big.symbols[26] == "t26"
    with pytest.raises(VocabularyError):
        v.encode(["zz"])
    with pytest.raises(VocabularyError):
        v.decode([16])
    with pytest.raises(ConfigError):
        Vocabulary(["a", "a"])
    with pytest.raises(ConfigError):
        Vocabulary(["<s>"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(Vocabulary.synthetic(30).symbols), max_size=20))
def test_vocabulary_round_trip(symbols):
    v = Vocabulary.synthetic(30)
    ids = v.encode(symbols)
    assert v.decode(ids) == symbols
    assert all(i >= 3 for i in ids)


def test_pair_file_round_trip(tmp_path):
    v = Vocabulary.synthetic(10)
    pairs = synth_task("reverse", 10, (1, 4), 12, seed=2)
    path = tmp_path / "pairs.tsv"
    write_pairs(path, pairs, v)
    again, v2 = read_pairs(path, v)
    assert again == pairs and v2 is v
    inferred, v3 = read_pairs(path)
    assert [(v3.decode(s), v3.decode(t)) for s, t in inferred] == [(v.decode(s), v.decode(t)) for s, t in pairs]
    (tmp_path / "bad.tsv").write_text("a b c\n")
    with pytest.raises(ConfigError):
        read_pairs(tmp_path / "bad.tsv")


# ---------------------------------------------------------------- batching


def test_make_batch_layout():
    b = make_batch([([3, 4, 5], [5, 4, 3]), ([6], [6])])
    assert b.src.tolist() == [[3, 4, 5], [6, PAD, PAD]]
    assert b.tgt_in.tolist() == [[BOS, 5, 4, 3], [BOS, 6, PAD, PAD]]
    assert b.tgt_out.tolist() == [[5, 4, 3, EOS], [6, EOS, PAD, PAD]]
    assert b.src_tokens == 4 and b.tgt_tokens == 6 and b.size == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_batch_shift_invariants(seed):
    pairs = synth_task("reverse", 12, (1, 7), 10, seed=seed)
    b = make_batch(pairs)
    assert np.all(b.tgt_in[:, 0] == BOS)
    for i, (_, t) in enumerate(pairs):
        assert b.tgt_out[i, len(t)] == EOS
        assert b.tgt_in[i, 1 : len(t) + 1].tolist() == b.tgt_out[i, : len(t)].tolist()


def test_budget_of_one_footprint_gives_singletons():
    pairs = synth_task("copy", 16, (4, 4), 9, seed=1)
    budget = max(pair_footprint(pairs[0]))
    assert all(b.size == 1 for b in batch_by_length(pairs, budget))


def test_uniform_lengths_with_four_footprints():
    pairs = synth_task("copy", 16, (5, 5), 12, seed=1)
    budget = 4 * max(pair_footprint(pairs[0]))
    assert [b.size for b in batch_by_length(pairs, budget)] == [4, 4, 4]


def test_oversize_pair():
    with pytest.raises(OversizePairError):
        plan_batches([([3] * 10, [3] * 10)], 8)
    with pytest.raises(OversizePairError):
        plan_batches([([3] * 4, [3] * 8)], 8)


@pytest.mark.parametrize("budget", [16, 64, 512])
def test_epoch_covers_every_pair_once(budget):
    pairs = synth_task("sort", 16, (3, 10), 500, seed=7)
    batches = batch_by_length(pairs, budget, seed=3)
    assert sum(b.src_tokens for b in batches) == sum(len(s) for s, _ in pairs)
    assert sum(b.tgt_tokens for b in batches) == sum(len(t) + 1 for _, t in pairs)
    seen = Counter(tuple(row[row != PAD]) for b in batches for row in b.src)
    assert seen == Counter(tuple(s) for s, _ in pairs)
    for b in batches:
        assert b.src.size <= budget and b.tgt_out.size <= budget
        assert len(set((b.src != PAD).sum(axis=1))) == 1


def test_padding_fraction_at_most_half():
    for kind in ("copy", "reverse", "sort"):
        pairs = synth_task(kind, 16, (3, 10), 1000, seed=0)
        for b in batch_by_length(pairs, 512):
            assert (b.src == PAD).mean() <= 0.5 and (b.tgt_out == PAD).mean() <= 0.5


def test_batch_order_is_seeded():
    pairs = synth_task("copy", 16, (3, 10), 300, seed=0)
    a = [b.src.tolist() for b in batch_by_length(pairs, 64, seed=1)]
    b = [b.src.tolist() for b in batch_by_length(pairs, 64, seed=1)]
    c = [b.src.tolist() for b in batch_by_length(pairs, 64, seed=2)]
    assert a == b and a != c and sorted(map(str, a)) == sorted(map(str, c))


def test_stream_wraps_epochs():
    pairs = synth_task("copy", 16, (3, 3), 8, seed=0)
    n = len(plan_batches(pairs, 12))
    stream = batch_stream(pairs, 12, seed=0)
    first = [next(stream) for _ in range(n)]
    second = [next(stream) for _ in range(n)]
    key = lambda bs: sorted(b.src.tolist() for b in bs)
    assert key(first) == key(second)
    with pytest.raises(ConfigError):
        next(batch_stream([], 12))
