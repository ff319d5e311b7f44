import math
from dataclasses import replace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atnl.checks import TINY
from atnl.data import batch_stream, make_batch, synth_task
from atnl.errors import ContractError, DegenerateBatchError, DimensionError, NonFiniteError
from atnl.model import PAD, Transformer
from atnl.tensor import Tensor, backward
from atnl.training import (
    AdamState,
    TrainConfig,
    adam_step,
    format_metrics,
    label_smoothed_loss,
    learning_rate,
    smoothed_targets,
    train_loop,
)


def mp_rate(step, d_model, warmup):
    mpmath.mp.dps = 50
    s, d, w = mpmath.mpf(step), mpmath.mpf(d_model), mpmath.mpf(warmup)
    return d ** mpmath.mpf(-0.5) * min(s ** mpmath.mpf(-0.5), s * w ** mpmath.mpf(-1.5))


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("step", [1, 2000, 4000, 8000, 100000])
def test_learning_rate_matches_high_precision(step):
    got = learning_rate(step, 512, 4000)
    ref = mp_rate(step, 512, 4000)
    assert abs(got - float(ref)) / float(ref) < 1e-12


def test_learning_rate_published_examples():
    assert abs(learning_rate(4000, 512, 4000) - 6.988e-4) < 5e-8
    assert abs(learning_rate(1, 512, 4000) - 1.747e-7) < 5e-11


def test_learning_rate_shape():
    rates = [learning_rate(s, 512, 4000) for s in range(1, 12001)]
    assert int(np.argmax(rates)) + 1 == 4000
    assert all(a < b for a, b in zip(rates[:3999], rates[1:4000]))
    assert all(a > b for a, b in zip(rates[3999:], rates[4000:]))


@pytest.mark.parametrize("warmup", [1, 7, 400, 1000, 4000])
def test_learning_rate_continuous_at_warmup(warmup):
    assert learning_rate(warmup, 64, warmup) == 64**-0.5 * warmup**-0.5


def test_learning_rate_is_one_indexed():
    with pytest.raises(ContractError):
        learning_rate(0, 512, 4000)


# ---------------------------------------------------------------- Adam


def scalar(v):
    return {"theta": Tensor(np.array([v]), requires_grad=True)}


def test_adam_zero_gradient_is_identity():
    p = scalar(1.5)
    adam_step(p, {"theta": np.zeros(1)}, AdamState(), 0.1)
    assert p["theta"].data[0] == 1.5


def test_adam_first_step_hand_value():
    p = scalar(0.0)
    state = adam_step(p, {"theta": np.ones(1)}, AdamState(), 1.0)
    assert abs(p["theta"].data[0] - (-1.0 / (1.0 + 1e-9))) < 1e-15
    assert state.step == 1


def test_adam_constant_gradient_moves_by_lr():
    p = scalar(0.0)
    state = AdamState()
    for _ in range(500):
        before = p["theta"].data[0]
        adam_step(p, {"theta": np.array([-3.0])}, state, 0.01)
    assert abs((p["theta"].data[0] - before) - 0.01) < 1e-9


def test_adam_zero_lr_advances_moments_only():
    p = scalar(2.0)
    state = adam_step(p, {"theta": np.array([4.0])}, AdamState(), 0.0)
    assert p["theta"].data[0] == 2.0
    assert state.step == 1 and state.m["theta"][0] == pytest.approx(0.4) and state.v["theta"][0] > 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_adam_second_moment_nonnegative(gs):
    p = scalar(0.0)
    state = AdamState()
    for i, g in enumerate(gs, 1):
        adam_step(p, {"theta": np.array([g])}, state, 1e-3)
        assert state.v["theta"][0] >= 0 and state.step == i


def test_adam_rejects_bad_gradients_before_updating():
    p = {"a": Tensor(np.zeros(2), requires_grad=True), "b": Tensor(np.zeros(2), requires_grad=True)}
    with pytest.raises(NonFiniteError, match="b"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, AdamState(), 0.1)
    assert np.all(p["a"].data == 0)
    with pytest.raises(DimensionError):
        adam_step(p, {"a": np.ones(3)}, AdamState(), 0.1)
    with pytest.raises(ContractError):
        adam_step(p, None, AdamState(), -1.0)


# ---------------------------------------------------------------- label smoothing


def brute_force_loss(logits, targets, eps, pad=PAD):
    V = logits.shape[-1]
    total, count = 0.0, 0
    for row, t in zip(logits, targets):
        if t == pad:
            continue
        lse = math.log(sum(math.exp(x) for x in row))
        for c in range(V):
            if c == t:
                q = 1 - eps
            elif c == pad:
                q = 0.0
            else:
                q = eps / (V - 2)
            total -= q * (row[c] - lse)
        count += 1
    return total / count


def test_smoothing_matches_brute_force_oracle():
    logits = np.array([[0.5, -1.0, 2.0, 0.3, 0.0], [1.0, 1.0, -2.0, 0.7, 3.0], [0.0, 0.1, 0.2, 0.3, 0.4]])
    targets = np.array([2, 4, PAD])
    got = label_smoothed_loss(Tensor(logits), targets, 0.1).item()
    assert abs(got - brute_force_loss(logits, targets, 0.1)) < 1e-10


def test_unsmoothed_loss_is_nll():
    logits = np.random.default_rng(0).normal(size=(4, 6))
    targets = np.array([1, 3, 5, 2])
    ref = -np.mean([logits[i, t] - np.log(np.exp(logits[i]).sum()) for i, t in enumerate(targets)])
    assert abs(label_smoothed_loss(Tensor(logits), targets, 0.0).item() - ref) < 1e-12
    assert abs(label_smoothed_loss(Tensor(np.zeros((3, 7))), np.array([3, 4, 5]), 0.0).item() - math.log(7)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 0.999), st.integers(3, 12), st.integers(0, 10_000))
def test_smoothed_distribution_sums_to_one(eps, V, seed):
    targets = np.random.default_rng(seed).integers(1, V, 5)
    q = smoothed_targets(targets, V, eps)
    np.testing.assert_allclose(q.sum(-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(q[:, PAD] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_loss_shift_invariant(seed, c):
    gen = np.random.default_rng(seed)
    logits = gen.normal(size=(4, 6))
    targets = gen.integers(1, 6, 4)
    a = label_smoothed_loss(Tensor(logits), targets, 0.1).item()
    b = label_smoothed_loss(Tensor(logits + c), targets, 0.1).item()
    assert abs(a - b) < 1e-10


def test_all_pad_batch_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        label_smoothed_loss(Tensor(np.zeros((2, 5))), np.array([PAD, PAD]), 0.1)


def test_pad_rows_contribute_no_gradient():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 5)), requires_grad=True)
    backward(label_smoothed_loss(x, np.array([2, PAD, 4]), 0.1))
    assert np.all(x.grad[1] == 0) and np.any(x.grad[0] != 0)


# ---------------------------------------------------------------- loop


def copy_pairs(n=400, seed=0):
    return synth_task("copy", TINY.vocab_size, (3, 6), n, seed=seed)


def test_zero_steps_writes_only_initial_checkpoint(tmp_path):
    model = Transformer(TINY)
    res = train_loop(model, batch_stream(copy_pairs(20), 64), TrainConfig(total_steps=0), tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt-000000.atnl"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt-000000.atnl"]
    assert res.metrics == []


def test_checkpoint_cadence(tmp_path):
    cfg = TrainConfig(total_steps=7, checkpoint_interval=3, warmup_steps=10)
    res = train_loop(Transformer(TINY), batch_stream(copy_pairs(20), 64), cfg, tmp_path)
    assert [p.name for p in res.checkpoints] == [f"ckpt-{s:06d}.atnl" for s in (0, 3, 6, 7)]


def test_identical_seeds_give_identical_metrics(tmp_path):
    def run():
        cfg = TrainConfig(total_steps=15, warmup_steps=10, seed=7, token_budget=64)
        res = train_loop(Transformer(TINY, seed=7), batch_stream(copy_pairs(60), 64, seed=7), cfg)
        return [line.rsplit("\t", 1)[0] for line in res.metrics], res.model

    (a, ma), (b, mb) = run(), run()
    assert a == b
    assert all(np.array_equal(ma.params[k].data, mb.params[k].data) for k in ma.params)


def test_metrics_line_format():
    line = format_metrics(3, 1.25, 0.001, 1234.567)
    assert line == "3\t1.25\t0.001\t1234.6"


def test_finite_batch_list_is_replayed():
    batch = make_batch(copy_pairs(4))
    res = train_loop(Transformer(TINY), [batch], TrainConfig(total_steps=3, warmup_steps=10))
    assert len(res.metrics) == 3 and res.state.step == 3


def test_non_finite_loss_aborts():
    model = Transformer(TINY)
    model.params["embedding"].data[:] = np.nan
    with pytest.raises(NonFiniteError):
        train_loop(model, batch_stream(copy_pairs(10), 64), TrainConfig(total_steps=2))


def test_loss_decreases_on_copy_task():
    cfg = replace(TINY, p_drop=0.1)
    res = train_loop(
        Transformer(cfg, seed=0),
        batch_stream(copy_pairs(2000), 128),
        TrainConfig(total_steps=200, warmup_steps=100, token_budget=128),
    )
    losses = [float(line.split("\t")[1]) for line in res.metrics]
    assert np.mean(losses[180:200]) < np.mean(losses[:20])


def test_single_batch_is_fitted():
    batch = make_batch(copy_pairs(8, seed=3))
    res = train_loop(Transformer(replace(TINY, p_drop=0.0)), [batch], TrainConfig(total_steps=200, warmup_steps=50))
    losses = [float(line.split("\t")[1]) for line in res.metrics]
    assert losses[-1] < losses[0]
