"""Optimiser, learning-rate schedule, label-smoothed loss and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import rng as rngmod
from .checkpoint import save_checkpoint
from .data import Batch
from .errors import ConfigError, ContractError, DegenerateBatchError, DimensionError, NonFiniteError
from .model import PAD, Transformer, TransformerParams
from .tensor import Tensor, backward, log_softmax, mul, tsum

log = logging.getLogger(__name__)


def learning_rate(step: int, d_model: int, warmup_steps: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError(f"the schedule is 1-indexed; got step {step}")
    if warmup_steps < 1:
        raise ConfigError("warmup_steps must be >= 1")
    # step * warmup^-1.5 written so both branches agree bit-for-bit at step == warmup
    return d_model**-0.5 * min(step**-0.5, (step / warmup_steps) * warmup_steps**-0.5)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: TransformerParams | dict[str, Tensor],
    grads: dict[str, np.ndarray] | None,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``grads`` defaults to each parameter's ``.grad`` (missing = zero). Every
    gradient is checked before anything is modified.
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    items = list(params.items())
    g_all = {}
    for name, p in items:
        g = grads.get(name) if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
        g_all[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in items:
        g = g_all[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- loss


def smoothed_targets(targets, vocab_size: int, eps_ls: float, pad_id: int = PAD) -> np.ndarray:
    """Target distributions: 1-eps on the target, eps/(V-2) on every other non-pad class.

    Rows for pad targets are all zero.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if not 0.0 <= eps_ls < 1.0:
        raise ConfigError("eps_ls must lie in [0, 1)")
    if eps_ls > 0 and vocab_size < 3:
        raise ConfigError("label smoothing needs at least 3 classes")
    q = np.full(targets.shape + (vocab_size,), eps_ls / (vocab_size - 2) if eps_ls > 0 else 0.0)
    q[..., pad_id] = 0.0
    np.put_along_axis(q, targets[..., None], 1.0 - eps_ls, axis=-1)
    q[targets == pad_id] = 0.0
    return q


def label_smoothed_loss(logits: Tensor, targets, eps_ls: float, pad_id: int = PAD) -> Tensor:
    """Mean over non-pad positions of cross-entropy against :func:`smoothed_targets`."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise DimensionError("target id outside the logit range")
    count = int((targets != pad_id).sum())
    if count == 0:
        raise DegenerateBatchError("every target position is padding")
    q = smoothed_targets(targets, logits.shape[-1], eps_ls, pad_id)
    return mul(tsum(mul(log_softmax(logits), q)), -1.0 / count)


def batch_loss(model: Transformer, batch: Batch, train: bool = False, rng=None) -> Tensor:
    logits = model.forward(batch.src, batch.tgt_in, train=train, rng=rng)
    return label_smoothed_loss(logits, batch.tgt_out, model.config.eps_ls)


# ---------------------------------------------------------------- loop


@dataclass(frozen=True)
class TrainConfig:
    warmup_steps: int = 4000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    token_budget: int = 512
    total_steps: int = 1000
    checkpoint_interval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1")
        if self.token_budget < 1:
            raise ConfigError("token_budget must be >= 1")


@dataclass
class TrainResult:
    model: Transformer
    checkpoints: list[Path]
    metrics: list[str]
    state: AdamState


def format_metrics(step: int, loss: float, lr: float, tokens_per_sec: float) -> str:
    """One tab-separated metrics line; only the last field depends on wall time."""
    return f"{step}\t{loss!r}\t{lr!r}\t{tokens_per_sec:.1f}"


def train_loop(
    model: Transformer,
    batches: Iterable[Batch],
    cfg: TrainConfig,
    out_dir=None,
    metrics_path=None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimiser steps over ``batches``.

    A checkpoint is written before the first step (``ckpt-000000.atnl``),
    every ``checkpoint_interval`` steps and after the last step, when
    ``out_dir`` is given. ``batches`` should be endless (see
    :func:`atnl.data.batch_stream`); a finite iterable is restarted when
    exhausted.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    dropout_rng = rngmod.stream(cfg.seed, "dropout")
    state = AdamState()
    ckpts: list[Path] = []
    metrics: list[str] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def checkpoint(step):
        if out_dir is not None:
            ckpts.append(save_checkpoint(out_dir / f"ckpt-{step:06d}.atnl", model))

    try:
        checkpoint(0)
        stream = _cycle(batches)
        for step in range(1, cfg.total_steps + 1):
            batch = next(stream)
            t0 = time.perf_counter()
            model.params.zero_grad()
            loss = batch_loss(model, batch, train=True, rng=dropout_rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at step {step}")
            backward(loss)
            lr = learning_rate(step, model.config.d_model, cfg.warmup_steps)
            adam_step(model.params, None, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            elapsed = max(time.perf_counter() - t0, 1e-9)
            line = format_metrics(step, value, lr, (batch.src_tokens + batch.tgt_tokens) / elapsed)
            metrics.append(line)
            if sink:
                sink.write(line + "\n")
            log.debug(line)
            if step % cfg.checkpoint_interval == 0 or step == cfg.total_steps:
                checkpoint(step)
    finally:
        if sink:
            sink.close()
    model.params.zero_grad()
    return TrainResult(model, ckpts, metrics, state)


def _cycle(batches: Iterable[Batch]) -> Iterator[Batch]:
    """Yield from ``batches``, replaying what was seen once it runs dry."""
    seen = []
    for b in batches:
        seen.append(b)
        yield b
    if not seen:
        raise DegenerateBatchError("no batches to train on")
    while True:
        yield from seen
