"""Scaled dot-product attention, multi-head attention and attention over parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import DegenerateRowError, DimensionError
from .tensor import Tensor, matmul, mul, reshape, softmax_rows, swapaxes


@dataclass(frozen=True)
class AttentionMask:
    """Boolean ``allowed[..., q, k]`` matrix (True = may attend)."""

    kind: str
    allowed: np.ndarray | None

    def __post_init__(self):
        if self.allowed is not None and not self.allowed.any(axis=-1).all():
            raise DegenerateRowError(f"{self.kind} mask has a query row with no allowed key")

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        if self.allowed is None:
            return other
        if other.allowed is None:
            return self
        return AttentionMask("combined", np.logical_and(self.allowed, other.allowed))


NO_MASK = AttentionMask("none", None)


def causal_mask(n: int) -> AttentionMask:
    if n < 1:
        raise DimensionError("causal mask needs n >= 1")
    return AttentionMask("causal", np.tril(np.ones((n, n), dtype=bool)))


def padding_mask(pad: np.ndarray, n_q: int) -> AttentionMask:
    """Mask out key positions where ``pad`` is True.

    ``pad`` is ``[n_k]`` or ``[B, n_k]``; the result is ``[n_q, n_k]`` or
    ``[B, n_q, n_k]``.
    """
    pad = np.asarray(pad, dtype=bool)
    allowed = np.broadcast_to(~pad[..., None, :], pad.shape[:-1] + (n_q, pad.shape[-1]))
    return AttentionMask("padding", np.ascontiguousarray(allowed))


def _allowed(mask) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, AttentionMask):
        return mask.allowed
    return np.asarray(mask, dtype=bool)


def scaled_dot_product_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Returns ``(output, weights)``. Disallowed logits become -inf before the
    softmax, so their weights are exactly zero.
    """
    d_k = Q.shape[-1]
    if K.shape[-1] != d_k:
        raise DimensionError(f"query/key depth mismatch: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"key/value count mismatch: {K.shape} vs {V.shape}")
    allowed = _allowed(mask)
    if allowed is not None and allowed.shape[-2:] != (Q.shape[-2], K.shape[-2]):
        raise DimensionError(f"mask {allowed.shape} does not fit {Q.shape[-2]}x{K.shape[-2]} logits")
    scores = mul(matmul(Q, swapaxes(K, -1, -2)), 1.0 / math.sqrt(d_k))
    weights = softmax_rows(scores, allowed)
    return matmul(weights, V), weights


# ---------------------------------------------------------------- multi-head


@dataclass
class MultiHeadParams:
    """Per-head projections stored fused: head ``i`` owns column block ``i``.

    ``w_q``/``w_k`` are ``d_model x (h*d_k)``, ``w_v`` is ``d_model x (h*d_v)``
    and ``w_o`` is ``(h*d_v) x d_model``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    h: int

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.h

    @property
    def d_v(self) -> int:
        return self.w_v.shape[1] // self.h

    def head(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(W_Q[i], W_K[i], W_V[i]) as plain arrays."""
        dk, dv = self.d_k, self.d_v
        return (
            self.w_q.data[:, i * dk : (i + 1) * dk],
            self.w_k.data[:, i * dk : (i + 1) * dk],
            self.w_v.data[:, i * dv : (i + 1) * dv],
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


def _split_heads(x: Tensor, h: int) -> Tensor:
    # [..., n, h*d] -> [..., h, n, d]
    *lead, n, hd = x.shape
    return swapaxes(reshape(x, (*lead, n, h, hd // h)), -3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., h, n, d] -> [..., n, h*d]
    *lead, h, n, d = x.shape
    return reshape(swapaxes(x, -3, -2), (*lead, n, h * d))


def _head_mask(mask):
    allowed = _allowed(mask)
    if allowed is None or allowed.ndim < 3:
        return allowed
    return allowed[..., None, :, :]


def multi_head_attention(p: MultiHeadParams, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask=None):
    """Concat(head_1..head_h) W_O with head_i = Attention(q W_Q[i], k W_K[i], v W_V[i]).

    Inputs are ``[n, d_model]`` or ``[B, n, d_model]``; returns the output and
    the weights ``[(B,) h, n_q, n_k]``.
    """
    d_model = p.w_q.shape[0]
    for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
        if t.shape[-1] != d_model:
            raise DimensionError(f"{name} input width {t.shape[-1]} != d_model {d_model}")
    Q = _split_heads(matmul(q_in, p.w_q), p.h)
    K = _split_heads(matmul(k_in, p.w_k), p.h)
    V = _split_heads(matmul(v_in, p.w_v), p.h)
    heads, weights = scaled_dot_product_attention(Q, K, V, _head_mask(mask))
    return matmul(_merge_heads(heads), p.w_o), weights


# ---------------------------------------------------------------- attention over parameters


@dataclass
class AopParams:
    """Attention-over-parameters sublayer: trainable key/value banks per head.

    ``keys`` is ``h_p x n_p x d_pk``, ``values`` is ``h_p x n_p x d_pv``;
    ``w_q`` is ``d_model x (h_p*d_pk)`` and ``w_o`` is ``(h_p*d_pv) x d_model``.
    """

    w_q: Tensor
    keys: Tensor
    values: Tensor
    w_o: Tensor

    @property
    def h(self) -> int:
        return self.keys.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_q": self.w_q, "keys": self.keys, "values": self.values, "w_o": self.w_o}


def attention_over_parameters(p: AopParams, x: Tensor, d_model: int | None = None):
    """Multi-head attention whose keys/values are the banks scaled by sqrt(d_model).

    Position-wise: each input row attends to the same banks independently.
    """
    d_model = x.shape[-1] if d_model is None else d_model
    if p.w_q.shape[0] != d_model or x.shape[-1] != d_model:
        raise DimensionError(f"AOP expects width {p.w_q.shape[0]}, got {x.shape[-1]}")
    if p.w_q.shape[1] != p.h * p.keys.shape[2]:
        raise DimensionError("AOP query projection does not match key bank depth")
    scale = math.sqrt(d_model)
    Q = _split_heads(matmul(x, p.w_q), p.h)
    heads, weights = scaled_dot_product_attention(Q, mul(p.keys, scale), mul(p.values, scale))
    return matmul(_merge_heads(heads), p.w_o), weights


def aop_parameter_count(h_p: int, d_pk: int, d_pv: int, n_p: int, d_model: int) -> int:
    """Banks plus query and output projections; no biases."""
    return h_p * n_p * (d_pk + d_pv) + d_model * h_p * d_pk + h_p * d_pv * d_model


def matched_aop_banks(target: int, h_p: int, d_pk: int, d_pv: int, d_model: int) -> int:
    """Bank size ``n_p`` whose AOP parameter count is closest to ``target`` (ties: smaller)."""
    proj = aop_parameter_count(h_p, d_pk, d_pv, 0, d_model)
    per = h_p * (d_pk + d_pv)
    lo = max(1, (target - proj) // per)
    return min((lo, lo + 1), key=lambda n: (abs(aop_parameter_count(h_p, d_pk, d_pv, n, d_model) - target), n))


# ---------------------------------------------------------------- scaling-factor statistics


@dataclass(frozen=True)
class DotProductStats:
    d_k: int
    samples: int
    raw_mean: float
    raw_var: float
    scaled_mean: float
    scaled_var: float

    @property
    def mean_stderr(self) -> float:
        """Standard error of the raw mean, using the sample variance."""
        return math.sqrt(self.raw_var / self.samples)


def dot_product_variance_experiment(d_k: int, samples: int = 10000, seed: int = 0) -> DotProductStats:
    """Empirical moments of q.k and q.k/sqrt(d_k) for iid standard-normal q, k."""
    if samples < 1000:
        raise DimensionError("need at least 1000 samples")
    gen = rngmod.stream(seed, "dot-product-variance", d_k)
    q = gen.standard_normal((samples, d_k))
    k = gen.standard_normal((samples, d_k))
    raw = np.einsum("ij,ij->i", q, k)
    scaled = raw / math.sqrt(d_k)
    return DotProductStats(
        d_k=d_k,
        samples=samples,
        raw_mean=float(raw.mean()),
        raw_var=float(raw.var(ddof=1)),
        scaled_mean=float(scaled.mean()),
        scaled_var=float(scaled.var(ddof=1)),
    )
