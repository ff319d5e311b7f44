"""Encoder-decoder Transformer built from the attention and tensor primitives."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import rng as rngmod
from .attention import (
    AopParams,
    AttentionMask,
    MultiHeadParams,
    aop_parameter_count,
    attention_over_parameters,
    causal_mask,
    multi_head_attention,
    padding_mask,
)
from .errors import ConfigError, DimensionError, LengthError, VocabularyError
from .tensor import Tensor, add, dropout, layer_norm, matmul, mul, relu, swapaxes, take_rows

PAD, BOS, EOS = 0, 1, 2


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    d_model: int = 512
    d_ff: int = 2048
    heads: int = 8
    d_k: int = 64
    d_v: int = 64
    p_drop: float = 0.1
    eps_ls: float = 0.1
    vocab_size: int = 37000
    max_len: int = 512
    pe_kind: str = "sinusoidal"
    ffn_kind: str = "relu_ffn"
    aop_heads: int = 8
    aop_d_k: int = 64
    aop_d_v: int = 64
    aop_banks: int = 1536
    tie_weights: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        ints = ("d_model", "d_ff", "heads", "d_k", "d_v", "max_len")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must leave room for PAD/BOS/EOS plus a symbol, got {self.vocab_size}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")
        if not 0.0 <= self.eps_ls < 1.0:
            raise ConfigError("eps_ls must lie in [0, 1)")
        if self.pe_kind not in ("sinusoidal", "learned"):
            raise ConfigError(f"unknown pe_kind {self.pe_kind!r}")
        if self.ffn_kind not in ("relu_ffn", "aop"):
            raise ConfigError(f"unknown ffn_kind {self.ffn_kind!r}")
        if self.ffn_kind == "aop" and min(self.aop_heads, self.aop_d_k, self.aop_d_v, self.aop_banks) < 1:
            raise ConfigError("AOP extents must be positive")
        if self.pe_kind == "sinusoidal" and self.d_model % 2:
            raise ConfigError("sinusoidal positional encoding needs an even d_model")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return replace(base, **overrides)

    def to_items(self) -> list[tuple[str, str]]:
        return [(k, _fmt(v)) for k, v in asdict(self).items()]

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in items:
                kw[f.name] = _parse(items[f.name], f.type)
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    text = text.strip()
    if typ == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    try:
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"expected {typ}, got {text!r}") from None
    return text


PRESETS = {
    "base": ModelConfig(),
    "big": ModelConfig(d_model=1024, d_ff=4096, heads=16, d_k=64, d_v=64, p_drop=0.3),
    "tiny": ModelConfig(layers=1, d_model=8, d_ff=16, heads=2, d_k=4, d_v=4, vocab_size=11, max_len=32),
}


# ---------------------------------------------------------------- positional encodings


def sinusoidal_pe(max_len: int, d_model: int) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same angle)."""
    if d_model % 2:
        raise ConfigError("sinusoidal positional encoding needs an even d_model")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    angle = pos * freq
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def pe_wavelengths(d_model: int) -> np.ndarray:
    """Wavelength of each (sin, cos) pair: 2*pi * 10000^(2i/d)."""
    return 2 * math.pi * np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)


# ---------------------------------------------------------------- parameters


def _glorot(gen, rows, cols):
    limit = math.sqrt(6.0 / (rows + cols))
    return gen.uniform(-limit, limit, (rows, cols))


class TransformerParams:
    """Ordered mapping of dotted parameter names to leaf tensors."""

    def __init__(self, tensors: dict[str, Tensor] | None = None):
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._t[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self):
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def count(self) -> int:
        return sum(t.size for t in self._t.values())

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def mha(self, prefix: str, h: int) -> MultiHeadParams:
        return MultiHeadParams(*(self._t[f"{prefix}.{k}"] for k in ("w_q", "w_k", "w_v", "w_o")), h=h)

    def aop(self, prefix: str) -> AopParams:
        return AopParams(*(self._t[f"{prefix}.{k}"] for k in ("w_q", "keys", "values", "w_o")))

    def output_projection(self) -> Tensor:
        return self._t["output_projection"] if "output_projection" in self._t else self._t["embedding"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter of ``cfg``, in enumeration order."""
    d, shapes = cfg.d_model, {}
    shapes["embedding"] = (cfg.vocab_size, d)
    if not cfg.tie_weights:
        shapes["output_projection"] = (cfg.vocab_size, d)
    if cfg.pe_kind == "learned":
        shapes["pos_embedding"] = (cfg.max_len, d)

    def attn(prefix):
        shapes[f"{prefix}.w_q"] = (d, cfg.heads * cfg.d_k)
        shapes[f"{prefix}.w_k"] = (d, cfg.heads * cfg.d_k)
        shapes[f"{prefix}.w_v"] = (d, cfg.heads * cfg.d_v)
        shapes[f"{prefix}.w_o"] = (cfg.heads * cfg.d_v, d)

    def ffn(prefix):
        if cfg.ffn_kind == "relu_ffn":
            shapes[f"{prefix}.ffn.w1"] = (d, cfg.d_ff)
            shapes[f"{prefix}.ffn.b1"] = (cfg.d_ff,)
            shapes[f"{prefix}.ffn.w2"] = (cfg.d_ff, d)
            shapes[f"{prefix}.ffn.b2"] = (d,)
        else:
            hp = cfg.aop_heads
            shapes[f"{prefix}.aop.w_q"] = (d, hp * cfg.aop_d_k)
            shapes[f"{prefix}.aop.keys"] = (hp, cfg.aop_banks, cfg.aop_d_k)
            shapes[f"{prefix}.aop.values"] = (hp, cfg.aop_banks, cfg.aop_d_v)
            shapes[f"{prefix}.aop.w_o"] = (hp * cfg.aop_d_v, d)

    def norm(prefix):
        shapes[f"{prefix}.gain"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    for i in range(cfg.layers):
        p = f"encoder.{i}"
        attn(f"{p}.self_attn")
        norm(f"{p}.norm1")
        ffn(p)
        norm(f"{p}.norm2")
    for i in range(cfg.layers):
        p = f"decoder.{i}"
        attn(f"{p}.self_attn")
        norm(f"{p}.norm1")
        attn(f"{p}.cross_attn")
        norm(f"{p}.norm2")
        ffn(p)
        norm(f"{p}.norm3")
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Exact number of scalar parameters (tied embedding counted once)."""
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def ffn_parameter_count(d_model: int, d_ff: int) -> int:
    return 2 * d_model * d_ff + d_ff + d_model


def init_params(cfg: ModelConfig, seed: int = 0) -> TransformerParams:
    """Glorot-uniform projections, zero biases, unit LayerNorm gains, N(0, d^-1/2) tables."""
    gen = rngmod.stream(seed, "init")
    std = cfg.d_model**-0.5
    out = TransformerParams()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("embedding", "output_projection", "pos_embedding") or leaf in ("keys", "values"):
            data = gen.normal(0.0, std, shape)
        elif leaf in ("bias", "b1", "b2"):
            data = np.zeros(shape)
        elif leaf == "gain":
            data = np.ones(shape)
        else:
            data = _glorot(gen, *shape)
        out[name] = Tensor(data, requires_grad=True)
    return out


# ---------------------------------------------------------------- building blocks


def position_wise_ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """max(0, x W1 + b1) W2 + b2, row by row."""
    if w1.shape[0] != x.shape[-1] or w2.shape != (w1.shape[1], x.shape[-1]):
        raise DimensionError(f"FFN shapes {x.shape}, W1 {w1.shape}, W2 {w2.shape} do not chain")
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)


def sublayer_apply(
    x: Tensor,
    sublayer: Callable[[Tensor], Tensor],
    gain: Tensor,
    bias: Tensor,
    p_drop: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
    eps: float = 1e-6,
) -> Tensor:
    """Post-norm residual block: LayerNorm(x + Dropout(Sublayer(x)))."""
    return layer_norm(add(x, dropout(sublayer(x), p_drop, train, rng)), gain, bias, eps)


class Transformer:
    """Parameters plus configuration, with batched encode/decode passes.

    Token inputs are ``[n]`` or ``[B, n]`` integer arrays; outputs keep the
    same leading shape. ``train=True`` enables dropout (requires ``rng``).
    Passing a list as ``attn_log`` collects ``(kind, layer, weights)``
    tuples with weights shaped ``[(B,) h, n_q, n_k]``.
    """

    def __init__(self, config: ModelConfig, params: TransformerParams | None = None, seed: int = 0, symbols=None):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        self.symbols = list(symbols) if symbols is not None else None
        self._pe = sinusoidal_pe(config.max_len, config.d_model) if config.pe_kind == "sinusoidal" else None

    # -------------------------------------------------------------- pieces

    def positional(self, n: int) -> np.ndarray | Tensor:
        if self.config.pe_kind == "learned":
            if n > self.config.max_len:
                raise LengthError(f"sequence length {n} exceeds learned table size {self.config.max_len}")
            return take_rows(self.params["pos_embedding"], np.arange(n))
        if n > self._pe.shape[0]:
            return sinusoidal_pe(n, self.config.d_model)
        return self._pe[:n]

    def embed(self, tokens, train: bool = False, rng=None) -> Tensor:
        """sqrt(d_model)-scaled embedding rows plus positional encoding, then dropout."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise VocabularyError(f"token id out of range [0, {self.config.vocab_size})")
        x = mul(take_rows(self.params["embedding"], tokens), math.sqrt(self.config.d_model))
        x = add(x, self.positional(tokens.shape[-1]))
        return dropout(x, self.config.p_drop, train, rng)

    def _ffn(self, prefix: str, x: Tensor, attn_log, kind: str, layer: int) -> Tensor:
        p = self.params
        if self.config.ffn_kind == "relu_ffn":
            return position_wise_ffn(x, p[f"{prefix}.ffn.w1"], p[f"{prefix}.ffn.b1"], p[f"{prefix}.ffn.w2"], p[f"{prefix}.ffn.b2"])
        out, w = attention_over_parameters(p.aop(f"{prefix}.aop"), x, self.config.d_model)
        if attn_log is not None:
            attn_log.append((kind, layer, w.data))
        return out

    def _sub(self, x, fn, norm, train, rng):
        c = self.config
        return sublayer_apply(x, fn, self.params[f"{norm}.gain"], self.params[f"{norm}.bias"], c.p_drop, train, rng, c.ln_eps)

    # -------------------------------------------------------------- stacks

    def encode(self, src, src_pad=None, train: bool = False, rng=None, attn_log=None) -> Tensor:
        src = np.asarray(src, dtype=np.int64)
        if src.shape[-1] < 1:
            raise LengthError("empty source sequence")
        src_pad = (src == PAD) if src_pad is None else np.asarray(src_pad, dtype=bool)
        mask = padding_mask(src_pad, src.shape[-1])
        h = self.config.heads
        x = self.embed(src, train, rng)
        for i in range(self.config.layers):
            pre = f"encoder.{i}"

            def self_attn(t, pre=pre, i=i):
                out, w = multi_head_attention(self.params.mha(f"{pre}.self_attn", h), t, t, t, mask)
                if attn_log is not None:
                    attn_log.append(("enc_self", i, w.data))
                return out

            x = self._sub(x, self_attn, f"{pre}.norm1", train, rng)
            x = self._sub(x, lambda t, pre=pre, i=i: self._ffn(pre, t, attn_log, "enc_ffn", i), f"{pre}.norm2", train, rng)
        return x

    def decode(self, memory: Tensor, tgt_in, src_pad, tgt_pad=None, train: bool = False, rng=None, attn_log=None) -> Tensor:
        """Decoder stack over ``tgt_in`` attending to ``memory``; returns hidden states."""
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        n_t = tgt_in.shape[-1]
        src_pad = np.asarray(src_pad, dtype=bool)
        self_mask: AttentionMask = causal_mask(n_t)
        if tgt_pad is not None:
            self_mask = self_mask & padding_mask(tgt_pad, n_t)
        cross_mask = padding_mask(src_pad, n_t)
        h = self.config.heads
        y = self.embed(tgt_in, train, rng)
        for i in range(self.config.layers):
            pre = f"decoder.{i}"

            def masked_self(t, pre=pre, i=i):
                out, w = multi_head_attention(self.params.mha(f"{pre}.self_attn", h), t, t, t, self_mask)
                if attn_log is not None:
                    attn_log.append(("dec_self", i, w.data))
                return out

            def cross(t, pre=pre, i=i):
                out, w = multi_head_attention(self.params.mha(f"{pre}.cross_attn", h), t, memory, memory, cross_mask)
                if attn_log is not None:
                    attn_log.append(("cross", i, w.data))
                return out

            y = self._sub(y, masked_self, f"{pre}.norm1", train, rng)
            y = self._sub(y, cross, f"{pre}.norm2", train, rng)
            y = self._sub(y, lambda t, pre=pre, i=i: self._ffn(pre, t, attn_log, "dec_ffn", i), f"{pre}.norm3", train, rng)
        return y

    def project(self, hidden: Tensor) -> Tensor:
        """Pre-softmax logits through the (tied) output projection."""
        return matmul(hidden, swapaxes(self.params.output_projection(), 0, 1))

    def decode_step(self, memory, tgt_in, src_pad, tgt_pad=None, train=False, rng=None, attn_log=None) -> Tensor:
        return self.project(self.decode(memory, tgt_in, src_pad, tgt_pad, train, rng, attn_log))

    def forward(self, src, tgt_in, train: bool = False, rng=None, attn_log=None) -> Tensor:
        """Teacher-forced logits ``[(B,) n_t, vocab]``."""
        src = np.asarray(src, dtype=np.int64)
        tgt_in = np.asarray(tgt_in, dtype=np.int64)
        src_pad = src == PAD
        tgt_pad = tgt_in == PAD
        memory = self.encode(src, src_pad, train, rng, attn_log)
        return self.decode_step(memory, tgt_in, src_pad, tgt_pad if tgt_pad.any() else None, train, rng, attn_log)

    def parameter_count(self) -> int:
        return self.params.count()

    # -------------------------------------------------------------- decoding hook

    def scorer(self, src_tokens):
        """Return ``f(prefixes) -> log-probs [len(prefixes), vocab]`` for one source.

        The encoder runs once; each call re-runs the decoder over the given
        BOS-initial prefixes (all of equal length) in eval mode.
        """
        from .tensor import log_softmax, no_grad

        src = np.asarray(src_tokens, dtype=np.int64)[None, :]
        src_pad = src == PAD
        with no_grad():
            memory = self.encode(src, src_pad)

        def score(prefixes):
            tgt = np.asarray(prefixes, dtype=np.int64)
            b = tgt.shape[0]
            mem = Tensor(np.broadcast_to(memory.data, (b,) + memory.shape[1:]))
            pad = np.broadcast_to(src_pad, (b, src.shape[1]))
            with no_grad():
                logits = self.decode_step(mem, tgt, pad)
                return log_softmax(Tensor(logits.data[:, -1, :])).data

        return score


def make_decoder_input(tgt_out) -> np.ndarray:
    """Shift right by one: prepend BOS and drop the final token."""
    tgt_out = np.asarray(tgt_out, dtype=np.int64)
    bos = np.full(tgt_out.shape[:-1] + (1,), BOS, dtype=np.int64)
    return np.concatenate([bos, tgt_out[..., :-1]], axis=-1)
