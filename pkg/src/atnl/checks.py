"""Invariant suites behind ``atnl check``: gradients, scaling statistics, PE, masking.

Each suite returns a list of :class:`CheckResult`; nothing here raises on a
failed check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attention import causal_mask, dot_product_variance_experiment
from .model import EOS, PAD, PRESETS, ModelConfig, Transformer, make_decoder_input, pe_wavelengths, sinusoidal_pe
from .tensor import backward, finite_diff_grad, max_relative_error, no_grad
from .training import label_smoothed_loss


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.value:.6g} ({self.limit})"


# ---------------------------------------------------------------- gradients

TINY = replace(PRESETS["tiny"], max_len=16)


def random_pair_batch(cfg: ModelConfig, seed: int, length: int = 5, batch: int = 2):
    """Random (src, tgt_in, tgt_out) id arrays without padding."""
    gen = np.random.default_rng(seed)
    src = gen.integers(3, cfg.vocab_size, (batch, length))
    tgt_out = gen.integers(3, cfg.vocab_size, (batch, length))
    tgt_out[:, -1] = EOS
    return src, make_decoder_input(tgt_out), tgt_out


def model_gradient_error(cfg: ModelConfig, seed: int, h: float = 1e-5, names=None) -> dict[str, float]:
    """Max relative error, per parameter, between backprop and central differences.

    Dropout is off so the loss is a deterministic function of the parameters.
    """
    model = Transformer(cfg, seed=seed)
    # perturb away from the all-ones/all-zeros LayerNorm and bias initialisation
    gen = np.random.default_rng(seed + 10_000)
    for name, p in model.params.items():
        p.data = p.data + gen.normal(0.0, 0.1, p.shape)
    src, tgt_in, tgt_out = random_pair_batch(cfg, seed)
    src_pad = src == PAD

    def loss():
        return label_smoothed_loss(model.forward(src, tgt_in), tgt_out, cfg.eps_ls)

    model.params.zero_grad()
    backward(loss())
    with no_grad():
        memory = model.encode(src, src_pad)

    def decoder_loss():
        # decoder parameters cannot reach the encoder, so its output is reused
        return label_smoothed_loss(model.decode_step(memory, tgt_in, src_pad), tgt_out, cfg.eps_ls)

    errors = {}
    for name, p in model.params.items():
        if names is not None and name not in names:
            continue
        analytic = p.grad.copy()
        original = p.data
        run = decoder_loss if name.startswith("decoder.") else loss

        def f(t, p=p, run=run):
            p.data = t.data
            with no_grad():
                return run()

        numeric = finite_diff_grad(f, original, h)
        p.data = original
        errors[name] = max_relative_error(analytic, numeric)
    return errors


def grad_suite(seeds: int = 20, tol: float = 1e-4, cfg: ModelConfig = TINY) -> list[CheckResult]:
    results = []
    for seed in range(seeds):
        errs = model_gradient_error(cfg, seed)
        worst = max(errs, key=errs.get)
        results.append(CheckResult(f"grad seed={seed} worst={worst}", errs[worst] < tol, errs[worst], f"< {tol:g}"))
    return results


# ---------------------------------------------------------------- scaling factor


def variance_suite(dks=(16, 64, 256), samples: int = 10000, seed: int = 0, rel: float = 0.10) -> list[CheckResult]:
    out = []
    for dk in dks:
        s = dot_product_variance_experiment(dk, samples, seed)
        raw_err = abs(s.raw_var - dk) / dk
        out.append(CheckResult(f"d_k={dk} raw variance={s.raw_var:.4f}", raw_err <= rel, raw_err, f"relative error <= {rel:g}"))
        sc_err = abs(s.scaled_var - 1.0)
        out.append(CheckResult(f"d_k={dk} scaled variance={s.scaled_var:.4f}", sc_err <= rel, sc_err, f"relative error <= {rel:g}"))
        z = abs(s.raw_mean) / s.mean_stderr
        out.append(CheckResult(f"d_k={dk} raw mean={s.raw_mean:.4f}", z <= 5.0, z, "<= 5 standard errors"))
    return out


# ---------------------------------------------------------------- positional encoding


def pe_rotation_residual(max_len: int = 512, d_model: int = 64, max_offset: int = 16) -> float:
    """Largest deviation of PE[pos+k] from a fixed rotation of PE[pos], per frequency pair."""
    pe = sinusoidal_pe(max_len, d_model)
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    worst = 0.0
    for k in range(1, max_offset + 1):
        c, s = np.cos(k * freq), np.sin(k * freq)
        sin_a, cos_a = pe[: max_len - k, 0::2], pe[: max_len - k, 1::2]
        pred_sin = c * sin_a + s * cos_a
        pred_cos = -s * sin_a + c * cos_a
        worst = max(
            worst,
            float(np.abs(pred_sin - pe[k:, 0::2]).max()),
            float(np.abs(pred_cos - pe[k:, 1::2]).max()),
        )
    return worst


def pe_wavelength_ratio_spread(d_model: int = 64) -> float:
    """Relative spread of consecutive wavelength ratios, measured from the PE table."""
    pe = sinusoidal_pe(2, d_model)
    freq = np.arctan2(pe[1, 0::2], pe[1, 1::2])
    lengths = 2 * math.pi / freq
    ratios = lengths[1:] / lengths[:-1]
    return float(np.abs(ratios / ratios[0] - 1.0).max())


def pe_suite(max_len: int = 512, d_model: int = 64) -> list[CheckResult]:
    rot = pe_rotation_residual(max_len, d_model)
    spread = pe_wavelength_ratio_spread(d_model)
    pe0 = sinusoidal_pe(1, d_model)[0]
    expected0 = np.tile([0.0, 1.0], d_model // 2)
    first = pe_wavelengths(d_model)[0]
    return [
        CheckResult("rotation residual, offsets 1..16", rot < 1e-9, rot, "< 1e-9"),
        CheckResult("wavelength ratio spread", spread < 1e-9, spread, "< 1e-9"),
        CheckResult("PE(0) alternates 0,1", bool(np.array_equal(pe0, expected0)), float(np.abs(pe0 - expected0).max()), "exact"),
        CheckResult("shortest wavelength 2*pi", abs(first - 2 * math.pi) < 1e-12, abs(first - 2 * math.pi), "< 1e-12"),
    ]


# ---------------------------------------------------------------- masking


def autoregressive_violations(layers: int, max_len: int = 6, seed: int = 0) -> int:
    """Count perturbations of a target token that move any logit at an earlier position.

    Every position ``j`` of every target length up to ``max_len`` is set to
    every other symbol in turn; logits at positions ``< j`` must stay
    bit-identical.
    """
    cfg = replace(TINY, layers=layers, p_drop=0.0)
    model = Transformer(cfg, seed=seed)
    gen = np.random.default_rng(seed)
    bad = 0
    with no_grad():
        for n in range(1, max_len + 1):
            src = gen.integers(3, cfg.vocab_size, (1, 4))
            tgt = gen.integers(3, cfg.vocab_size, (1, n))
            base = model.forward(src, tgt).data
            for j in range(1, n):
                for tok in range(3, cfg.vocab_size):
                    if tok == tgt[0, j]:
                        continue
                    alt = tgt.copy()
                    alt[0, j] = tok
                    moved = model.forward(src, alt).data
                    if not np.array_equal(moved[0, :j], base[0, :j]):
                        bad += 1
    return bad


def mask_suite(seed: int = 0) -> list[CheckResult]:
    out = []
    for n in (1, 3, 6):
        m = causal_mask(n).allowed
        ok = bool(np.array_equal(m, np.tril(np.ones((n, n), dtype=bool))))
        out.append(CheckResult(f"causal mask n={n} is lower-triangular", ok, float(not ok), "exact"))
    for layers in (1, 2, 3):
        bad = autoregressive_violations(layers, seed=seed)
        out.append(CheckResult(f"autoregressive logits N={layers}", bad == 0, float(bad), "0 violations"))
    return out


SUITES = {
    "grad": grad_suite,
    "variance": variance_suite,
    "pe": pe_suite,
    "mask": mask_suite,
}
