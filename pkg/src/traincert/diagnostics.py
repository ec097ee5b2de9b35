"""Finite-difference gradient suite covering every differentiable primitive.

Each entry perturbs either an input tensor or every parameter tensor of a
small module and compares the hand-written backward pass against central
differences. The CLI ``gradcheck`` command runs the whole suite; the
acceptance tests assert every report stays under the 1e-4 relative-error
requirement.
"""

from __future__ import annotations

import numpy as np

from .linalg import GradCheckReport, Rng, grad_check
from .transformer import (
    GPT2_STYLE,
    LLAMA_STYLE,
    Block,
    DecoderLm,
    GeluFFN,
    LayerNorm,
    LmConfig,
    RMSNorm,
    SwiGluFFN,
    lm_loss_and_grad,
)

_EPS = 1e-5


def _tiny_cfg(style: str, n_layers: int = 2) -> LmConfig:
    return LmConfig(
        style=style,
        vocab_size=13,
        context_len=6,
        d_model=8,
        n_heads=2,
        d_ff=12,
        n_layers=n_layers,
    )


def _weighted_sum(rng: Rng, shape) -> np.ndarray:
    # Fixed projection turning a tensor output into a scalar loss.
    return rng.normal(shape)


def _check_input(module, x: np.ndarray, rng: Rng) -> GradCheckReport:
    """Gradient w.r.t. the module input for loss = sum(weights * module(x))."""
    probe = module.forward(x)
    weights = _weighted_sum(rng.derive("probe"), probe.shape)

    def f(flat):
        return float(np.sum(weights * module.forward(flat.reshape(x.shape))))

    module.forward(x)
    analytic = module.backward(weights)
    return grad_check(
        lambda m: f(m), x.reshape(1, -1), analytic.reshape(1, -1), eps=_EPS
    )


def _check_params(params, compute_loss, run_backward) -> GradCheckReport:
    """Worst-case report over every parameter tensor of a module."""
    for p in params:
        p.zero_grad()
    _, upstream = compute_loss()
    run_backward(upstream)
    worst = GradCheckReport(0.0, (0, 0), _EPS)
    for p in params:
        original = p.value.copy()

        def f(flat, p=p, original=original):
            p.value[...] = flat.reshape(original.shape)
            loss = compute_loss()[0]
            p.value[...] = original
            return loss

        report = grad_check(
            f, original.reshape(1, -1), p.grad.reshape(1, -1), eps=_EPS
        )
        if report.max_rel_error > worst.max_rel_error:
            worst = report
    return worst


def _norm_case(cls, name: str, rng: Rng) -> GradCheckReport:
    norm = cls(name, 7)
    x = rng.normal((3, 7)) * 1.5
    return _check_input(norm, x, rng)


def _ffn_case(style: str, rng: Rng) -> GradCheckReport:
    cfg = _tiny_cfg(style)
    ffn = (GeluFFN if style == GPT2_STYLE else SwiGluFFN)("ffn", cfg, rng)
    x = rng.normal((2, 4, cfg.d_model))
    flat = x.reshape(1, -1)
    probe = rng.derive("probe").normal(ffn.forward(x).shape)

    def f(m):
        return float(np.sum(probe * ffn.forward(m.reshape(x.shape))))

    ffn.forward(x)
    analytic = ffn.backward(probe).reshape(1, -1)
    return grad_check(f, flat, analytic, eps=_EPS)


def _block_case(style: str, rng: Rng) -> GradCheckReport:
    cfg = _tiny_cfg(style)
    block = Block("block", cfg, rng)
    x = rng.normal((2, 5, cfg.d_model))
    probe = rng.derive("probe").normal(x.shape)

    def f(m):
        return float(np.sum(probe * block.forward(m.reshape(x.shape))))

    block.forward(x)
    analytic = block.backward(probe).reshape(1, -1)
    return grad_check(f, x.reshape(1, -1), analytic, eps=_EPS)


def _ce_case(rng: Rng) -> GradCheckReport:
    logits = rng.normal((2, 3, 7))
    targets = rng.integers(0, 7, (2, 3))

    def f(m):
        return lm_loss_and_grad(m.reshape(logits.shape), targets)[0]

    _, analytic = lm_loss_and_grad(logits, targets)
    return grad_check(f, logits.reshape(1, -1), analytic.reshape(1, -1), eps=_EPS)


def _randomize_for_check(model: DecoderLm, rng: Rng) -> None:
    """Move parameters to a well-conditioned random point.

    At the tiny training init the attention logits are ~1e-4, leaving q/k
    gradients near 1e-8 where central differences are pure roundoff noise;
    the check measures backward correctness, so it runs at a point where
    every gradient is numerically resolvable.
    """
    for p in model.params():
        if p.name.endswith(".g"):
            p.value[...] = 1.0 + rng.normal(p.value.shape, std=0.2)
        else:
            p.value[...] = rng.normal(p.value.shape, std=0.35)


def _full_model_case(style: str, rng: Rng) -> GradCheckReport:
    cfg = _tiny_cfg(style)
    model = DecoderLm(cfg, rng)
    _randomize_for_check(model, rng.derive("point"))
    tokens = rng.integers(0, cfg.vocab_size, (2, 4))
    targets = rng.integers(0, cfg.vocab_size, (2, 4))

    def compute_loss():
        return lm_loss_and_grad(model.forward(tokens), targets)

    def run_backward(upstream):
        model.backward(upstream)

    return _check_params(model.params(), compute_loss, run_backward)


def gradient_suite(seed: int = 2024) -> list[tuple[str, GradCheckReport]]:
    """All primitive and full-model finite-difference checks."""
    rng = Rng(seed)
    return [
        ("layernorm", _norm_case(LayerNorm, "ln", rng.derive("ln"))),
        ("rmsnorm", _norm_case(RMSNorm, "rms", rng.derive("rms"))),
        ("gelu_ffn", _ffn_case(GPT2_STYLE, rng.derive("gelu"))),
        ("swiglu_ffn", _ffn_case(LLAMA_STYLE, rng.derive("swiglu"))),
        ("gpt2_block", _block_case(GPT2_STYLE, rng.derive("block_g"))),
        ("rope_attention_block", _block_case(LLAMA_STYLE, rng.derive("block_l"))),
        ("cross_entropy", _ce_case(rng.derive("ce"))),
        ("full_model_gpt2", _full_model_case(GPT2_STYLE, rng.derive("full_g"))),
        ("full_model_llama", _full_model_case(LLAMA_STYLE, rng.derive("full_l"))),
    ]
