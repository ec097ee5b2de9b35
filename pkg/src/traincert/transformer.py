"""Desk-scale decoder-only causal transformers with exact hand-written
gradients, in two block styles:

* ``gpt2``: learned absolute positional embeddings, LayerNorm, GELU FFN;
* ``llama``: rotary embeddings inside attention, RMSNorm pre-normalization,
  SwiGLU FFN, no additive positional table.

Everything is float64 numpy. Each layer caches its forward intermediates and
``backward`` consumes them, accumulating parameter gradients into
``Param.grad`` and returning the input gradient; finite-difference checks in
the test suite hold every primitive to a 1e-4 relative error.

Weight quantization, when configured, applies to the FFN/gating matrices and
the output head only, with straight-through gradients onto the latent
full-precision weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import InvalidShape, InvalidSpec, InvalidToken, NumericalFailure
from .linalg import Rng
from .quantization import QuantSpec, quantize

GPT2_STYLE = "gpt2"
LLAMA_STYLE = "llama"

ROPE_BASE = 10000.0
NORM_EPS = 1e-6
INIT_STD = 0.02
_MASK_FILL = -1e30


class Param:
    """A named trainable tensor with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass(frozen=True)
class LmConfig:
    """Decoder-only model shape; dropout is always disabled."""

    style: str
    vocab_size: int
    context_len: int
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    quant: QuantSpec | None = None

    def __post_init__(self):
        if self.style not in (GPT2_STYLE, LLAMA_STYLE):
            raise InvalidSpec(f"unknown style {self.style!r}")
        if self.d_model % self.n_heads != 0:
            raise InvalidSpec(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.context_len < 1:
            raise InvalidSpec("context_len must be >= 1")
        if self.style == LLAMA_STYLE and (self.d_model // self.n_heads) % 2 != 0:
            raise InvalidSpec("rotary embeddings need an even head dimension")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_backward(probs: np.ndarray, grad: np.ndarray) -> np.ndarray:
    inner = np.sum(grad * probs, axis=-1, keepdims=True)
    return probs * (grad - inner)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact Gaussian-error-function GELU."""
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def gelu_deriv(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return cdf + x * pdf


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_deriv(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def rope_angles(n_pos: int, d_head: int, positions=None) -> tuple[np.ndarray, np.ndarray]:
    if d_head % 2 != 0:
        raise InvalidShape(f"rotary head dimension must be even, got {d_head}")
    if positions is None:
        positions = np.arange(n_pos, dtype=np.float64)
    else:
        positions = np.asarray(positions, dtype=np.float64)
    freqs = ROPE_BASE ** (-2.0 * np.arange(d_head // 2, dtype=np.float64) / d_head)
    ang = positions[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x: np.ndarray, positions=None, inverse: bool = False) -> np.ndarray:
    """Rotate interleaved coordinate pairs of ``x`` (..., T, d_head) by
    position-dependent angles; ``inverse`` applies the transpose rotation."""
    x = np.asarray(x, dtype=np.float64)
    t, d_head = x.shape[-2], x.shape[-1]
    cos, sin = rope_angles(t, d_head, positions)
    if inverse:
        sin = -sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


class Linear:
    """Affine map on the trailing axis, optionally behind a weight quantizer."""

    def __init__(
        self,
        name: str,
        d_in: int,
        d_out: int,
        rng: Rng,
        std: float = INIT_STD,
        bias: bool = False,
        quant: QuantSpec | None = None,
    ):
        self.w = Param(f"{name}.w", rng.truncated_normal((d_out, d_in), std))
        self.b = Param(f"{name}.b", np.zeros(d_out)) if bias else None
        self.quant = quant if quant is not None and quant.enabled else None
        self._x = None
        self._w_eff = None

    def effective_weight(self) -> np.ndarray:
        if self.quant is None:
            return self.w.value
        return quantize(self.w.value, self.quant).values

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._w_eff = self.effective_weight()
        y = x @ self._w_eff.T
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self._x.shape[-1])
        g2 = grad.reshape(-1, grad.shape[-1])
        # Straight-through: the quantized-weight gradient lands on the latent weight.
        self.w.grad += g2.T @ x2
        if self.b is not None:
            self.b.grad += g2.sum(axis=0)
        return grad @ self._w_eff

    def params(self) -> list[Param]:
        return [self.w] + ([self.b] if self.b is not None else [])


class LayerNorm:
    def __init__(self, name: str, d: int):
        self.g = Param(f"{name}.g", np.ones(d))
        self.b = Param(f"{name}.b", np.zeros(d))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        istd = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = xc * istd
        self._cache = (xhat, istd)
        return self.g.value * xhat + self.b.value

    def backward(self, grad: np.ndarray) -> np.ndarray:
        xhat, istd = self._cache
        axes = tuple(range(grad.ndim - 1))
        self.g.grad += np.sum(grad * xhat, axis=axes)
        self.b.grad += np.sum(grad, axis=axes)
        dxhat = grad * self.g.value
        return istd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )

    def params(self) -> list[Param]:
        return [self.g, self.b]


class RMSNorm:
    def __init__(self, name: str, d: int):
        self.g = Param(f"{name}.g", np.ones(d))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
        self._cache = (x, r)
        return self.g.value * x * r

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, r = self._cache
        d = x.shape[-1]
        axes = tuple(range(grad.ndim - 1))
        self.g.grad += np.sum(grad * x * r, axis=axes)
        dxhat = grad * self.g.value
        inner = np.sum(dxhat * x, axis=-1, keepdims=True)
        return r * dxhat - (r**3 / d) * x * inner

    def params(self) -> list[Param]:
        return [self.g]


class CausalSelfAttention:
    """Multi-head self-attention with a causal mask; rotary q/k when configured."""

    def __init__(self, name: str, cfg: LmConfig, rng: Rng):
        self.cfg = cfg
        bias = cfg.style == GPT2_STYLE
        res_std = INIT_STD / np.sqrt(2.0 * cfg.n_layers)
        self.wq = Linear(f"{name}.wq", cfg.d_model, cfg.d_model, rng, bias=bias)
        self.wk = Linear(f"{name}.wk", cfg.d_model, cfg.d_model, rng, bias=bias)
        self.wv = Linear(f"{name}.wv", cfg.d_model, cfg.d_model, rng, bias=bias)
        self.wo = Linear(
            f"{name}.wo", cfg.d_model, cfg.d_model, rng, std=res_std, bias=bias
        )
        self.rope = cfg.style == LLAMA_STYLE
        self._cache = None

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        h, hd = self.cfg.n_heads, self.cfg.d_head
        return x.reshape(b, t, h, hd).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        q = self._split(self.wq.forward(x))
        k = self._split(self.wk.forward(x))
        v = self._split(self.wv.forward(x))
        if self.rope:
            q = rope_rotate(q)
            k = rope_rotate(k)
        scale = 1.0 / np.sqrt(self.cfg.d_head)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        mask = np.tril(np.ones((t, t), dtype=bool))
        scores = np.where(mask, scores, _MASK_FILL)
        probs = softmax(scores)
        ctx = probs @ v
        out = self.wo.forward(self._merge(ctx))
        self._cache = (q, k, v, probs, scale)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        q, k, v, probs, scale = self._cache
        g_ctx = self._split(self.wo.backward(grad))
        g_probs = g_ctx @ v.transpose(0, 1, 3, 2)
        g_v = probs.transpose(0, 1, 3, 2) @ g_ctx
        g_scores = _softmax_backward(probs, g_probs) * scale
        g_q = g_scores @ k
        g_k = g_scores.transpose(0, 1, 3, 2) @ q
        if self.rope:
            g_q = rope_rotate(g_q, inverse=True)
            g_k = rope_rotate(g_k, inverse=True)
        gx = self.wq.backward(self._merge(g_q))
        gx = gx + self.wk.backward(self._merge(g_k))
        gx = gx + self.wv.backward(self._merge(g_v))
        return gx

    def params(self) -> list[Param]:
        return [p for lin in (self.wq, self.wk, self.wv, self.wo) for p in lin.params()]


class GeluFFN:
    def __init__(self, name: str, cfg: LmConfig, rng: Rng):
        res_std = INIT_STD / np.sqrt(2.0 * cfg.n_layers)
        self.fc1 = Linear(
            f"{name}.fc1", cfg.d_model, cfg.d_ff, rng, bias=True, quant=cfg.quant
        )
        self.fc2 = Linear(
            f"{name}.fc2", cfg.d_ff, cfg.d_model, rng, std=res_std, bias=True,
            quant=cfg.quant,
        )
        self._pre = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._pre = self.fc1.forward(x)
        return self.fc2.forward(gelu(self._pre))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g_act = self.fc2.backward(grad) * gelu_deriv(self._pre)
        return self.fc1.backward(g_act)

    def params(self) -> list[Param]:
        return self.fc1.params() + self.fc2.params()


class SwiGluFFN:
    def __init__(self, name: str, cfg: LmConfig, rng: Rng):
        res_std = INIT_STD / np.sqrt(2.0 * cfg.n_layers)
        self.gate = Linear(f"{name}.gate", cfg.d_model, cfg.d_ff, rng, quant=cfg.quant)
        self.up = Linear(f"{name}.up", cfg.d_model, cfg.d_ff, rng, quant=cfg.quant)
        self.down = Linear(
            f"{name}.down", cfg.d_ff, cfg.d_model, rng, std=res_std, quant=cfg.quant
        )
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        g = self.gate.forward(x)
        u = self.up.forward(x)
        self._cache = (g, u)
        return self.down.forward(silu(g) * u)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g, u = self._cache
        gh = self.down.backward(grad)
        gx = self.gate.backward(gh * u * silu_deriv(g))
        gx = gx + self.up.backward(gh * silu(g))
        return gx

    def params(self) -> list[Param]:
        return self.gate.params() + self.up.params() + self.down.params()


class Block:
    """One pre-norm transformer layer: attention then FFN, both residual."""

    def __init__(self, name: str, cfg: LmConfig, rng: Rng):
        norm = LayerNorm if cfg.style == GPT2_STYLE else RMSNorm
        self.norm1 = norm(f"{name}.norm1", cfg.d_model)
        self.attn = CausalSelfAttention(f"{name}.attn", cfg, rng)
        self.norm2 = norm(f"{name}.norm2", cfg.d_model)
        ffn = GeluFFN if cfg.style == GPT2_STYLE else SwiGluFFN
        self.ffn = ffn(f"{name}.ffn", cfg, rng)

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = x + self.attn.forward(self.norm1.forward(x))
        out = a + self.ffn.forward(self.norm2.forward(a))
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("block produced non-finite activations")
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        ga = grad + self.norm2.backward(self.ffn.backward(grad))
        return ga + self.norm1.backward(self.attn.backward(ga))

    def params(self) -> list[Param]:
        return (
            self.norm1.params()
            + self.attn.params()
            + self.norm2.params()
            + self.ffn.params()
        )


class DecoderLm:
    """Decoder-only language model with recordable per-layer hidden states."""

    def __init__(self, cfg: LmConfig, rng: Rng):
        self.cfg = cfg
        self.tok_emb = Param(
            "tok_emb", rng.truncated_normal((cfg.vocab_size, cfg.d_model), INIT_STD)
        )
        if cfg.style == GPT2_STYLE:
            self.pos_emb = Param(
                "pos_emb", rng.truncated_normal((cfg.context_len, cfg.d_model), INIT_STD)
            )
        else:
            self.pos_emb = None
        self.blocks = [Block(f"blocks.{i}", cfg, rng) for i in range(cfg.n_layers)]
        norm = LayerNorm if cfg.style == GPT2_STYLE else RMSNorm
        self.final_norm = norm("final_norm", cfg.d_model)
        # Untied head so it can be refit independently of the embedding.
        self.head = Linear(
            "head", cfg.d_model, cfg.vocab_size, rng, bias=False, quant=cfg.quant
        )
        self._tokens = None

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.cfg.context_len:
            raise InvalidShape(
                f"sequence length {tokens.shape[1]} exceeds context {self.cfg.context_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size):
            bad = tokens.min() if tokens.min() < 0 else tokens.max()
            raise InvalidToken(f"token id {bad} outside vocabulary of {self.cfg.vocab_size}")
        return tokens

    def embed(self, tokens) -> np.ndarray:
        """Initial hidden state: token rows plus the positional table (gpt2 only)."""
        tokens = self._check_tokens(tokens)
        h = self.tok_emb.value[tokens]
        if self.pos_emb is not None:
            h = h + self.pos_emb.value[: tokens.shape[1]]
        return h

    def forward(
        self, tokens, record_hidden: bool = False
    ) -> np.ndarray | tuple[np.ndarray, list[np.ndarray]]:
        tokens = self._check_tokens(tokens)
        self._tokens = tokens
        h = self.embed(tokens)
        hidden = [h] if record_hidden else None
        for block in self.blocks:
            h = block.forward(h)
            if record_hidden:
                hidden.append(h)
        logits = self.head.forward(self.final_norm.forward(h))
        if record_hidden:
            return logits, hidden
        return logits

    def backward(self, grad_logits: np.ndarray) -> None:
        gh = self.final_norm.backward(self.head.backward(grad_logits))
        for block in reversed(self.blocks):
            gh = block.backward(gh)
        if self.pos_emb is not None:
            t = gh.shape[1]
            self.pos_emb.grad[:t] += gh.sum(axis=0)
        np.add.at(self.tok_emb.grad, self._tokens, gh)

    def params(self) -> list[Param]:
        ps = [self.tok_emb]
        if self.pos_emb is not None:
            ps.append(self.pos_emb)
        for block in self.blocks:
            ps.extend(block.params())
        ps.extend(self.final_norm.params())
        ps.extend(self.head.params())
        return ps

    def param_dict(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def zero_grads(self) -> None:
        for p in self.params():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params())


def lm_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean next-token cross entropy with log-sum-exp stabilization."""
    return _loss_impl(logits, targets)[0]


def lm_loss_and_grad(
    logits: np.ndarray, targets: np.ndarray, grad_scale: float = 1.0
) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. logits, scaled by ``grad_scale``."""
    return _loss_impl(logits, targets, with_grad=True, grad_scale=grad_scale)


def _loss_impl(logits, targets, with_grad=False, grad_scale=1.0):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None, :]
    if logits.ndim == 2:
        logits = logits[None, :, :]
    n = targets.size
    m = logits.max(axis=-1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)
    loss = float(np.sum(lse - picked) / n)
    if not with_grad:
        return loss, None
    probs = np.exp(logits - lse)
    b_idx, t_idx = np.indices(targets.shape)
    probs[b_idx, t_idx, targets] -= 1.0
    return loss, probs * (grad_scale / n)
