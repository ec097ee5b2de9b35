"""Weight quantizers: global binary, channel-wise binary, and ternary.

The same quantizers serve two roles: inside training forwards (with
straight-through gradients to the latent full-precision weights) and inside
the closed-form reference-bound constructions. A brute-force enumerator
provides the exact optimum on tiny binary instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec, TooLarge
from .linalg import as_matrix

BINARY_GLOBAL = "binary"
BINARY_CHANNELWISE = "binary_channelwise"
TERNARY = "ternary"
NONE = "none"

_SCHEMES = (BINARY_GLOBAL, BINARY_CHANNELWISE, TERNARY, NONE)

# Keeps ternary row scales nonzero for all-zero rows.
_TERNARY_EPS = 1e-12

# Enumeration bound for the exhaustive binary minimizer.
BRUTE_FORCE_MAX_ENTRIES = 20


@dataclass(frozen=True)
class QuantSpec:
    """Quantization scheme descriptor.

    ``lam`` is the global binary scale (used by ``binary`` only) and
    ``zero_sign`` fixes the sign convention at exact zeros for the whole run.
    """

    scheme: str = NONE
    lam: float = 1.0
    zero_sign: int = 1

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise InvalidSpec(f"unknown quantization scheme {self.scheme!r}")
        if self.scheme == BINARY_GLOBAL and not self.lam > 0:
            raise InvalidSpec(f"binary scale must be positive, got {self.lam}")
        if self.zero_sign not in (1, -1):
            raise InvalidSpec(f"zero_sign must be +1 or -1, got {self.zero_sign}")

    @property
    def enabled(self) -> bool:
        return self.scheme != NONE


@dataclass
class QuantizedMatrix:
    """Quantized values plus the scheme descriptor and per-row scales that produced them."""

    values: np.ndarray
    spec: QuantSpec
    scales: np.ndarray | None = None


def sign_with_zero(w: np.ndarray, zero_sign: int = 1) -> np.ndarray:
    """Entrywise sign with a fixed convention at exact zeros."""
    s = np.sign(w)
    s[s == 0] = zero_sign
    return s


def binarize(w, lam: float, zero_sign: int = 1) -> QuantizedMatrix:
    """Global binary quantization: every entry becomes ``+-lam``."""
    if not lam > 0:
        raise InvalidSpec(f"binary scale must be positive, got {lam}")
    w = as_matrix(w)
    spec = QuantSpec(BINARY_GLOBAL, lam=lam, zero_sign=zero_sign)
    return QuantizedMatrix(values=lam * sign_with_zero(w, zero_sign), spec=spec)


def binarize_channelwise(w, zero_sign: int = 1) -> QuantizedMatrix:
    """Per-row binary quantization with mean-absolute row scales.

    A zero row gets scale 0 and quantizes to zeros.
    """
    w = as_matrix(w)
    scales = np.mean(np.abs(w), axis=1)
    values = scales[:, None] * sign_with_zero(w, zero_sign)
    spec = QuantSpec(BINARY_CHANNELWISE, zero_sign=zero_sign)
    return QuantizedMatrix(values=values, spec=spec, scales=scales)


def ternarize(w) -> QuantizedMatrix:
    """Per-row ternary quantization via absmean scaling with round-and-clip codes."""
    w = as_matrix(w)
    scales = np.mean(np.abs(w), axis=1) + _TERNARY_EPS
    codes = np.clip(np.round(w / scales[:, None]), -1.0, 1.0)
    return QuantizedMatrix(
        values=scales[:, None] * codes, spec=QuantSpec(TERNARY), scales=scales
    )


def quantize(w, spec: QuantSpec) -> QuantizedMatrix:
    """Apply the scheme selected by ``spec``; ``none`` passes values through."""
    if spec.scheme == BINARY_GLOBAL:
        return binarize(w, spec.lam, spec.zero_sign)
    if spec.scheme == BINARY_CHANNELWISE:
        return binarize_channelwise(w, spec.zero_sign)
    if spec.scheme == TERNARY:
        return ternarize(w)
    return QuantizedMatrix(values=as_matrix(w), spec=spec)


def ste_grad(upstream: np.ndarray) -> np.ndarray:
    """Straight-through estimator: the quantizer is the identity in the backward pass."""
    return np.asarray(upstream, dtype=np.float64)


def binary_fit_loss(y: np.ndarray, w: np.ndarray, yk: np.ndarray) -> float:
    """Squared Frobenius residual of approximating ``y`` by ``w @ yk``."""
    r = y - w @ yk
    return float(np.sum(r * r))


def brute_force_binary_minimizer(
    y, yk, lam: float, zero_sign: int = 1
) -> tuple[QuantizedMatrix, float]:
    """Exhaustively minimize ``||Y - W @ Yk||_F^2`` over sign matrices ``W``.

    ``W`` has shape ``rows(Y) x rows(Yk)``; at most ``BRUTE_FORCE_MAX_ENTRIES``
    entries are enumerable (2^entries candidates). Returns the global
    minimizer and its loss.
    """
    y = as_matrix(y)
    yk = as_matrix(yk)
    m, r = y.shape[0], yk.shape[0]
    n_entries = m * r
    if n_entries > BRUTE_FORCE_MAX_ENTRIES:
        raise TooLarge(
            f"{n_entries} entries exceed the enumeration bound of {BRUTE_FORCE_MAX_ENTRIES}"
        )
    n_candidates = 1 << n_entries
    # All sign patterns, one per row: bit b of candidate index selects -1/+1.
    idx = np.arange(n_candidates, dtype=np.uint64)[:, None]
    bits = (idx >> np.arange(n_entries, dtype=np.uint64)[None, :]) & 1
    candidates = lam * (2.0 * bits.astype(np.float64) - 1.0).reshape(n_candidates, m, r)
    residuals = y[None, :, :] - candidates @ yk
    losses = np.sum(residuals * residuals, axis=(1, 2))
    best = int(np.argmin(losses))
    w_best = candidates[best]
    spec = QuantSpec(BINARY_GLOBAL, lam=lam, zero_sign=zero_sign)
    return QuantizedMatrix(values=w_best, spec=spec), float(losses[best])
