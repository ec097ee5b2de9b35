"""Dense float64 matrix helpers: validated construction, SVD pseudoinverse,
seeded counter-based randomness, and finite-difference gradient checking.

Everything downstream works in 64-bit precision; matrices are plain
``numpy.ndarray`` values validated at construction through :func:`as_matrix`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidShape, NumericalFailure

# Singular values below this fraction of the largest one are treated as zero.
PINV_RCOND = 1e-10


def as_matrix(data) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise InvalidShape(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise NumericalFailure("matrix contains NaN or Inf entries")
    return m


def pinv(m) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``PINV_RCOND * sigma_max`` are treated as zero, so
    rank-deficient inputs are handled without blow-up.
    """
    a = as_matrix(m)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidShape(f"cannot invert a dimension-zero matrix of shape {a.shape}")
    try:
        return np.linalg.pinv(a, rcond=PINV_RCOND)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc


def least_squares_project(target, basis) -> np.ndarray:
    """Return ``target @ pinv(basis)``: the least-squares map from basis rows to target rows."""
    t = as_matrix(target)
    b = as_matrix(basis)
    if t.shape[1] != b.shape[1]:
        raise InvalidShape(
            f"target has {t.shape[1]} columns but basis has {b.shape[1]}"
        )
    return t @ pinv(b)


class Rng:
    """Seeded counter-based generator (Philox) with platform-stable streams.

    The same ``(seed, stream)`` pair always reproduces the same draw sequence.
    Derived generators for independent sub-tasks come from :meth:`derive`,
    which hashes string/int tags into a fresh key, so replaying any part of a
    run never depends on how much randomness other parts consumed.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def derive(self, *tags) -> "Rng":
        """Create an independent generator keyed by this seed plus the tags."""
        label = ":".join([str(self.seed), str(self.stream), *map(str, tags)])
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        stream = int.from_bytes(digest[8:16], "little")
        return Rng(seed, stream)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std: float) -> np.ndarray:
        """Normal draws clipped at two standard deviations."""
        return np.clip(self._gen.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)


@dataclass
class GradCheckReport:
    """Result of comparing an analytic gradient against central differences."""

    max_rel_error: float
    worst_coordinate: tuple[int, int]
    eps: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def grad_check(
    f: Callable[[np.ndarray], float],
    x,
    analytic_grad,
    eps: float = 1e-5,
) -> GradCheckReport:
    """Check ``analytic_grad`` of scalar ``f`` at ``x`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``; the
    report carries the worst coordinate. ``eps`` must lie in (0, 1e-2].
    """
    x = as_matrix(x)
    g = as_matrix(analytic_grad)
    if g.shape != x.shape:
        raise InvalidShape(f"gradient shape {g.shape} != input shape {x.shape}")
    if not (0.0 < eps <= 1e-2):
        raise NumericalFailure(f"eps={eps} outside (0, 1e-2]")

    max_rel = 0.0
    worst = (0, 0)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            xp = x.copy()
            xm = x.copy()
            xp[i, j] += eps
            xm[i, j] -= eps
            fp = float(f(xp))
            fm = float(f(xm))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalFailure(
                    f"f returned a non-finite value near coordinate ({i}, {j})"
                )
            numeric = (fp - fm) / (2.0 * eps)
            analytic = g[i, j]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
                worst = (i, j)
    return GradCheckReport(max_rel_error=max_rel, worst_coordinate=worst, eps=eps)
