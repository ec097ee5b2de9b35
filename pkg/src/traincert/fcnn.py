"""Fully connected ReLU networks with quantized-weight training, plus the
layer-wise reference-bound constructions used to audit them.

Data convention: samples are stored as columns, so layer k maps activations
``Y_k`` (d_{k-1} x n) to ``Y_{k+1} = relu(W_k @ Y_k)`` with ``Y_1 = X`` and a
linear final layer. The reference bounds replace solver output with
closed-form quantized projections:

* zero-intermediate bound: every layer projects its input straight onto the
  final target ``Y`` via a quantized least-squares map;
* intermediate-point bounds: layers before a chosen depth project onto a
  frozen activation of the trained network at that depth, the rest onto ``Y``;
  the reported value is the minimum over depths.

Optional gradient-based refinements tighten each projection in full precision
before quantization is applied once at the end (the deliberately conservative
"deferred" policy). The stair-step cloud tracks training against these bounds
and re-tightens only at epochs where training first beats the active bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidShape, InvalidSpec, NumericalFailure
from .linalg import Rng, as_matrix, pinv
from .quantization import QuantSpec, quantize

_DIVERGENCE_LIMIT = 1e12


@dataclass(frozen=True)
class FcnnSpec:
    """Architecture descriptor: widths d_0..d_K, quantizer, optional biases.

    ReLU on layers 1..K-1; the final layer is linear. Biases, when enabled,
    are absorbed as an appended constant row of the input activations.
    """

    layer_widths: tuple[int, ...]
    quant: QuantSpec = field(default_factory=QuantSpec)
    use_bias: bool = False

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise InvalidSpec("need at least one layer (input and output widths)")
        if any(w <= 0 for w in self.layer_widths):
            raise InvalidSpec(f"widths must be positive: {self.layer_widths}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


@dataclass
class FcnnState:
    """Latent full-precision weights; quantization happens in the forward pass."""

    spec: FcnnSpec
    weights: list[np.ndarray]

    def copy(self) -> "FcnnState":
        return FcnnState(self.spec, [w.copy() for w in self.weights])


@dataclass(frozen=True)
class SolverConfig:
    """Step size and budget for the iterative last-layer solver and refinements.

    ``alpha=None`` selects the conservative default ``1e-3 / ||Y_k||_F^2``.
    """

    alpha: float | None = None
    iterations: int = 50
    apply_quant_every_step: bool = True
    tol: float = 1e-8

    def __post_init__(self):
        if self.alpha is not None and self.alpha < 0:
            raise InvalidSpec(f"alpha must be non-negative, got {self.alpha}")
        if self.iterations < 1:
            raise InvalidSpec(f"iterations must be >= 1, got {self.iterations}")

    def step_size(self, yk: np.ndarray) -> float:
        if self.alpha is not None:
            return self.alpha
        norm = float(np.sum(yk * yk))
        return 1e-3 / max(norm, 1e-12)


def init_fcnn(spec: FcnnSpec, rng: Rng) -> FcnnState:
    """He-style Gaussian init on latent weights (std sqrt(2 / fan_in))."""
    weights = []
    for k in range(spec.n_layers):
        fan_in = spec.layer_widths[k] + (1 if spec.use_bias else 0)
        shape = (spec.layer_widths[k + 1], fan_in)
        weights.append(rng.normal(shape, std=np.sqrt(2.0 / fan_in)))
    return FcnnState(spec, weights)


def _augment(y: np.ndarray, use_bias: bool) -> np.ndarray:
    if not use_bias:
        return y
    return np.vstack([y, np.ones((1, y.shape[1]))])


def effective_weights(state: FcnnState, quantized: bool) -> list[np.ndarray]:
    if not quantized or not state.spec.quant.enabled:
        return state.weights
    return [quantize(w, state.spec.quant).values for w in state.weights]


def forward(state: FcnnState, x, quantized: bool = True) -> list[np.ndarray]:
    """Run the network; returns all activations ``[Y_1, ..., Y_{K+1}]``."""
    x = as_matrix(x)
    spec = state.spec
    if x.shape[0] != spec.layer_widths[0]:
        raise InvalidShape(
            f"input has {x.shape[0]} rows, expected {spec.layer_widths[0]}"
        )
    ws = effective_weights(state, quantized)
    ys = [x]
    cur = x
    for k, w in enumerate(ws):
        z = w @ _augment(cur, spec.use_bias)
        cur = np.maximum(z, 0.0) if k < spec.n_layers - 1 else z
        ys.append(cur)
    return ys


def frobenius_loss(y, y_hat) -> float:
    r = as_matrix(y) - as_matrix(y_hat)
    return float(np.sum(r * r))


def dataset_loss(state: FcnnState, x, y, quantized: bool = True) -> float:
    """Squared Frobenius residual of the (quantized) forward pass on the full set."""
    return frobenius_loss(y, forward(state, x, quantized)[-1])


def train_epoch(
    state: FcnnState,
    x,
    y,
    lr: float,
    rng: Rng,
    batch_size: int | None = None,
    quantized: bool = True,
) -> float:
    """One pass of minibatch SGD on the squared residual, straight-through
    gradients behind the quantizer; returns the post-epoch quantized loss."""
    x = as_matrix(x)
    y = as_matrix(y)
    spec = state.spec
    n = x.shape[1]
    if batch_size is None or batch_size >= n:
        order = np.arange(n)
        batch_size = n
    else:
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        cols = order[start : start + batch_size]
        xb, yb = x[:, cols], y[:, cols]
        if lr == 0.0:
            continue
        ws = effective_weights(state, quantized)
        ys = [xb]
        cur = xb
        for k, w in enumerate(ws):
            z = w @ _augment(cur, spec.use_bias)
            cur = np.maximum(z, 0.0) if k < spec.n_layers - 1 else z
            ys.append(cur)
        grad_out = 2.0 * (ys[-1] - yb)
        for k in range(spec.n_layers - 1, -1, -1):
            inp = _augment(ys[k], spec.use_bias)
            grad_w = grad_out @ inp.T
            if k > 0:
                back = ws[k].T @ grad_out
                if spec.use_bias:
                    back = back[:-1]
                grad_out = back * (ys[k] > 0)
            # STE: the quantized-forward gradient lands on the latent weight.
            state.weights[k] -= lr * grad_w
    loss = dataset_loss(state, x, y, quantized)
    if not np.isfinite(loss):
        raise NumericalFailure(f"training loss became non-finite ({loss})")
    return loss


def solve_last_layer_proximal(y, yk_star, lam: float, zero_sign: int = 1):
    """Closed-form binary last layer: ``lam * sign(Y @ pinv(Yk*))``."""
    from .quantization import binarize

    y = as_matrix(y)
    yk_star = as_matrix(yk_star)
    return binarize(y @ pinv(yk_star), lam, zero_sign)


def solve_last_layer_iterative(
    y, yk_star, lam: float, cfg: SolverConfig, zero_sign: int = 1
):
    """First-order sign-projected iteration from the proximal initializer.

    Quantization is applied at every step; returns the iterate with the
    lowest loss seen (the initializer counts), so it never does worse than
    the closed form.
    """
    from .quantization import binary_fit_loss, binarize, sign_with_zero

    if not cfg.apply_quant_every_step:
        raise InvalidArgument(
            "the last-layer solver quantizes at every iteration; "
            "use the refinement routines for deferred quantization"
        )
    y = as_matrix(y)
    yk = as_matrix(yk_star)
    alpha = cfg.step_size(yk)
    w = solve_last_layer_proximal(y, yk, lam, zero_sign).values
    best_w = w
    best_loss = binary_fit_loss(y, w, yk)
    for _ in range(cfg.iterations):
        w = lam * sign_with_zero(w + alpha * (y - w @ yk) @ yk.T, zero_sign)
        loss = binary_fit_loss(y, w, yk)
        if loss > _DIVERGENCE_LIMIT:
            raise NumericalFailure(f"iterative solver diverged (loss={loss:.3e})")
        if loss < best_loss:
            best_loss = loss
            best_w = w
    return binarize(best_w, lam, zero_sign)


def refine_linear_first_order(w, y, yk, cfg: SolverConfig) -> np.ndarray:
    """Full-precision gradient refinement of a linear layer; quantization deferred.

    ``W <- W + alpha (Y - W Yk) Yk^T`` for the configured number of steps.
    """
    w = as_matrix(w).copy()
    y = as_matrix(y)
    yk = as_matrix(yk)
    alpha = cfg.step_size(yk)
    for _ in range(cfg.iterations):
        w = w + alpha * (y - w @ yk) @ yk.T
        loss = frobenius_loss(y, w @ yk)
        if not np.isfinite(loss) or loss > _DIVERGENCE_LIMIT:
            raise NumericalFailure(f"linear refinement diverged (loss={loss:.3e})")
    return w


def refine_relu_second_order(w, target, y_prev, cfg: SolverConfig) -> np.ndarray:
    """Masked Newton-style refinement of a ReLU layer in full precision.

    Each step adds ``((target - relu(W Y_prev)) * active_mask) @ pinv(Y_prev)``
    where the mask keeps only coordinates with positive preactivation. Stops
    when the loss change drops below ``cfg.tol`` or the budget runs out, and
    returns the best iterate seen (the input counts), leaving quantization to
    the caller.
    """
    w = as_matrix(w).copy()
    target = as_matrix(target)
    y_prev = as_matrix(y_prev)
    y_pinv = pinv(y_prev)

    def relu_loss(wm):
        return frobenius_loss(target, np.maximum(wm @ y_prev, 0.0))

    best_w = w
    best_loss = relu_loss(w)
    prev_loss = best_loss
    for _ in range(cfg.iterations):
        z = w @ y_prev
        residual = (target - np.maximum(z, 0.0)) * (z > 0)
        w = w + residual @ y_pinv
        loss = relu_loss(w)
        if not np.isfinite(loss) or loss > _DIVERGENCE_LIMIT:
            raise NumericalFailure(f"ReLU refinement diverged (loss={loss:.3e})")
        if loss < best_loss:
            best_loss = loss
            best_w = w
        if abs(prev_loss - loss) < cfg.tol:
            break
        prev_loss = loss
    return best_w


def _project_layer(
    target: np.ndarray,
    basis: np.ndarray,
    spec: FcnnSpec,
    last: bool,
    refine: bool,
    refine_cfg: SolverConfig,
    basis_pinv: np.ndarray | None = None,
) -> np.ndarray:
    """Quantized least-squares map from ``basis`` onto ``target`` for one layer."""
    if basis_pinv is None:
        basis_pinv = pinv(basis)
    w = target @ basis_pinv
    if refine:
        if last:
            w = refine_linear_first_order(w, target, basis, refine_cfg)
        else:
            w = refine_relu_second_order(w, target, basis, refine_cfg)
    return quantize(w, spec.quant).values


def yes0_bound(
    x,
    y,
    spec: FcnnSpec,
    refine: bool = False,
    refine_cfg: SolverConfig | None = None,
    pinv_x: np.ndarray | None = None,
) -> tuple[list[np.ndarray], float]:
    """Zero-intermediate reference: every layer projects its input onto ``Y``.

    Returns the constructed quantized weights and the final squared residual.
    ``pinv_x`` optionally reuses a precomputed pseudoinverse of the (augmented)
    input, which is constant across monitoring epochs.
    """
    x = as_matrix(x)
    y = as_matrix(y)
    cfg = refine_cfg or SolverConfig(iterations=100, apply_quant_every_step=False)
    ws: list[np.ndarray] = []
    cur = x
    for k in range(spec.n_layers):
        last = k == spec.n_layers - 1
        basis = _augment(cur, spec.use_bias)
        w = _project_layer(
            y, basis, spec, last, refine, cfg, basis_pinv=pinv_x if k == 0 else None
        )
        z = w @ basis
        cur = z if last else np.maximum(z, 0.0)
        ws.append(w)
    return ws, frobenius_loss(y, cur)


def yesk_bound(
    x,
    y,
    teacher_activations: list[np.ndarray],
    j: int,
    spec: FcnnSpec,
    refine: bool = False,
    refine_cfg: SolverConfig | None = None,
    pinv_x: np.ndarray | None = None,
) -> tuple[list[np.ndarray], float]:
    """Reference routed through the trained network's activation at depth ``j``.

    ``teacher_activations`` is the trained model's activation list
    ``[Y_1, ..., Y_{K+1}]`` at the current epoch. Layers before ``j`` project
    onto the frozen intermediate ``Y*_j``; the rest project onto ``Y``.
    ``j = 1`` targets the input itself and reduces exactly to the
    zero-intermediate bound.
    """
    x = as_matrix(x)
    y = as_matrix(y)
    k_total = spec.n_layers
    if not 1 <= j <= k_total - 1:
        raise InvalidArgument(f"intermediate index j={j} outside 1..{k_total - 1}")
    target_mid = as_matrix(teacher_activations[j - 1])
    cfg = refine_cfg or SolverConfig(iterations=100, apply_quant_every_step=False)
    ws: list[np.ndarray] = []
    cur = x
    for k in range(k_total):
        last = k == k_total - 1
        target = target_mid if k < j - 1 else y
        basis = _augment(cur, spec.use_bias)
        w = _project_layer(
            target, basis, spec, last, refine, cfg, basis_pinv=pinv_x if k == 0 else None
        )
        z = w @ basis
        cur = z if last else np.maximum(z, 0.0)
        ws.append(w)
    return ws, frobenius_loss(y, cur)


@dataclass(frozen=True)
class FcnnRunConfig:
    """Training-plus-certification run settings for the ReLU network."""

    epochs: int
    batch_size: int
    lr: float
    decay_factor: float = 0.9
    decay_every: int = 50
    monitor_every: int = 1
    seed: int = 0
    refine_bounds: bool = False
    refine_iterations: int = 100

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


@dataclass
class BoundCloud:
    """Per-epoch training losses, raw reference bounds, and the stair view.

    ``stair`` holds the active bound at each monitored epoch; it re-tightens
    only at epochs where training first beats it, and ``crossing_epochs``
    records those events (each one is a stair step down).
    """

    train_losses: list[float] = field(default_factory=list)
    monitor_epochs: list[int] = field(default_factory=list)
    yes0_value: float = 0.0
    yesk_raw: dict[int, dict[int, float]] = field(default_factory=dict)
    stair: dict[int, float] = field(default_factory=dict)
    crossing_epochs: list[int] = field(default_factory=list)

    @property
    def stairs_crossed(self) -> int:
        return len(self.crossing_epochs)

    def yesk_min(self, epoch: int) -> float:
        return min(by_epoch[epoch] for by_epoch in self.yesk_raw.values())

    def series_rows(self) -> list[tuple[int, str, float]]:
        rows = [(e, "train", v) for e, v in enumerate(self.train_losses)]
        for e in self.monitor_epochs:
            rows.append((e, "YES-0", self.yes0_value))
            rows.append((e, "YES-k", self.yesk_min(e)))
            rows.append((e, "YES-stair", self.stair[e]))
        return rows


def run_certified_training(
    spec: FcnnSpec, x, y, cfg: FcnnRunConfig
) -> tuple[FcnnState, BoundCloud]:
    """Train the quantized network and maintain the reference-bound cloud.

    Raw bound values are recorded at every monitoring epoch; the stair view
    follows the first-crossing update rule.
    """
    x = as_matrix(x)
    y = as_matrix(y)
    rng = Rng(cfg.seed)
    state = init_fcnn(spec, rng.derive("init"))
    refine_cfg = SolverConfig(
        iterations=cfg.refine_iterations, apply_quant_every_step=False
    )
    pinv_x = pinv(_augment(x, spec.use_bias))
    cloud = BoundCloud()
    cloud.yes0_value = yes0_bound(
        x, y, spec, cfg.refine_bounds, refine_cfg, pinv_x=pinv_x
    )[1]

    def record_bounds(epoch: int) -> None:
        acts = forward(state, x, quantized=True)
        for j in range(1, spec.n_layers):
            if j == 1:
                value = cloud.yes0_value
            else:
                value = yesk_bound(
                    x, y, acts, j, spec, cfg.refine_bounds, refine_cfg, pinv_x=pinv_x
                )[1]
            cloud.yesk_raw.setdefault(j, {})[epoch] = value
        cloud.monitor_epochs.append(epoch)

    active = cloud.yes0_value
    cloud.train_losses.append(dataset_loss(state, x, y, quantized=True))
    record_bounds(0)
    cloud.stair[0] = active

    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch - 1)
        loss = train_epoch(
            state, x, y, lr, rng.derive("batch", epoch), cfg.batch_size
        )
        cloud.train_losses.append(loss)
        if epoch % cfg.monitor_every == 0 or epoch == cfg.epochs:
            record_bounds(epoch)
            if loss < active:
                tighter = cloud.yesk_min(epoch)
                if tighter < active:
                    active = tighter
                    cloud.crossing_epochs.append(epoch)
            cloud.stair[epoch] = active
    return state, cloud
