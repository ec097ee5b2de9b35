"""Layer-wise reference solutions for language models.

Given a frozen trained model (the teacher), this module builds cheap
reference models one layer at a time: each reference layer is regressed onto
a chosen teacher hidden state over a small cached batch, frozen, and used as
the input for the next layer; a lightweight output head is then fit with the
ordinary next-token objective while all layers stay fixed. Plugging the
result into the original objective yields an achievable baseline that the
training trajectory can be audited against.

Layer-to-target assignments are permutations ``pi``: entry ``pi(l)`` names
the teacher layer whose output reference layer ``l`` regresses onto. Valid
permutations are non-decreasing and never target a shallower layer than the
reference layer's own depth.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidPermutation
from .harness import AdamW, OptimizerConfig, evaluate_lm
from .linalg import Rng
from .transformer import DecoderLm, lm_loss_and_grad


@dataclass(frozen=True)
class PermutationSpec:
    """Assignment of reference layers to teacher-layer targets."""

    targets: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))

    @property
    def depth(self) -> int:
        return len(self.targets)

    def label(self, index: int) -> str:
        return self.name or f"YES{index + 1}"


def validate_permutation(targets, n_layers: int) -> str | None:
    """Return None when valid, else a description of the first violation.

    Rules: every target lies in 1..n_layers, targets never decrease, and
    entry ``l`` targets a layer at least as deep as ``l`` itself.
    """
    targets = tuple(int(t) for t in targets)
    if len(targets) == 0:
        return "permutation is empty"
    if len(targets) > n_layers:
        return f"depth {len(targets)} exceeds the teacher's {n_layers} layers"
    prev = 0
    for pos, t in enumerate(targets, start=1):
        if not 1 <= t <= n_layers:
            return f"entry {pos} targets layer {t}, outside 1..{n_layers}"
        if t < pos:
            return f"entry {pos} targets layer {t}, shallower than its own depth {pos}"
        if t < prev:
            return f"entry {pos} targets layer {t}, decreasing from {prev}"
        prev = t
    return None


def require_valid_permutation(spec: PermutationSpec, n_layers: int) -> None:
    message = validate_permutation(spec.targets, n_layers)
    if message is not None:
        targets = tuple(int(t) for t in spec.targets)
        index = 1
        prev = 0
        for pos, t in enumerate(targets, start=1):
            if not 1 <= t <= n_layers or t < pos or t < prev:
                index = pos
                break
            prev = t
        raise InvalidPermutation(message, index=index)


@dataclass
class TeacherCache:
    """Frozen per-layer hidden states of the teacher on a fixed token batch."""

    inputs: np.ndarray  # (n, T) token ids
    targets: np.ndarray  # (n, T) next-token ids
    hidden: list[np.ndarray]  # h^(0) .. h^(L), each (n, T, d)
    epoch: int = 0

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def cache_teacher(
    teacher: DecoderLm, inputs: np.ndarray, targets: np.ndarray, epoch: int = 0
) -> TeacherCache:
    """Record every hidden state of the frozen teacher on the cached batch."""
    _, hidden = teacher.forward(inputs, record_hidden=True)
    return TeacherCache(
        inputs=np.array(inputs, dtype=np.int64),
        targets=np.array(targets, dtype=np.int64),
        hidden=[np.array(h) for h in hidden],
        epoch=epoch,
    )


@dataclass(frozen=True)
class YesFitConfig:
    """Optimization settings for the per-layer regressions and the head fit.

    Weight decay stays off so a perfectly fitted layer is a true fixed point
    of further iterations.
    """

    layer_lr: float = 1e-3
    head_lr: float = 5e-4
    iterations: int = 6
    head_iterations: int = 6
    fit_final_norm: bool = True
    init: str = "random"  # "random" | "teacher"
    deferred_quant: bool = True


def build_yes_model(
    teacher: DecoderLm, depth: int, rng: Rng, init: str = "random"
) -> DecoderLm:
    """Fresh reference model sharing the teacher's embeddings.

    Layers, head, and final norm are randomly initialized by default; the
    ``teacher`` init copies them verbatim (used by the copy-through check).
    Fitting always happens in full precision; any quantization is re-applied
    afterwards (deferred policy).
    """
    if not 1 <= depth <= teacher.cfg.n_layers:
        raise InvalidArgument(
            f"reference depth {depth} outside 1..{teacher.cfg.n_layers}"
        )
    cfg = dataclasses.replace(teacher.cfg, n_layers=depth, quant=None)
    model = DecoderLm(cfg, rng)
    model.tok_emb.value[...] = teacher.tok_emb.value
    if model.pos_emb is not None:
        model.pos_emb.value[...] = teacher.pos_emb.value
    if init == "teacher":
        for i in range(depth):
            for dst, src in zip(model.blocks[i].params(), teacher.blocks[i].params()):
                dst.value[...] = src.value
        for dst, src in zip(model.final_norm.params(), teacher.final_norm.params()):
            dst.value[...] = src.value
        model.head.w.value[...] = teacher.head.w.value
    elif init != "random":
        raise InvalidArgument(f"unknown init mode {init!r}")
    return model


def _apply_deferred_quant(model: DecoderLm, teacher: DecoderLm) -> None:
    """Re-enable the teacher's quantizer on the fitted FFN/head weights."""
    quant = teacher.cfg.quant
    if quant is None or not quant.enabled:
        return
    for block in model.blocks:
        for lin in _ffn_linears(block):
            lin.quant = quant
    model.head.quant = quant


def _ffn_linears(block):
    ffn = block.ffn
    if hasattr(ffn, "gate"):
        return [ffn.gate, ffn.up, ffn.down]
    return [ffn.fc1, ffn.fc2]


def fit_yes_layer(
    block, inputs_h: np.ndarray, target_h: np.ndarray, cfg: YesFitConfig
) -> float:
    """Regress one layer onto its teacher target over the cache; returns the
    mean-squared regression loss after the final step. Only this layer's
    parameters move."""
    params = block.params()
    opt = AdamW(params, OptimizerConfig(kind="adamw", lr=cfg.layer_lr, weight_decay=0.0))

    def mse_and_grad():
        out = block.forward(inputs_h)
        diff = out - target_h
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size

    for _ in range(cfg.iterations):
        _, grad = mse_and_grad()
        for p in params:
            p.zero_grad()
        block.backward(grad)
        opt.step()
    return mse_and_grad()[0]


def fit_output_head(
    model: DecoderLm, h_final: np.ndarray, targets: np.ndarray, cfg: YesFitConfig
) -> float:
    """Fit the output head (and optionally the final norm) with the ordinary
    next-token objective while every layer stays frozen; returns the final
    cache cross entropy."""
    fitted = model.head.params() + (
        model.final_norm.params() if cfg.fit_final_norm else []
    )
    touched = model.head.params() + model.final_norm.params()
    opt = AdamW(fitted, OptimizerConfig(kind="adamw", lr=cfg.head_lr, weight_decay=0.0))

    def ce_and_grad():
        logits = model.head.forward(model.final_norm.forward(h_final))
        return lm_loss_and_grad(logits, targets)

    for _ in range(cfg.head_iterations):
        _, dlogits = ce_and_grad()
        for p in touched:
            p.zero_grad()
        model.final_norm.backward(model.head.backward(dlogits))
        opt.step()
    return ce_and_grad()[0]


def evaluate_yes_solution(
    model: DecoderLm, ids: np.ndarray, batch_size: int, context_len: int
) -> float:
    """Plug the fitted reference into the original objective on a split.

    Uses the identical evaluation path as the teacher.
    """
    return evaluate_lm(model, ids, batch_size, context_len)


@dataclass
class SuiteEntry:
    permutation: tuple[int, ...]
    layer_losses: list[float] = field(default_factory=list)
    head_loss: float = 0.0
    evals: dict[str, float] = field(default_factory=dict)


def fit_yes_model(
    teacher: DecoderLm,
    perm: PermutationSpec,
    cache: TeacherCache,
    rng: Rng,
    fit_cfg: YesFitConfig,
) -> tuple[DecoderLm, SuiteEntry]:
    """Build and fit one reference model for a single permutation."""
    require_valid_permutation(perm, teacher.cfg.n_layers)
    model = build_yes_model(teacher, perm.depth, rng, init=fit_cfg.init)
    entry = SuiteEntry(permutation=perm.targets)
    h = model.embed(cache.inputs)
    for layer_idx, target_layer in enumerate(perm.targets):
        block = model.blocks[layer_idx]
        entry.layer_losses.append(
            fit_yes_layer(block, h, cache.hidden[target_layer], fit_cfg)
        )
        h = block.forward(h)
    entry.head_loss = fit_output_head(model, h, cache.targets, fit_cfg)
    if fit_cfg.deferred_quant:
        _apply_deferred_quant(model, teacher)
    return model, entry


def run_yes_suite(
    teacher: DecoderLm,
    perms: list[PermutationSpec],
    cache: TeacherCache,
    epoch: int,
    seed: int,
    eval_splits: dict[str, np.ndarray],
    batch_size: int,
    context_len: int,
    fit_cfg: YesFitConfig | None = None,
) -> dict[str, SuiteEntry]:
    """Fit and evaluate one reference model per permutation.

    Each permutation gets an independent generator derived from
    ``(seed, epoch, index)``, so results replay exactly regardless of suite
    order or resumption.
    """
    fit_cfg = fit_cfg or YesFitConfig()
    results: dict[str, SuiteEntry] = {}
    for index, perm in enumerate(perms):
        rng = Rng(seed).derive("yes", epoch, index)
        model, entry = fit_yes_model(teacher, perm, cache, rng, fit_cfg)
        for split, ids in eval_splits.items():
            entry.evals[split] = evaluate_yes_solution(
                model, ids, batch_size, context_len
            )
        results[perm.label(index)] = entry
    return results


def monotonize(series) -> list[float]:
    """Prefix minimum: ``out[e] = min(series[0..e])``."""
    out: list[float] = []
    best = np.inf
    for value in series:
        best = min(best, float(value))
        out.append(best)
    return out
