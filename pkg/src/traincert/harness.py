"""Optimizers, step-decay scheduling, the language-model training loop with
gradient accumulation, split evaluation, and bit-exact checkpointing.

The training loop is deterministic: every random stream is derived from the
run seed plus a purpose tag (batch order per epoch, reference-model inits per
monitoring epoch), so resuming from a checkpoint reproduces the uninterrupted
trajectory exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data_io
from .errors import FormatError, InvalidArgument, InvalidSpec, NumericalFailure
from .linalg import Rng
from .transformer import DecoderLm, Param, lm_loss_and_grad


@dataclass(frozen=True)
class StepDecay:
    """Multiplicative decay: lr is scaled by ``factor`` every ``every_n_epochs``."""

    factor: float
    every_n_epochs: int

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise InvalidSpec(f"decay factor must be in (0, 1], got {self.factor}")
        if self.every_n_epochs < 1:
            raise InvalidSpec("every_n_epochs must be >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: StepDecay | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise InvalidSpec(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise InvalidSpec(f"learning rate must be positive, got {self.lr}")


def lr_at(epoch: int, cfg: OptimizerConfig) -> float:
    """Scheduled learning rate: ``lr * factor^(epoch // every_n)``."""
    if epoch < 0:
        raise InvalidArgument(f"epoch must be >= 0, got {epoch}")
    if cfg.schedule is None:
        return cfg.lr
    return cfg.lr * cfg.schedule.factor ** (epoch // cfg.schedule.every_n_epochs)


class Sgd:
    """Plain gradient descent: ``p <- p - lr * g``."""

    def __init__(self, params: list[Param], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.cfg.lr if lr is None else lr
        self.t += 1
        for p in self.params:
            p.value -= lr * p.grad

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t


class AdamW:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: list[Param], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, lr: float | None = None) -> None:
        lr = self.cfg.lr if lr is None else lr
        b1, b2 = self.cfg.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p in self.params:
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            update = (m / bc1) / (np.sqrt(v / bc2) + self.cfg.eps)
            p.value -= lr * (update + self.cfg.weight_decay * p.value)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name in self.m:
            self.m[name][...] = tensors[f"opt.m.{name}"]
            self.v[name][...] = tensors[f"opt.v.{name}"]


def make_optimizer(params: list[Param], cfg: OptimizerConfig):
    return Sgd(params, cfg) if cfg.kind == "sgd" else AdamW(params, cfg)


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container of named float64 tensors.
# Layout: 8-byte magic, little-endian u32 header length, JSON header with
# sorted keys ({"meta": ..., "tensors": [{name, shape, offset, nbytes}]}),
# then raw little-endian C-order tensor bytes.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TCCKPT01"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    (header_len,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + header_len:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=12) from exc
    data_start = 12 + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = data_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise FormatError(
                f"truncated tensor data for {entry['name']!r}", offset=len(raw)
            )
        arr = np.frombuffer(raw[start:end], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, header["meta"]


def model_tensors(model: DecoderLm) -> dict[str, np.ndarray]:
    return {p.name: p.value for p in model.params()}


def save_run_checkpoint(
    path, model: DecoderLm, optimizer, epoch: int, seed: int, manifest_hash: str = ""
) -> None:
    tensors = dict(model_tensors(model))
    tensors.update(optimizer.state_tensors())
    meta = {
        "epoch": epoch,
        "manifest_hash": manifest_hash,
        "opt_t": optimizer.t,
        "rng": {"seed": seed, "next_epoch": epoch + 1},
        "version": 1,
    }
    save_checkpoint(path, tensors, meta)


def restore_run_checkpoint(path, model: DecoderLm, optimizer) -> dict:
    tensors, meta = load_checkpoint(path)
    params = model.param_dict()
    for name, p in params.items():
        if name not in tensors:
            raise InvalidArgument(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != p.value.shape:
            raise InvalidArgument(
                f"checkpoint/config mismatch for {name!r}: "
                f"{tensors[name].shape} vs {p.value.shape}"
            )
        p.value[...] = tensors[name]
    optimizer.load_state(tensors, meta["opt_t"])
    return meta


# ---------------------------------------------------------------------------
# Training and evaluation.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Epoch/batch/monitoring layout of one training run."""

    epochs: int
    batch_size: int
    grad_accum_steps: int = 1
    monitor_every: int = 1
    seed: int = 0
    cache_size: int | None = None

    def __post_init__(self):
        if self.grad_accum_steps < 1:
            raise InvalidSpec("grad_accum_steps must be >= 1")
        if self.monitor_every < 1:
            raise InvalidSpec("monitor_every must be >= 1")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    checkpoint_path: str | None = None
    monitored_epochs: list[int] = field(default_factory=list)


def train_step(
    model: DecoderLm, inputs: np.ndarray, targets: np.ndarray, grad_accum_steps: int
) -> float:
    """Accumulate gradients over micro-batches; returns the batch mean loss.

    Micro-batch gradients are token-weighted so the result matches the
    concatenated batch exactly, whatever the split.
    """
    model.zero_grads()
    total_tokens = targets.size
    chunks = np.array_split(np.arange(inputs.shape[0]), grad_accum_steps)
    loss = 0.0
    for rows in chunks:
        if rows.size == 0:
            continue
        logits = model.forward(inputs[rows])
        chunk_tokens = targets[rows].size
        chunk_loss, dlogits = lm_loss_and_grad(
            logits, targets[rows], grad_scale=chunk_tokens / total_tokens
        )
        model.backward(dlogits)
        loss += chunk_loss * (chunk_tokens / total_tokens)
    if not np.isfinite(loss):
        raise NumericalFailure(f"batch loss became non-finite ({loss})")
    return loss


def evaluate_lm(
    model: DecoderLm, ids: np.ndarray, batch_size: int, context_len: int
) -> float:
    """Mean next-token cross entropy over all full windows of a split.

    Deterministic (canonical window order) and side-effect free.
    """
    inputs, targets = data_io.windows(ids, context_len)
    if inputs.shape[0] == 0:
        raise InvalidArgument("split too short for a single context window")
    total_tokens = targets.size
    loss = 0.0
    for start in range(0, inputs.shape[0], batch_size):
        inp = inputs[start : start + batch_size]
        tgt = targets[start : start + batch_size]
        chunk_loss, _ = lm_loss_and_grad(model.forward(inp), tgt)
        loss += chunk_loss * (tgt.size / total_tokens)
    return float(loss)


def evaluate_split(model, data, batch_size: int | None = None, context_len: int | None = None) -> float:
    """Objective value on a held split: CE for language models, squared
    Frobenius residual for the fully connected networks."""
    from . import fcnn as fcnn_mod

    if isinstance(model, DecoderLm):
        return evaluate_lm(model, data, batch_size, context_len)
    if isinstance(model, fcnn_mod.FcnnState):
        x, y = data
        return fcnn_mod.dataset_loss(model, x, y, quantized=True)
    raise InvalidArgument(f"cannot evaluate object of type {type(model).__name__}")


def train_lm(
    model: DecoderLm,
    corpus: data_io.TokenCorpus,
    run_cfg: RunConfig,
    opt_cfg: OptimizerConfig,
    on_epoch: Callable[[int, float], None] | None = None,
    monitor: Callable[[DecoderLm, int], None] | None = None,
    out_dir: str | Path | None = None,
    manifest_hash: str = "",
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train with per-epoch passes over the token subset.

    ``on_epoch(epoch, loss)`` fires for every epoch (0 is the pre-training
    evaluation); ``monitor(model, epoch)`` fires at monitoring epochs with the
    model frozen for the duration of the call. A checkpoint is written at
    every monitoring epoch when ``out_dir`` is given; a non-finite loss aborts
    the run, leaving the last good checkpoint in place.
    """
    rng = Rng(run_cfg.seed)
    optimizer = make_optimizer(model.params(), opt_cfg)
    ckpt_path = Path(out_dir) / "checkpoint.ckpt" if out_dir is not None else None
    result = TrainResult(checkpoint_path=str(ckpt_path) if ckpt_path else None)

    def monitored(epoch: int) -> bool:
        return epoch % run_cfg.monitor_every == 0 or epoch == run_cfg.epochs

    def run_monitor(epoch: int) -> None:
        if ckpt_path is not None:
            # Latest plus a per-epoch file, so any monitored epoch can be resumed.
            save_run_checkpoint(
                ckpt_path, model, optimizer, epoch, run_cfg.seed, manifest_hash
            )
            save_run_checkpoint(
                ckpt_path.with_name(f"checkpoint_e{epoch:04d}.ckpt"),
                model, optimizer, epoch, run_cfg.seed, manifest_hash,
            )
        if monitor is not None:
            monitor(model, epoch)
        result.monitored_epochs.append(epoch)

    start_epoch = 0
    if resume_from is not None:
        meta = restore_run_checkpoint(resume_from, model, optimizer)
        if manifest_hash and meta.get("manifest_hash") not in ("", manifest_hash):
            raise InvalidArgument(
                "checkpoint/config mismatch: checkpoint was produced by a different manifest"
            )
        start_epoch = meta["epoch"]
    else:
        initial = evaluate_lm(
            model, corpus.train_ids, run_cfg.batch_size, corpus.context_len
        )
        result.losses.append(initial)
        if on_epoch is not None:
            on_epoch(0, initial)
        run_monitor(0)

    for epoch in range(start_epoch + 1, run_cfg.epochs + 1):
        lr = lr_at(epoch - 1, opt_cfg)
        epoch_rng = rng.derive("batch", epoch)
        batch_losses = []
        for inputs, targets in data_io.batches(
            corpus.train_ids, run_cfg.batch_size, corpus.context_len, epoch_rng
        ):
            batch_losses.append(
                train_step(model, inputs, targets, run_cfg.grad_accum_steps)
            )
            optimizer.step(lr)
        epoch_loss = float(np.mean(batch_losses))
        result.losses.append(epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if monitored(epoch):
            run_monitor(epoch)
    return result
