"""Command-line entry points: run manifests in, metrics files out.

Manifests are JSON (schema documented in the README); every metrics row
carries a short hash of the manifest so output files are traceable to the
exact configuration. Exit codes: 2 for configuration problems, 3 for
numerical failures, 4 for IO failures.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import data_io, fcnn, harness, yes_lm
from .diagnostics import gradient_suite
from .errors import NumericalFailure, TraincertError
from .linalg import Rng
from .metrics import MetricsSink
from .quantization import QuantSpec
from .transformer import DecoderLm, LmConfig


def manifest_hash(manifest: dict) -> str:
    canonical = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise TraincertError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TraincertError(f"manifest {path} is not valid JSON: {exc}") from exc


def _quant_spec(manifest: dict) -> QuantSpec:
    section = manifest.get("quant")
    if not section:
        return QuantSpec()
    return QuantSpec(
        scheme=section.get("scheme", "none"),
        lam=section.get("lambda", 1.0),
        zero_sign=section.get("zero_sign", 1),
    )


def _lm_config(manifest: dict) -> LmConfig:
    m = manifest["model"]
    quant = _quant_spec(manifest)
    return LmConfig(
        style=m["style"],
        vocab_size=m["vocab_size"],
        context_len=m["context_len"],
        d_model=m["d_model"],
        n_heads=m["n_heads"],
        d_ff=m["d_ff"],
        n_layers=m["n_layers"],
        quant=quant if quant.enabled else None,
    )


def _opt_config(manifest: dict) -> harness.OptimizerConfig:
    o = manifest.get("optimizer", {})
    schedule = None
    if o.get("schedule"):
        schedule = harness.StepDecay(
            factor=o["schedule"]["factor"], every_n_epochs=o["schedule"]["every"]
        )
    return harness.OptimizerConfig(
        kind=o.get("kind", "adamw"),
        lr=o.get("lr", 1e-3),
        betas=tuple(o.get("betas", (0.9, 0.999))),
        eps=o.get("eps", 1e-8),
        weight_decay=o.get("weight_decay", 0.01),
        schedule=schedule,
    )


def _run_config(manifest: dict, seed, monitor_every) -> harness.RunConfig:
    r = manifest.get("run", {})
    return harness.RunConfig(
        epochs=r.get("epochs", 1),
        batch_size=r.get("batch_size", 8),
        grad_accum_steps=r.get("grad_accum_steps", 1),
        monitor_every=monitor_every or r.get("monitor_every", 1),
        seed=seed if seed is not None else manifest.get("seed", 0),
        cache_size=r.get("cache_size"),
    )


def _permutations(manifest: dict) -> list[yes_lm.PermutationSpec]:
    suite = manifest.get("yes", {}).get("suite", [])
    perms = []
    for i, entry in enumerate(suite):
        if isinstance(entry, dict):
            perms.append(
                yes_lm.PermutationSpec(
                    tuple(entry["targets"]), name=entry.get("name", f"YES{i + 1}")
                )
            )
        else:
            perms.append(yes_lm.PermutationSpec(tuple(entry), name=f"YES{i + 1}"))
    return perms


def _fit_config(manifest: dict) -> yes_lm.YesFitConfig:
    y = manifest.get("yes", {})
    return yes_lm.YesFitConfig(
        layer_lr=y.get("layer_lr", 1e-3),
        head_lr=y.get("head_lr", 5e-4),
        iterations=y.get("iterations", 6),
        head_iterations=y.get("head_iterations", 6),
        fit_final_norm=y.get("fit_final_norm", True),
    )


def _load_corpus(manifest: dict) -> data_io.TokenCorpus:
    d = manifest["data"]
    for key in ("train_ids", "test_ids"):
        if not Path(d[key]).exists():
            raise TraincertError(f"data file missing: {d[key]}")
    return data_io.TokenCorpus(
        train_ids=data_io.load_token_ids(
            d["train_ids"], d.get("train_take"), d["vocab_size"]
        ),
        test_ids=data_io.load_token_ids(
            d["test_ids"], d.get("test_take"), d["vocab_size"]
        ),
        vocab_size=d["vocab_size"],
        context_len=manifest["model"]["context_len"],
    )


def draw_cache(
    model: DecoderLm,
    ids: np.ndarray,
    cache_size: int,
    context_len: int,
    rng: Rng,
    epoch: int,
) -> yes_lm.TeacherCache:
    """Sample a fresh cache batch of windows and record teacher hiddens."""
    inputs, targets = data_io.windows(ids, context_len)
    rows = rng.permutation(inputs.shape[0])[:cache_size]
    return yes_lm.cache_teacher(model, inputs[rows], targets[rows], epoch)


def _suite_monitor(sink, corpus, perms, run_cfg, fit_cfg, eval_split_names, seed):
    eval_arrays = {}
    if "train" in eval_split_names:
        eval_arrays["train"] = corpus.train_ids
    if "test" in eval_split_names:
        eval_arrays["test"] = corpus.test_ids

    def monitor(model: DecoderLm, epoch: int) -> None:
        if "test" in eval_arrays:
            sink.emit(
                epoch,
                "train",
                "test",
                harness.evaluate_lm(
                    model, corpus.test_ids, run_cfg.batch_size, corpus.context_len
                ),
            )
        if not perms:
            return
        cache = draw_cache(
            model,
            corpus.train_ids,
            run_cfg.cache_size or run_cfg.batch_size,
            corpus.context_len,
            Rng(seed).derive("cache", epoch),
            epoch,
        )
        results = yes_lm.run_yes_suite(
            model,
            perms,
            cache,
            epoch,
            seed,
            eval_arrays,
            run_cfg.batch_size,
            corpus.context_len,
            fit_cfg,
        )
        for name, entry in results.items():
            for split, value in entry.evals.items():
                sink.emit(epoch, name, split, value)

    return monitor


def run_train_lm(
    manifest: dict,
    out_dir,
    seed: int | None = None,
    monitor_every: int | None = None,
    resume_from=None,
) -> harness.TrainResult:
    """Train a decoder-only model and audit it with the configured suite."""
    mhash = manifest_hash(manifest)
    cfg = _lm_config(manifest)
    corpus = _load_corpus(manifest)
    run_cfg = _run_config(manifest, seed, monitor_every)
    opt_cfg = _opt_config(manifest)
    perms = _permutations(manifest)
    for perm in perms:
        yes_lm.require_valid_permutation(perm, cfg.n_layers)
    fit_cfg = _fit_config(manifest)
    eval_split_names = manifest.get("yes", {}).get("eval_splits", ["train"])

    model = DecoderLm(cfg, Rng(run_cfg.seed).derive("model"))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with MetricsSink(out_dir, mhash) as sink:
        monitor = _suite_monitor(
            sink, corpus, perms, run_cfg, fit_cfg, eval_split_names, run_cfg.seed
        )
        result = harness.train_lm(
            model,
            corpus,
            run_cfg,
            opt_cfg,
            on_epoch=lambda e, loss: sink.emit(e, "train", "train", loss),
            monitor=monitor,
            out_dir=out_dir,
            manifest_hash=mhash,
            resume_from=resume_from,
        )
    return result


def run_train_fcnn(
    manifest: dict, out_dir, seed: int | None = None, monitor_every: int | None = None
) -> tuple[fcnn.FcnnState, fcnn.BoundCloud]:
    """Train the quantized ReLU network and emit the bound-cloud series."""
    mhash = manifest_hash(manifest)
    d = manifest["data"]
    for key in ("images", "labels"):
        if not Path(d[key]).exists():
            raise TraincertError(f"data file missing: {d[key]}")
    mnist = data_io.load_mnist_idx(d["images"], d["labels"], d.get("subset"))
    widths = tuple(manifest["model"]["layer_widths"])
    if widths[0] != mnist.images.shape[1] or widths[-1] != mnist.labels.shape[1]:
        raise TraincertError(
            f"layer widths {widths} do not match data "
            f"({mnist.images.shape[1]} -> {mnist.labels.shape[1]})"
        )
    spec = fcnn.FcnnSpec(widths, _quant_spec(manifest), manifest["model"].get("use_bias", False))
    o = manifest.get("optimizer", {})
    r = manifest.get("run", {})
    bounds = manifest.get("bounds", {})
    run_cfg = fcnn.FcnnRunConfig(
        epochs=r.get("epochs", 1),
        batch_size=r.get("batch_size", mnist.n),
        lr=o.get("lr", 1e-5),
        decay_factor=o.get("schedule", {}).get("factor", 1.0),
        decay_every=o.get("schedule", {}).get("every", 1),
        monitor_every=monitor_every or r.get("monitor_every", 1),
        seed=seed if seed is not None else manifest.get("seed", 0),
        refine_bounds=bounds.get("refine", False),
        refine_iterations=bounds.get("refine_iterations", 100),
    )
    state, cloud = fcnn.run_certified_training(
        spec, mnist.images.T, mnist.labels.T, run_cfg
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with MetricsSink(out_dir, mhash) as sink:
        for epoch, series, value in cloud.series_rows():
            sink.emit(epoch, series, "train", value)
    return state, cloud


def run_yes_eval(manifest: dict, checkpoint_path, split: str, out_dir) -> dict:
    """Rebuild the suite against a frozen checkpoint and evaluate one split."""
    mhash = manifest_hash(manifest)
    cfg = _lm_config(manifest)
    corpus = _load_corpus(manifest)
    run_cfg = _run_config(manifest, None, None)
    perms = _permutations(manifest)
    for perm in perms:
        yes_lm.require_valid_permutation(perm, cfg.n_layers)
    fit_cfg = _fit_config(manifest)

    model = DecoderLm(cfg, Rng(run_cfg.seed).derive("model"))
    tensors, meta = harness.load_checkpoint(checkpoint_path)
    if meta.get("manifest_hash") and meta["manifest_hash"] != mhash:
        raise TraincertError(
            "checkpoint/config mismatch: checkpoint was produced by a different manifest"
        )
    for name, param in model.param_dict().items():
        if name not in tensors or tuple(tensors[name].shape) != param.value.shape:
            raise TraincertError(f"checkpoint/config mismatch for tensor {name!r}")
        param.value[...] = tensors[name]
    epoch = meta["epoch"]

    ids = corpus.train_ids if split == "train" else corpus.test_ids
    results = {}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with MetricsSink(out_dir, mhash) as sink:
        if perms:
            cache = draw_cache(
                model,
                corpus.train_ids,
                run_cfg.cache_size or run_cfg.batch_size,
                corpus.context_len,
                Rng(run_cfg.seed).derive("cache", epoch),
                epoch,
            )
            results = yes_lm.run_yes_suite(
                model,
                perms,
                cache,
                epoch,
                run_cfg.seed,
                {split: ids},
                run_cfg.batch_size,
                corpus.context_len,
                fit_cfg,
            )
            for name, entry in results.items():
                sink.emit(epoch, name, split, entry.evals[split])
    return results


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _default_out(manifest: dict, out) -> Path:
    if out is not None:
        return Path(out)
    return Path(manifest.get("out_dir", f"runs/{manifest.get('experiment', 'run')}"))


def _run_guarded(fn) -> int:
    try:
        fn()
        return 0
    except NumericalFailure as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    except TraincertError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except KeyError as exc:
        click.echo(f"error: manifest is missing required key {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"io failure: {exc}", err=True)
        return 4


@click.group()
def main():
    """Training certification toolkit."""


@main.command("train-lm")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), default=None)
@click.option("--monitor-every", type=int, default=None)
@click.option("--resume", "resume_from", type=click.Path(), default=None)
def train_lm_cmd(manifest_path, seed, out, monitor_every, resume_from):
    """Train a decoder-only model with reference-bound monitoring."""

    def run():
        manifest = load_manifest(manifest_path)
        run_train_lm(
            manifest, _default_out(manifest, out), seed, monitor_every, resume_from
        )

    sys.exit(_run_guarded(run))


@main.command("train-fcnn")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", "out", type=click.Path(), default=None)
@click.option("--monitor-every", type=int, default=None)
def train_fcnn_cmd(manifest_path, seed, out, monitor_every):
    """Train a quantized ReLU network with the stair-step bound cloud."""

    def run():
        manifest = load_manifest(manifest_path)
        run_train_fcnn(manifest, _default_out(manifest, out), seed, monitor_every)

    sys.exit(_run_guarded(run))


@main.command("yes-eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["train", "test"]), default="test")
@click.option("--out", "out", type=click.Path(), default=None)
def yes_eval_cmd(manifest_path, checkpoint_path, split, out):
    """Evaluate the reference suite against a frozen checkpoint."""

    def run():
        manifest = load_manifest(manifest_path)
        run_yes_eval(manifest, checkpoint_path, split, _default_out(manifest, out))

    sys.exit(_run_guarded(run))


@main.command("gradcheck")
def gradcheck_cmd():
    """Run the finite-difference gradient suite over every primitive."""
    failed = False
    for name, report in gradient_suite():
        status = "PASS" if report.ok else "FAIL"
        failed = failed or not report.ok
        click.echo(f"{status} {name} max_rel_error={report.max_rel_error:.3e}")
    sys.exit(3 if failed else 0)


if __name__ == "__main__":
    main()
