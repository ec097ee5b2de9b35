"""Acceptance suite: one test per release criterion, each printing a
pass/fail line with its measured numbers. Run with ``pytest -s`` to see them.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from traincert.cli import load_manifest, run_train_lm
from traincert.data_io import (
    N_CLASSES,
    TokenCorpus,
    synth_classification_images,
    synth_token_stream,
    windows,
)
from traincert.diagnostics import gradient_suite
from traincert.fcnn import (
    FcnnRunConfig,
    FcnnSpec,
    SolverConfig,
    run_certified_training,
    solve_last_layer_iterative,
    solve_last_layer_proximal,
)
from traincert.harness import (
    OptimizerConfig,
    RunConfig,
    StepDecay,
    evaluate_lm,
    lr_at,
    make_optimizer,
    train_lm,
    train_step,
)
from traincert.linalg import Rng
from traincert.metrics import read_metrics_csv
from traincert.quantization import (
    QuantSpec,
    binarize,
    binarize_channelwise,
    binary_fit_loss,
    brute_force_binary_minimizer,
    ternarize,
)
from traincert.transformer import DecoderLm, LmConfig
from traincert.yes_lm import (
    PermutationSpec,
    YesFitConfig,
    fit_yes_model,
    cache_teacher,
    monotonize,
    validate_permutation,
)

REPO = Path(__file__).resolve().parent.parent


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f" — {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


def test_criterion_1_oracle_sandwich():
    """Brute force <= iterative <= proximal on 200 tiny random instances."""
    rng = Rng(1001)
    start = time.time()
    violations = 0
    shapes = [(1, 2), (2, 2), (1, 3), (2, 3)]
    for i in range(200):
        r = rng.derive("inst", i)
        m, k = shapes[i % len(shapes)]
        n = int(r.integers(3, 8))
        y = r.normal((m, n))
        yk = r.derive("basis").normal((k, n))
        lam = float(r.derive("lam").uniform((), 0.3, 2.0))
        _, brute = brute_force_binary_minimizer(y, yk, lam)
        prox = binary_fit_loss(y, solve_last_layer_proximal(y, yk, lam).values, yk)
        alpha = 0.5 / float(np.sum(yk * yk))
        iterative = binary_fit_loss(
            y,
            solve_last_layer_iterative(
                y, yk, lam, SolverConfig(alpha=alpha, iterations=60)
            ).values,
            yk,
        )
        tol = 1e-9 * max(1.0, prox)
        if not (brute <= iterative + tol and iterative <= prox + tol):
            violations += 1
    elapsed = time.time() - start
    report(
        "criterion 1: oracle sandwich",
        violations == 0 and elapsed < 10.0,
        f"200 instances, {violations} violations, {elapsed:.1f}s",
    )


def test_criterion_2_copy_through_certificate():
    """Teacher-initialized direct permutation reproduces the teacher."""
    start = time.time()
    vocab, ctx = 23, 16
    rng = Rng(1002)
    corpus = TokenCorpus(
        synth_token_stream(4000, vocab, rng.derive("train")),
        synth_token_stream(600, vocab, rng.derive("test")),
        vocab, ctx,
    )
    cfg = LmConfig(
        style="llama", vocab_size=vocab, context_len=ctx, d_model=32,
        n_heads=2, d_ff=64, n_layers=2,
    )
    teacher = DecoderLm(cfg, Rng(7).derive("model"))
    train_lm(
        teacher, corpus, RunConfig(epochs=2, batch_size=8, monitor_every=5, seed=7),
        OptimizerConfig(kind="adamw", lr=1e-3),
    )
    inputs, targets = windows(corpus.train_ids, ctx)
    cache = cache_teacher(teacher, inputs[:8], targets[:8], epoch=2)
    fit = YesFitConfig(init="teacher", head_iterations=0)
    yes, entry = fit_yes_model(
        teacher, PermutationSpec((1, 2), "direct"), cache, Rng(7).derive("ct"), fit
    )
    teacher_ce = evaluate_lm(teacher, corpus.train_ids, 8, ctx)
    yes_ce = evaluate_lm(yes, corpus.train_ids, 8, ctx)
    elapsed = time.time() - start
    worst_layer = max(entry.layer_losses)
    report(
        "criterion 2: copy-through certificate",
        worst_layer < 1e-8 and abs(teacher_ce - yes_ce) < 1e-6 and elapsed < 60.0,
        f"max layer regression loss {worst_layer:.2e}, "
        f"CE diff {abs(teacher_ce - yes_ce):.2e}, {elapsed:.1f}s",
    )


def test_criterion_3_gradient_suite():
    """Every differentiable primitive under 1e-4 relative error at eps 1e-5."""
    reports = gradient_suite()
    worst = max(r.max_rel_error for _, r in reports)
    detail = ", ".join(f"{n}={r.max_rel_error:.1e}" for n, r in reports)
    report("criterion 3: gradient suite", worst < 1e-4, detail)


@pytest.fixture(scope="module")
def fig2a_run(tmp_path_factory):
    manifest = load_manifest(REPO / "manifests" / "fig2a_llama.json")
    manifest["data"]["train_ids"] = str(REPO / manifest["data"]["train_ids"])
    manifest["data"]["test_ids"] = str(REPO / manifest["data"]["test_ids"])
    out = tmp_path_factory.mktemp("fig2a")
    start = time.time()
    run_train_lm(manifest, out)
    elapsed = time.time() - start
    return out, elapsed


def test_criterion_4_fig2a_qualitative(fig2a_run):
    """Small-corpus run with the 4-layer rotary config and 8 reference series."""
    out, elapsed = fig2a_run
    rows = read_metrics_csv(out / "metrics.csv")
    by_series = {}
    for r in rows:
        if r.split == "train":
            by_series.setdefault(r.series, []).append((r.epoch, r.raw, r.monotonized))
    yes_names = [f"YES{i}" for i in range(1, 9)]
    assert set(by_series) == {"train", *yes_names}

    train = by_series["train"]
    train_mono = {e: m for e, _, m in train}
    mono_vals = [m for _, _, m in train]
    train_ok = all(b <= a for a, b in zip(mono_vals, mono_vals[1:]))
    train_decreases = mono_vals[-1] < mono_vals[0]

    crossed = 0
    all_finite_mono = True
    for name in yes_names:
        vals = by_series[name]
        finite = all(np.isfinite(v) for _, v, _ in vals)
        mono = all(
            vals[i][2] <= vals[i - 1][2] + 1e-15 for i in range(1, len(vals))
        )
        all_finite_mono = all_finite_mono and finite and mono
        if any(train_mono[e] < m for e, _, m in vals):
            crossed += 1

    report(
        "criterion 4: qualitative small-LM reproduction",
        train_ok and train_decreases and crossed >= 4 and all_finite_mono
        and elapsed < 1800.0,
        f"crossed {crossed}/8 series, monotone view ok={train_ok}, "
        f"{elapsed:.0f}s",
    )


@pytest.fixture(scope="module")
def fcnn_runs():
    images_u8, labels = synth_classification_images(5000, Rng(20240601).derive("mnist"))
    x = (images_u8.reshape(5000, -1).astype(np.float64) / 255.0).T
    y = np.zeros((N_CLASSES, 5000))
    y[labels, np.arange(5000)] = 1.0
    spec = FcnnSpec((784, 100, 50, 10), QuantSpec("binary_channelwise"))
    start = time.time()
    clouds = {}
    for lr in (1e-5, 1e-6):
        cfg = FcnnRunConfig(
            epochs=60, batch_size=1000, lr=lr, decay_factor=0.9, decay_every=50,
            monitor_every=5, seed=7,
        )
        clouds[lr] = run_certified_training(spec, x, y, cfg)[1]
    return clouds, time.time() - start


def test_criterion_5_fcnn_stair_reproduction(fcnn_runs):
    """784-100-50-10 channel-wise run: stair structure plus lr sensitivity."""
    clouds, elapsed = fcnn_runs
    structure_ok = True
    for cloud in clouds.values():
        epochs = sorted(cloud.stair)
        for prev, cur in zip(epochs, epochs[1:]):
            changed = cloud.stair[cur] != cloud.stair[prev]
            if changed and (
                cur not in cloud.crossing_epochs
                or cloud.stair[cur] >= cloud.stair[prev]
            ):
                structure_ok = False
        for e in cloud.crossing_epochs:
            prior = [s for s in epochs if s < e]
            if cloud.train_losses[e] >= cloud.stair[prior[-1]]:
                structure_ok = False
    fast = clouds[1e-5].stairs_crossed
    slow = clouds[1e-6].stairs_crossed
    losses = clouds[1e-5].train_losses
    trend_ok = losses[50] < losses[0]
    report(
        "criterion 5: stair-step reproduction",
        structure_ok and slow < fast and fast > 0 and trend_ok and elapsed < 900.0,
        f"stairs crossed: lr 1e-5 -> {fast}, lr 1e-6 -> {slow}; "
        f"50-epoch loss trend {losses[0]:.0f} -> {losses[50]:.0f}; {elapsed:.0f}s",
    )


def test_criterion_6_unit_suites():
    """Prefix-min, scheduler closed form, permutation validation."""
    rng = Rng(1006)
    mono_ok = True
    for i in range(1000):
        series = list(rng.derive("s", i).normal((12,)))
        if monotonize(series) != [min(series[: e + 1]) for e in range(12)]:
            mono_ok = False

    sgd_sched = OptimizerConfig(kind="sgd", lr=1e-5, schedule=StepDecay(0.9, 50))
    adamw_sched = OptimizerConfig(kind="adamw", lr=2e-4, schedule=StepDecay(0.98, 50))
    sched_ok = all(
        abs(lr_at(e, sgd_sched) - 1e-5 * 0.9 ** (e // 50)) < 1e-20
        and abs(lr_at(e, adamw_sched) - 2e-4 * 0.98 ** (e // 50)) < 1e-20
        for e in (0, 49, 50, 100, 150)
    )

    from permutation_tables import FIVE_DEEP_ON_26, FOUR_DEEP, TWENTYSIX_DEEP, TWO_DEEP

    perm_ok = all(
        validate_permutation(p, 26) is None for p in FIVE_DEEP_ON_26 + TWENTYSIX_DEEP
    ) and all(validate_permutation(p, 4) is None for p in FOUR_DEEP + TWO_DEEP)

    reject_ok = validate_permutation([3, 1], 4) is not None
    for i in range(200):
        r = rng.derive("dec", i)
        n = int(r.integers(2, 7))
        vals = sorted((int(r.integers(1, 27)) for _ in range(n)), reverse=True)
        if vals[0] == vals[-1]:
            vals[-1] -= 1
        if vals[-1] < 1:
            continue
        if validate_permutation(vals, 26) is None:
            reject_ok = False

    report(
        "criterion 6: monotonize/scheduler/permutation suites",
        mono_ok and sched_ok and perm_ok and reject_ok,
        f"prefix-min ok={mono_ok}, schedules ok={sched_ok}, "
        f"permutations ok={perm_ok}, rejections ok={reject_ok}",
    )


def _determinism_manifest(tmp_path):
    from traincert.data_io import save_token_ids

    data_dir = tmp_path / "data"
    data_dir.mkdir(exist_ok=True)
    rng = Rng(77)
    save_token_ids(data_dir / "tr.bin", synth_token_stream(1500, 23, rng.derive("tr")))
    save_token_ids(data_dir / "te.bin", synth_token_stream(300, 23, rng.derive("te")))
    return {
        "experiment": "determinism",
        "kind": "lm",
        "seed": 13,
        "model": {
            "style": "gpt2", "vocab_size": 23, "context_len": 8, "d_model": 8,
            "n_heads": 2, "d_ff": 12, "n_layers": 2,
        },
        "optimizer": {"kind": "adamw", "lr": 1e-3},
        "run": {"epochs": 4, "batch_size": 4, "monitor_every": 2},
        "yes": {
            "suite": [{"name": "YES1", "targets": [1, 2]}],
            "iterations": 2, "head_iterations": 2, "eval_splits": ["train"],
        },
        "data": {
            "train_ids": str(data_dir / "tr.bin"),
            "test_ids": str(data_dir / "te.bin"),
            "vocab_size": 23,
        },
    }


def test_criterion_7_determinism_and_resume(tmp_path):
    manifest = _determinism_manifest(tmp_path)
    run_train_lm(manifest, tmp_path / "a")
    run_train_lm(manifest, tmp_path / "b")
    bytes_equal = (
        (tmp_path / "a" / "metrics.csv").read_bytes()
        == (tmp_path / "b" / "metrics.csv").read_bytes()
        and (tmp_path / "a" / "metrics.jsonl").read_bytes()
        == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    )

    resumed = run_train_lm(
        manifest, tmp_path / "resumed",
        resume_from=tmp_path / "a" / "checkpoint_e0002.ckpt",
    )
    full_rows = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    full_train = [r.raw for r in full_rows if r.series == "train"][3:]
    resume_ok = resumed.losses == full_train
    report(
        "criterion 7: determinism and resume",
        bytes_equal and resume_ok,
        f"reruns byte-identical={bytes_equal}, resume series match={resume_ok}",
    )


def test_criterion_8_quantizer_properties():
    rng = Rng(1008)
    idempotent = symmetric = ternary_codes = channel_values = True
    for i in range(1000):
        r = rng.derive("w", i)
        w = r.normal((3, 5)) * float(r.derive("scale").uniform((), 0.1, 10))
        w[w == 0] = 0.123

        qb = binarize(w, lam=1.4)
        idempotent &= bool(np.array_equal(binarize(qb.values, 1.4).values, qb.values))
        symmetric &= bool(np.array_equal(binarize(-w, 1.4).values, -qb.values))

        qc = binarize_channelwise(w)
        idempotent &= bool(np.allclose(binarize_channelwise(qc.values).values, qc.values, atol=1e-12))
        symmetric &= bool(np.allclose(binarize_channelwise(-w).values, -qc.values, atol=1e-12))
        channel_values &= bool(
            np.allclose(np.abs(qc.values), qc.scales[:, None], atol=1e-12)
        )

        qt = ternarize(w)
        codes = qt.values / qt.scales[:, None]
        ternary_codes &= bool(np.all(np.isin(np.round(codes, 9), (-1.0, 0.0, 1.0))))
        recoded = np.clip(np.round(qt.values / qt.scales[:, None]), -1, 1)
        idempotent &= bool(np.array_equal(recoded * qt.scales[:, None], qt.values))
        symmetric &= bool(np.allclose(ternarize(-w).values, -qt.values, atol=1e-12))
    report(
        "criterion 8: quantizer properties",
        idempotent and symmetric and ternary_codes and channel_values,
        f"idempotent={idempotent}, symmetric={symmetric}, "
        f"ternary codes={ternary_codes}, channel values={channel_values}",
    )


def test_criterion_9_grad_accum_equivalence():
    cfg = LmConfig(
        style="llama", vocab_size=19, context_len=6, d_model=8, n_heads=2,
        d_ff=12, n_layers=2,
    )
    finals = {}
    for accum in (1, 2):
        model = DecoderLm(cfg, Rng(61).derive("model"))
        opt = make_optimizer(model.params(), OptimizerConfig(kind="adamw", lr=1e-3))
        rng = Rng(62)
        for step in range(10):
            ids = rng.derive("batch", step).integers(0, 19, (4, 7))
            train_step(model, ids[:, :-1], ids[:, 1:], accum)
            opt.step()
        finals[accum] = {p.name: p.value.copy() for p in model.params()}
    max_diff = max(
        float(np.max(np.abs(finals[1][name] - finals[2][name])))
        for name in finals[1]
    )
    report(
        "criterion 9: gradient-accumulation equivalence",
        max_diff < 1e-10,
        f"max parameter difference after 10 steps: {max_diff:.2e}",
    )
