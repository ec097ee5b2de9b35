import numpy as np
import pytest

from traincert.errors import InvalidPermutation
from traincert.harness import evaluate_lm
from traincert.linalg import Rng
from traincert.transformer import DecoderLm, LmConfig
from traincert.yes_lm import (
    PermutationSpec,
    YesFitConfig,
    build_yes_model,
    cache_teacher,
    fit_output_head,
    fit_yes_layer,
    fit_yes_model,
    monotonize,
    require_valid_permutation,
    run_yes_suite,
    validate_permutation,
)

from permutation_tables import FIVE_DEEP_ON_26, FOUR_DEEP, TWENTYSIX_DEEP, TWO_DEEP


def tiny_teacher(style="llama", n_layers=2, d_model=16, vocab=23, ctx=8, seed=100):
    cfg = LmConfig(
        style=style, vocab_size=vocab, context_len=ctx, d_model=d_model,
        n_heads=2, d_ff=24, n_layers=n_layers,
    )
    return DecoderLm(cfg, Rng(seed).derive("teacher"))


def tiny_cache(teacher, n_seqs=4, seed=7, epoch=0):
    rng = Rng(seed)
    ids = rng.integers(0, teacher.cfg.vocab_size, (n_seqs, teacher.cfg.context_len + 1))
    return cache_teacher(teacher, ids[:, :-1], ids[:, 1:], epoch)


def test_permutation_sizes_align():
    assert all(len(p) == 26 for p in TWENTYSIX_DEEP)
    assert all(len(p) == 5 for p in FIVE_DEEP_ON_26)


def test_all_listed_permutations_validate():
    for p in FIVE_DEEP_ON_26 + TWENTYSIX_DEEP:
        assert validate_permutation(p, 26) is None, p
    for p in FOUR_DEEP:
        assert validate_permutation(p, 4) is None, p
    for p in TWO_DEEP:
        assert validate_permutation(p, 4) is None, p


def test_decreasing_permutation_rejected_with_index():
    assert validate_permutation([3, 1], 4) is not None
    with pytest.raises(InvalidPermutation) as err:
        require_valid_permutation(PermutationSpec((3, 1)), 4)
    assert err.value.index == 2


def test_depth_and_range_violations():
    assert validate_permutation([0, 1], 4) is not None
    assert validate_permutation([1, 5], 4) is not None
    assert validate_permutation([1, 1], 4) is not None  # entry 2 targets layer 1 < 2
    assert validate_permutation([], 4) is not None
    assert validate_permutation([1] * 5, 4) is not None  # deeper than teacher


def test_random_decreasing_lists_all_rejected():
    rng = Rng(55)
    for i in range(50):
        r = rng.derive("case", i)
        n = int(r.integers(2, 8))
        perm = sorted((int(r.integers(1, 9)) for _ in range(n)), reverse=True)
        if perm[0] == perm[-1]:
            perm[-1] = max(1, perm[-1] - 1)
        assert validate_permutation(perm, 8) is not None


def test_cache_rebuild_is_bit_identical():
    teacher = tiny_teacher()
    a = tiny_cache(teacher)
    b = tiny_cache(teacher)
    assert np.array_equal(a.inputs, b.inputs)
    for ha, hb in zip(a.hidden, b.hidden):
        assert np.array_equal(ha, hb)
    assert len(a.hidden) == teacher.cfg.n_layers + 1


def test_cache_frozen_against_later_teacher_updates():
    teacher = tiny_teacher()
    cache = tiny_cache(teacher)
    snapshot = [h.copy() for h in cache.hidden]
    teacher.tok_emb.value += 0.5
    for before, now in zip(snapshot, cache.hidden):
        assert np.array_equal(before, now)


def test_layer_fit_decreases_regression_loss():
    teacher = tiny_teacher(seed=41)
    cache = tiny_cache(teacher, seed=42)
    yes = build_yes_model(teacher, 1, Rng(43))
    h0 = yes.embed(cache.inputs)
    target = cache.hidden[1]
    block = yes.blocks[0]

    def mse():
        diff = block.forward(h0) - target
        return float(np.mean(diff * diff))

    losses = [mse()]
    cfg = YesFitConfig(iterations=1)
    for _ in range(6):
        fit_yes_layer(block, h0, target, cfg)
        losses.append(mse())
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_layer_fit_mse_matches_scalar_recomputation():
    teacher = tiny_teacher(seed=51)
    cache = tiny_cache(teacher, n_seqs=2, seed=52)
    yes = build_yes_model(teacher, 1, Rng(53))
    h0 = yes.embed(cache.inputs)
    target = cache.hidden[1]
    final = fit_yes_layer(yes.blocks[0], h0, target, YesFitConfig(iterations=2))
    out = yes.blocks[0].forward(h0)
    total = 0.0
    count = 0
    for i in range(out.shape[0]):
        for t in range(out.shape[1]):
            for d in range(out.shape[2]):
                total += (out[i, t, d] - target[i, t, d]) ** 2
                count += 1
    assert abs(final - total / count) < 1e-10


def test_copy_through_fixed_point():
    teacher = tiny_teacher(seed=61)
    cache = tiny_cache(teacher, seed=62)
    fit = YesFitConfig(init="teacher", head_iterations=0)
    yes, entry = fit_yes_model(
        teacher, PermutationSpec((1, 2), "direct"), cache, Rng(63), fit
    )
    assert all(loss < 1e-16 for loss in entry.layer_losses)
    ids = Rng(64).integers(0, teacher.cfg.vocab_size, 200)
    teacher_ce = evaluate_lm(teacher, ids, 4, teacher.cfg.context_len)
    yes_ce = evaluate_lm(yes, ids, 4, teacher.cfg.context_len)
    assert abs(teacher_ce - yes_ce) < 1e-12


def test_head_fit_zero_iterations_leaves_head_unchanged():
    teacher = tiny_teacher(seed=71)
    cache = tiny_cache(teacher, seed=72)
    yes = build_yes_model(teacher, 2, Rng(73))
    before = yes.head.w.value.copy()
    h = yes.embed(cache.inputs)
    for block in yes.blocks:
        h = block.forward(h)
    fit_output_head(yes, h, cache.targets, YesFitConfig(head_iterations=0))
    assert np.array_equal(before, yes.head.w.value)


def test_head_fit_on_constant_features_bounded_by_unigram_entropy():
    teacher = tiny_teacher(seed=81)
    cache = tiny_cache(teacher, n_seqs=6, seed=82)
    yes = build_yes_model(teacher, 1, Rng(83))
    h_const = np.ones((cache.size, teacher.cfg.context_len, teacher.cfg.d_model))
    ce = fit_output_head(yes, h_const, cache.targets, YesFitConfig(head_iterations=40))
    counts = np.bincount(cache.targets.reshape(-1), minlength=teacher.cfg.vocab_size)
    probs = counts / counts.sum()
    unigram_entropy = -np.sum(probs[probs > 0] * np.log(probs[probs > 0]))
    assert ce >= unigram_entropy - 1e-9


def test_freezing_discipline():
    teacher = tiny_teacher(seed=91)
    cache = tiny_cache(teacher, seed=92)
    yes = build_yes_model(teacher, 2, Rng(93))
    h0 = yes.embed(cache.inputs)
    cfg = YesFitConfig()
    fit_yes_layer(yes.blocks[0], h0, cache.hidden[1], cfg)
    layer0_snapshot = [p.value.copy() for p in yes.blocks[0].params()]
    h1 = yes.blocks[0].forward(h0)
    fit_yes_layer(yes.blocks[1], h1, cache.hidden[2], cfg)
    for snap, p in zip(layer0_snapshot, yes.blocks[0].params()):
        assert np.array_equal(snap, p.value)
    all_layers_snapshot = [
        p.value.copy() for b in yes.blocks for p in b.params()
    ]
    h2 = yes.blocks[1].forward(h1)
    fit_output_head(yes, h2, cache.targets, cfg)
    for snap, p in zip(
        all_layers_snapshot, (p for b in yes.blocks for p in b.params())
    ):
        assert np.array_equal(snap, p.value)


def test_suite_determinism():
    teacher = tiny_teacher(style="gpt2", n_layers=3, seed=101)
    cache = tiny_cache(teacher, seed=102)
    perms = [PermutationSpec((1, 2)), PermutationSpec((2, 3)), PermutationSpec((3, 3))]
    ids = Rng(103).integers(0, teacher.cfg.vocab_size, 300)
    kw = dict(
        cache=cache, epoch=4, seed=11, eval_splits={"train": ids},
        batch_size=4, context_len=teacher.cfg.context_len,
    )
    a = run_yes_suite(teacher, perms, **kw)
    b = run_yes_suite(teacher, perms, **kw)
    assert list(a) == ["YES1", "YES2", "YES3"]
    for name in a:
        assert a[name].evals == b[name].evals
        assert a[name].layer_losses == b[name].layer_losses


def test_suite_rejects_invalid_permutation():
    teacher = tiny_teacher(seed=111)
    cache = tiny_cache(teacher, seed=112)
    with pytest.raises(InvalidPermutation):
        run_yes_suite(
            teacher, [PermutationSpec((2, 1))], cache, 0, 0, {}, 4,
            teacher.cfg.context_len,
        )


def test_monotonize_examples():
    assert monotonize([3.0, 2.5, 2.7, 2.4]) == [3.0, 2.5, 2.5, 2.4]
    assert monotonize([5.0, 4.0, 3.0]) == [5.0, 4.0, 3.0]
    assert monotonize([]) == []


def test_monotonize_matches_prefix_min_oracle():
    rng = Rng(121)
    for i in range(25):
        series = list(rng.derive("s", i).normal((30,)))
        out = monotonize(series)
        expected = [min(series[: e + 1]) for e in range(len(series))]
        assert out == expected
