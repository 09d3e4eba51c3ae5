import numpy as np
import pytest

from minifp.downstream import (
    FoldTooSmall,
    HeadConfig,
    MissingFingerprint,
    SingleClass,
    SweepSpace,
    TaskData,
    ZeroVariance,
    auprc,
    auroc,
    compute_metric,
    config1_space,
    config2_space,
    correlation_analysis,
    ensemble_predict,
    kfold_ensemble,
    kfold_partition,
    mae,
    midranks,
    spearman_rho,
    sweep,
    train_head,
)
from minifp.fingerprints import FingerprintStore
from minifp.multitask import LabelSet


def make_store(n, d, seed=0):
    rng = np.random.default_rng(seed)
    store = FingerprintStore(d)
    vectors = rng.standard_normal((n, d)).astype(np.float32)
    ids = [f"m{i}" for i in range(n)]
    for i, vec in zip(ids, vectors):
        store.add(i, vec)
    return store, ids, vectors


def separable_task(n=60, d=6, seed=0):
    store, ids, vectors = make_store(n, d, seed)
    labels = (vectors[:, 0] > 0).astype(float).reshape(-1, 1)
    data = TaskData(ids=ids, labels=LabelSet(labels, np.ones_like(labels)), kind="binary")
    return store, data, vectors


# -- metric oracles -----------------------------------------------------------


def brute_force_auroc(scores, labels):
    scores = np.asarray(scores, dtype=float)
    pos = scores[np.asarray(labels) == 1]
    neg = scores[np.asarray(labels) == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(4, 50))
        # Quantized scores force ties.
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) == brute_force_auroc(scores, labels)


def test_auroc_single_class():
    with pytest.raises(SingleClass):
        auroc([0.1, 0.2], [1, 1])


def test_auprc_perfect_and_known_case():
    assert auprc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    # Descending walk: hits at ranks 1 and 3 -> AP = (1/2)(1 + 2/3) = 5/6.
    value = auprc([0.9, 0.8, 0.7], [1, 0, 1])
    assert value == pytest.approx(5 / 6, rel=1e-12)


def test_mae_metric():
    assert mae([1.0, 2.0], [0.0, 4.0]) == 1.5


def test_midranks_with_ties():
    np.testing.assert_array_equal(midranks([10.0, 20.0, 20.0, 30.0]), [1.0, 2.5, 2.5, 4.0])


def test_spearman_examples():
    rho, _ = spearman_rho([1, 2, 3, 5], [10, 20, 40, 80])
    assert rho == pytest.approx(1.0)
    rho, _ = spearman_rho([1, 2, 3, 5], [80, 40, 20, 10])
    assert rho == pytest.approx(-1.0)
    rho, _ = spearman_rho([1, 2, 3, 4], [1, 3, 2, 4])
    assert rho == pytest.approx(0.8, rel=1e-12)


def test_spearman_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(12)
    y = rng.standard_normal(12)
    rho, p = spearman_rho(x, y)
    rho2, p2 = spearman_rho(np.exp(x), y)
    rho3, p3 = spearman_rho(x, y**3)
    assert rho == pytest.approx(rho2, rel=1e-12)
    assert rho == pytest.approx(rho3, rel=1e-12)
    assert p == pytest.approx(p2, rel=1e-9)


def test_spearman_exact_permutation_p_value():
    # For n = 4 and perfectly concordant ranks, 2 of 24 permutations reach
    # |rho| = 1 (identity and reversal): p = 1/12.
    _, p = spearman_rho([1, 2, 3, 4], [10, 20, 30, 40])
    assert p == pytest.approx(2 / 24, rel=1e-12)


def test_spearman_t_approximation_branch():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(30)
    y = x + rng.standard_normal(30) * 0.2
    rho, p = spearman_rho(x, y)
    assert rho > 0.9
    assert p < 1e-6
    # Compare against scipy's spearman as an oracle for the large-n branch.
    from scipy import stats

    oracle = stats.spearmanr(x, y)
    assert rho == pytest.approx(oracle.statistic, rel=1e-12)
    assert p == pytest.approx(oracle.pvalue, rel=1e-6)


def test_spearman_errors():
    with pytest.raises(ZeroVariance):
        spearman_rho([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        spearman_rho([1.0, 2.0], [1.0, 2.0])


# -- head training -----------------------------------------------------------


def quick_config(**overrides):
    base = dict(hidden_dim=16, num_layers=2, dropout=0.0, learning_rate=1e-2, epochs=25, batch_size=32)
    base.update(overrides)
    return HeadConfig(**base)


def test_train_head_separable_reaches_auroc_one():
    store, data, vectors = separable_task()
    head = train_head(store, data, quick_config(), seed=0)
    pred = head.predict(vectors)
    assert auroc(pred.ravel(), data.labels.values.ravel()) == 1.0


def test_train_head_constant_regression_converges():
    store, ids, vectors = make_store(40, 4, seed=3)
    labels = np.full((40, 1), 2.5)
    data = TaskData(ids=ids, labels=LabelSet(labels, np.ones_like(labels)), kind="regression")
    # MAE gradients are sign-based, so a decaying schedule is needed to settle.
    head = train_head(
        store, data, quick_config(epochs=200, learning_rate=3e-2, schedule="linear-decay"), seed=0
    )
    assert mae(head.predict(vectors).ravel(), labels.ravel()) < 0.05


def test_train_head_deterministic_curves():
    store, data, _ = separable_task()
    a = train_head(store, data, quick_config(), seed=5)
    b = train_head(store, data, quick_config(), seed=5)
    assert a.val_curve == b.val_curve
    for pa, pb in zip(a.params, b.params):
        np.testing.assert_array_equal(pa.value, pb.value)


@pytest.mark.parametrize("norm", ["batch", "layer"])
@pytest.mark.parametrize("skip", [False, True])
def test_train_head_variants_run(norm, skip):
    store, data, vectors = separable_task(n=30)
    cfg = quick_config(normalization=norm, skip_connection=skip, dropout=0.1, epochs=5)
    head = train_head(store, data, cfg, seed=1)
    pred = head.predict(vectors)
    assert np.isfinite(pred).all()
    assert pred.shape == (30, 1)


def test_train_head_best_epoch_restored():
    store, data, _ = separable_task(n=40)
    head = train_head(store, data, quick_config(epochs=10), seed=2)
    assert head.best_epoch >= 1
    assert min(head.val_curve) == head.val_curve[head.best_epoch - 1]


def test_missing_fingerprint_enumerated():
    store, data, _ = separable_task(n=10)
    data.ids[3] = "absent"
    with pytest.raises(MissingFingerprint) as exc:
        train_head(store, data, quick_config(epochs=1), seed=0)
    assert "absent" in str(exc.value)


# -- sweeps -------------------------------------------------------------------


def test_sweep_presets_sizes():
    assert len(config1_space().configs) == 5
    assert {c.learning_rate for c in config1_space().configs} == {0.001, 0.0005, 0.0003, 0.0001, 5e-5}
    assert all(c.epochs == 25 and c.hidden_dim == 1024 and c.num_layers == 3 for c in config1_space().configs)
    assert len(config2_space().configs) == 2 * 3 * 3 * 2 * 2 * 2 * 3


def test_sweep_single_point():
    store, data, _ = separable_task(n=20)
    cfg = quick_config(epochs=2)
    best, rows = sweep(SweepSpace("one", [cfg]), store, data, seed=0)
    assert best == cfg
    assert len(rows) == 1


def test_sweep_picks_non_underfit_config():
    store, data, _ = separable_task(n=40)
    underfit = quick_config(learning_rate=1e-12, epochs=5)
    good = quick_config(learning_rate=1e-2, epochs=5)
    best, rows = sweep(SweepSpace("two", [underfit, good]), store, data, seed=0)
    assert best == good
    assert len(rows) == 2


def test_sweep_invariant_to_enumeration_order():
    store, data, _ = separable_task(n=30)
    configs = [quick_config(learning_rate=lr, epochs=3) for lr in (1e-2, 1e-3, 1e-4)]
    best_fwd, _ = sweep(SweepSpace("f", configs), store, data, seed=1)
    best_rev, _ = sweep(SweepSpace("r", configs[::-1]), store, data, seed=1)
    assert best_fwd == best_rev


# -- ensembling ---------------------------------------------------------------


def test_kfold_partition_properties():
    folds = kfold_partition(23, 5, seed=0)
    assert len(folds) == 5
    combined = np.sort(np.concatenate(folds))
    np.testing.assert_array_equal(combined, np.arange(23))
    again = kfold_partition(23, 5, seed=0)
    for a, b in zip(folds, again):
        np.testing.assert_array_equal(a, b)
    # Each example is held out exactly once => in num_folds - 1 training sets.
    counts = np.zeros(23, dtype=int)
    for fold in folds:
        counts[fold] += 1
    assert (counts == 1).all()


def test_kfold_partition_too_small():
    with pytest.raises(FoldTooSmall):
        kfold_partition(3, 5, seed=0)


def test_ensemble_of_identical_models_equals_single():
    store, data, vectors = separable_task(n=20)
    head = train_head(store, data, quick_config(epochs=3), seed=0)
    single = head.predict(vectors)
    combined = ensemble_predict([head, head, head], vectors)
    np.testing.assert_array_equal(single, combined)


def test_kfold_ensemble_single_rep_warns_and_zero_std():
    store, data, _ = separable_task(n=50)
    with pytest.warns(UserWarning):
        result = kfold_ensemble(store, data, quick_config(epochs=2), num_folds=2, num_reps=1, metric="auroc", seed=0)
    assert result.val_std == 0.0
    assert result.test_std == 0.0
    assert len(result.repetitions) == 1


def test_kfold_ensemble_shape_and_determinism():
    store, data, _ = separable_task(n=60)
    kwargs = dict(num_folds=3, num_reps=2, metric="auroc", seed=4)
    a = kfold_ensemble(store, data, quick_config(epochs=3), **kwargs)
    b = kfold_ensemble(store, data, quick_config(epochs=3), **kwargs)
    assert len(a.repetitions) == 2
    assert all(len(r.fold_val_scores) == 3 for r in a.repetitions)
    assert a.summary() == b.summary()
    summary = a.summary()
    assert set(summary) == {"metric", "num_folds", "num_reps", "val_mean", "val_std", "test_mean", "test_std"}
    assert 0.0 <= summary["test_mean"] <= 1.0


def test_kfold_ensemble_regression_metric():
    store, ids, vectors = make_store(40, 4, seed=9)
    labels = (vectors[:, :1] * 2.0).astype(float)
    data = TaskData(ids=ids, labels=LabelSet(labels, np.ones_like(labels)), kind="regression")
    result = kfold_ensemble(store, data, quick_config(epochs=10), num_folds=2, num_reps=2, metric="mae", seed=0)
    assert result.higher_is_better is False
    assert result.test_mean >= 0.0


# -- correlation analysis --------------------------------------------------------


def test_correlation_sign_algebra():
    # Pretrain MAE (lower better) improves exactly when downstream AUROC
    # (higher better) improves: signed correlation is +1.
    runs = 8
    quality = np.linspace(0, 1, runs)
    pretrain = (1.0 - quality).reshape(-1, 1)  # MAE falls as quality rises
    downstream = (0.5 + quality / 2).reshape(-1, 1)  # AUROC rises
    table = correlation_analysis(pretrain, downstream, [-1], [+1], ["mae"], ["auroc"])
    assert table.values[0, 0] == pytest.approx(1.0)
    assert table.significant[0, 0]


def test_correlation_identical_columns():
    col = np.array([0.2, 0.5, 0.9, 0.4, 0.7, 0.1]).reshape(-1, 1)
    table = correlation_analysis(col, col, [+1], [+1])
    assert table.values[0, 0] == pytest.approx(1.0)
    assert table.p_values[0, 0] < 0.1


def test_correlation_anticorrelated_entry():
    quality = np.linspace(0, 1, 6)
    pre = quality.reshape(-1, 1)  # higher-better pretrain metric
    down = (1.0 - quality).reshape(-1, 1)  # higher-better downstream metric falling
    table = correlation_analysis(pre, down, [+1], [+1])
    assert table.values[0, 0] == pytest.approx(-1.0)


def test_correlation_independent_columns_masked():
    rng = np.random.default_rng(3)
    masked = 0
    trials = 30
    for _ in range(trials):
        pre = rng.standard_normal((6, 1))
        down = rng.standard_normal((6, 1))
        table = correlation_analysis(pre, down, [+1], [+1])
        if not table.significant[0, 0]:
            masked += 1
    assert masked > trials * 0.6


def test_correlation_requires_three_runs():
    with pytest.raises(ValueError, match="3 paired runs"):
        correlation_analysis(np.zeros((2, 1)), np.zeros((2, 1)), [+1], [+1])


def test_correlation_masked_values_nan():
    rng = np.random.default_rng(4)
    pre = rng.standard_normal((6, 2))
    down = rng.standard_normal((6, 2))
    table = correlation_analysis(pre, down, [+1, -1], [+1, -1])
    masked = table.masked_values()
    assert np.isnan(masked[~table.significant]).all()


def test_compute_metric_dispatch():
    assert compute_metric("auroc", [0.1, 0.9], [0, 1]) == 1.0
    assert compute_metric("mae", [1.0], [3.0]) == 2.0
