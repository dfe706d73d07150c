import numpy as np
import pytest
from scipy import stats as scipy_stats

import swan.train as tr
from swan.data import GeneratorConfig, generate, split_subjects, upsample_minority
from swan.models import ModelConfig, build_variant
from swan.train import (
    CapabilityError,
    MetricError,
    TrainingError,
    confusion,
    execute_run,
    export_attention,
    gaussian_smooth,
    interval_mass_ratio,
    paired_t_test,
    paired_uars,
    read_run_table,
    run_cv,
    sweep_windows,
    train,
    uar,
    write_plot_data,
    write_run_table,
    write_summary,
    write_sweep_table,
)


@pytest.fixture(scope="module")
def tiny_dataset():
    # minority 0.35 guarantees every subject carries an event sample, so every
    # subject-level fold sees both classes
    return generate(GeneratorConfig(subjects=6, per_subject=4, minority_fraction=0.35,
                                    min_len=40, max_len=60,
                                    event_duration_s=(1.0, 2.0), seed=3))


def tiny_config(**kw):
    base = dict(variant="swan", d_model=10, heads=2, r=8, s=4, r_self=4,
                epochs=2, batch_size=8, seed=0)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# UAR


def test_uar_mean_of_class_recalls():
    labels = [1] * 10 + [0] * 10
    preds = [1] * 8 + [0] * 2 + [0] * 6 + [1] * 4  # recalls 0.8 and 0.6
    assert abs(uar(preds, labels) - 0.7) < 1e-12


def test_uar_perfect_predictions():
    labels = [0, 1, 1, 0, 1]
    assert uar(labels, labels) == 1.0


def test_uar_random_predictions_near_half():
    rng = np.random.default_rng(70)
    labels = rng.integers(0, 2, size=10000)
    while len(set(labels)) < 2:
        labels = rng.integers(0, 2, size=10000)
    preds = rng.integers(0, 2, size=10000)
    assert abs(uar(preds.tolist(), labels.tolist()) - 0.5) < 0.02


def test_uar_single_class_labels_error():
    with pytest.raises(MetricError):
        uar([0, 1, 0], [1, 1, 1])


def test_uar_length_mismatch_error():
    with pytest.raises(MetricError):
        uar([0, 1], [1, 1, 0])


def test_uar_matches_loop_oracle_on_small_vectors():
    # exhaustive over every (label, prediction) pair up to length 6
    for n in range(2, 7):
        for lab_bits in range(2 ** n):
            labels = [(lab_bits >> i) & 1 for i in range(n)]
            if len(set(labels)) < 2:
                continue
            for pred_bits in range(2 ** n):
                preds = [(pred_bits >> i) & 1 for i in range(n)]
                hit0 = sum(1 for p, l in zip(preds, labels) if l == 0 and p == 0)
                hit1 = sum(1 for p, l in zip(preds, labels) if l == 1 and p == 1)
                want = (hit0 / labels.count(0) + hit1 / labels.count(1)) / 2
                assert uar(preds, labels) == pytest.approx(want, abs=1e-15)


def test_confusion_counts():
    labels = [1, 1, 0, 0, 1, 0]
    preds = [1, 0, 0, 1, 1, 0]
    assert confusion(preds, labels) == (2, 1, 2, 1)


# ---------------------------------------------------------------------------
# paired t-test


def test_t_test_of_variant_against_itself():
    t, p = paired_t_test([0.7, 0.8, 0.9], [0.7, 0.8, 0.9])
    assert t == 0.0 and p == 1.0


def test_t_test_matches_scipy():
    rng = np.random.default_rng(71)
    a = rng.uniform(0.5, 1.0, size=15)
    b = a - rng.uniform(0.0, 0.1, size=15)
    t, p = paired_t_test(a, b)
    t_ref, p_ref = scipy_stats.ttest_rel(a, b)
    assert abs(t - t_ref) < 1e-10 and abs(p - p_ref) < 1e-12


def test_t_test_constant_nonzero_difference():
    # binary-exact quarters keep the differences literally constant
    t, p = paired_t_test([0.5, 0.75, 1.0], [0.25, 0.5, 0.75])
    assert t == np.inf and p == 0.0


def test_t_test_needs_two_runs():
    with pytest.raises(MetricError):
        paired_t_test([0.5], [0.6])


# ---------------------------------------------------------------------------
# training


def test_train_selects_argmax_validation_epoch(tiny_dataset):
    split = split_subjects(tiny_dataset, k=3, seed=0)
    train_set, val_set, _ = split.partition(tiny_dataset, 0)
    cfg = tiny_config(epochs=3)
    model = build_variant(cfg)
    report = train(model, upsample_minority(train_set, seed=0), val_set, cfg)
    assert len(report.train_losses) == 3 and len(report.val_uars) == 3
    assert report.selected_epoch == int(np.argmax(report.val_uars))
    assert report.test_uar is None


def test_train_divergence_raises_with_epoch(tiny_dataset, monkeypatch):
    import swan.tensor

    real_bce = swan.tensor.bce_loss

    def poisoned(p, y):
        out = real_bce(p, y)
        out.data = np.asarray(np.nan)
        return out

    monkeypatch.setattr(swan.tensor, "bce_loss", poisoned)
    split = split_subjects(tiny_dataset, k=3, seed=0)
    train_set, val_set, _ = split.partition(tiny_dataset, 0)
    cfg = tiny_config()
    with pytest.raises(TrainingError, match="epoch 0"):
        train(build_variant(cfg), train_set, val_set, cfg)


def test_execute_run_deterministic(tiny_dataset):
    cfg = tiny_config()
    a = execute_run(tiny_dataset, cfg, seed=1, fold=0, folds=3)
    b = execute_run(tiny_dataset, cfg, seed=1, fold=0, folds=3)
    assert a.numeric_key() == b.numeric_key()
    for x, y in zip(a.model_state, b.model_state):
        assert (x == y).all()


def test_execute_run_upsamples_only_training(tiny_dataset):
    cfg = tiny_config()
    report = execute_run(tiny_dataset, cfg, seed=2, fold=1, folds=3)
    split = split_subjects(tiny_dataset, k=3, seed=2)
    train_set, val_set, test_set = split.partition(tiny_dataset, 1)
    majority = max(sum(s.label == 1 for s in train_set), sum(s.label == 0 for s in train_set))
    assert report.n_train == 2 * majority
    assert report.n_val == len(val_set)
    assert report.n_test == len(test_set)


def test_test_fold_never_reaches_training(tiny_dataset, monkeypatch):
    seen = []
    original = tr.train

    def spy(model, train_set, val_set, config):
        seen.extend(s.segment_id for s in train_set)
        seen.extend(s.segment_id for s in val_set)
        return original(model, train_set, val_set, config)

    monkeypatch.setattr(tr, "train", spy)
    execute_run(tiny_dataset, tiny_config(), seed=3, fold=2, folds=3)
    split = split_subjects(tiny_dataset, k=3, seed=3)
    _, _, test_set = split.partition(tiny_dataset, 2)
    assert seen and not ({s.segment_id for s in test_set} & set(seen))


def test_run_cv_shape_and_aggregation(tiny_dataset):
    cfg = tiny_config()
    cv = run_cv(tiny_dataset, cfg, seeds=[0, 1], folds=3)
    assert len(cv.runs) == 6
    assert [(r.seed, r.fold) for r in cv.runs] == [(s, f) for s in (0, 1) for f in range(3)]
    assert cv.mean_uar == pytest.approx(np.mean([r.test_uar for r in cv.runs]))


def test_run_cv_annotates_failures(tiny_dataset, monkeypatch):
    import swan.tensor

    real_bce = swan.tensor.bce_loss

    def poisoned(p, y):
        out = real_bce(p, y)
        out.data = np.asarray(np.nan)
        return out

    monkeypatch.setattr(swan.tensor, "bce_loss", poisoned)
    with pytest.raises(TrainingError, match=r"fold=0, seed=0"):
        run_cv(tiny_dataset, tiny_config(), seeds=[0], folds=3)


@pytest.mark.parametrize("variant", ["swan", "swan_no_selfatt", "swan_no_winatt",
                                     "transformer", "windowed_linear"])
def test_every_variant_trains_end_to_end(tiny_dataset, variant):
    cfg = tiny_config(variant=variant, epochs=1)
    report = execute_run(tiny_dataset, cfg, seed=0, fold=0, folds=3)
    assert report.test_uar is not None and 0.0 <= report.test_uar <= 1.0
    assert report.param_count > 0 and np.isfinite(report.train_losses[0])


def test_amplitude_zero_yields_chance_uar():
    flat = generate(GeneratorConfig(subjects=10, per_subject=6, minority_fraction=0.3,
                                    min_len=40, max_len=60,
                                    event_duration_s=(1.0, 2.0), amplitude=0.0, seed=5))
    cfg = tiny_config(epochs=2)
    cv = run_cv(flat, cfg, seeds=[0], folds=5)
    assert 0.35 <= cv.mean_uar <= 0.65


# ---------------------------------------------------------------------------
# sweep


def test_sweep_windows_structure(tiny_dataset):
    cfg = tiny_config(epochs=1)
    report = sweep_windows(tiny_dataset, cfg, ranges=[4, 8], seeds=[0], folds=3,
                           variants=("swan", "windowed_linear"))
    assert len(report.points) == 4
    assert {p.variant for p in report.points} == {"swan", "windowed_linear"}
    assert all(p.n_runs == 3 for p in report.points)
    assert report.spread("swan") >= 0.0


def test_sweep_amplitude_zero_stays_at_chance():
    flat = generate(GeneratorConfig(subjects=20, per_subject=10, minority_fraction=0.3,
                                    min_len=40, max_len=60,
                                    event_duration_s=(1.0, 2.0), amplitude=0.0, seed=9))
    cfg = tiny_config(epochs=2)
    report = sweep_windows(flat, cfg, ranges=[8, 20], seeds=[0, 1], folds=5,
                           variants=("swan",))
    for point in report.points:
        assert 0.4 <= point.mean_uar <= 0.6, (point.r, point.mean_uar)


def test_sweep_single_range_spread_zero(tiny_dataset):
    cfg = tiny_config(epochs=1)
    report = sweep_windows(tiny_dataset, cfg, ranges=[6], seeds=[0], folds=3,
                           variants=("swan",))
    assert report.spread("swan") == 0.0


def test_sweep_empty_ranges_error(tiny_dataset):
    with pytest.raises(MetricError):
        sweep_windows(tiny_dataset, tiny_config(), ranges=[], seeds=[0])


# ---------------------------------------------------------------------------
# smoothing and attention export


def test_gaussian_smooth_sigma_zero_identity():
    x = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(gaussian_smooth(x, 0.0), x)


def test_gaussian_smooth_conserves_mass():
    rng = np.random.default_rng(72)
    for sigma in (0.5, 2.0, 5.0):
        x = rng.uniform(0, 1, size=200)
        assert abs(gaussian_smooth(x, sigma).sum() - x.sum()) < 1e-9
    # and at the edges, where plain convolution would leak
    spike = np.zeros(50)
    spike[0] = 1.0
    assert abs(gaussian_smooth(spike, 5.0).sum() - 1.0) < 1e-9


def test_gaussian_smooth_spreads_a_spike():
    spike = np.zeros(31)
    spike[15] = 1.0
    out = gaussian_smooth(spike, 2.0)
    assert out[15] < 1.0 and out[13] > 0.0 and abs(out.sum() - 1.0) < 1e-12


def test_interval_mass_ratio_hand_case():
    series = np.array([0.0, 0.0, 4.0, 4.0, 0.0, 0.0, 0.0, 0.0])
    assert interval_mass_ratio(series, (2, 4)) == pytest.approx(4.0)
    uniform = np.ones(10)
    assert interval_mass_ratio(uniform, (3, 7)) == pytest.approx(1.0)
    assert interval_mass_ratio(series, None) is None


def test_export_attention_sigma_zero_matches_raw(tiny_dataset):
    model = build_variant(tiny_config())
    sample = tiny_dataset[0]
    export = export_attention(model, sample, smoothing_sigma=0.0)
    np.testing.assert_array_equal(export.per_step, export.smoothed)
    assert export.n_real == sample.real_len
    assert len(export.per_step) == sample.real_len


def test_export_attention_capability_error(tiny_dataset):
    for variant in ("swan_no_winatt", "transformer"):
        model = build_variant(tiny_config(variant=variant))
        with pytest.raises(CapabilityError, match=variant):
            export_attention(model, tiny_dataset[0])


def test_export_attention_smoothing_conserves_mass(tiny_dataset):
    model = build_variant(tiny_config())
    export = export_attention(model, tiny_dataset[0], smoothing_sigma=5.0)
    assert abs(export.smoothed.sum() - export.per_step.sum()) < 1e-9


# ---------------------------------------------------------------------------
# report files


def test_run_table_roundtrip(tmp_path, tiny_dataset):
    cv = run_cv(tiny_dataset, tiny_config(epochs=1), seeds=[0], folds=3)
    path = tmp_path / "runs.csv"
    write_run_table(path, cv.runs)
    rows = read_run_table(path)
    assert len(rows) == 3
    assert [r["fold"] for r in rows] == [0, 1, 2]
    np.testing.assert_allclose([r["test_uar"] for r in rows],
                               [r.test_uar for r in cv.runs])
    write_summary(tmp_path / "summary.txt", cv)
    assert (tmp_path / "summary.txt").read_text().startswith("variant: swan")


def test_paired_uars_alignment(tmp_path, tiny_dataset):
    cv_a = run_cv(tiny_dataset, tiny_config(epochs=1), seeds=[0], folds=3)
    cv_b = run_cv(tiny_dataset, tiny_config(epochs=2), seeds=[0], folds=3)
    write_run_table(tmp_path / "a.csv", cv_a.runs)
    write_run_table(tmp_path / "b.csv", cv_b.runs)
    a, b = paired_uars(read_run_table(tmp_path / "a.csv"), read_run_table(tmp_path / "b.csv"))
    assert len(a) == len(b) == 3
    np.testing.assert_allclose(a, cv_a.uars)
    np.testing.assert_allclose(b, cv_b.uars)


def test_sweep_files_row_counts(tmp_path, tiny_dataset):
    report = sweep_windows(tiny_dataset, tiny_config(epochs=1), ranges=[4, 8],
                           seeds=[0], folds=3)
    write_sweep_table(tmp_path / "sweep.csv", report)
    write_plot_data(tmp_path / "plot.csv", report)
    sweep_lines = (tmp_path / "sweep.csv").read_text().strip().splitlines()
    plot_lines = (tmp_path / "plot.csv").read_text().strip().splitlines()
    assert len(sweep_lines) == 1 + 4  # header + ranges x variants
    assert len(plot_lines) == 1 + 4
    assert "," in plot_lines[1] and "." in plot_lines[1]
