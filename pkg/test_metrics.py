"""Tests for MAE, Bland-Altman, classification, ROC and the evaluation report."""

import numpy as np
import pandas as pd
import pytest

from camox.errors import ConfigError, DataFormatError, SingleClassError
from camox.metrics import (
    ReportConfig,
    bland_altman,
    classify,
    empirical_auc,
    mae,
    read_report,
    report,
    roc_sweep,
    subject_mean_mae,
    write_report,
)
from camox.models import AblationRow, Hand, PredictionRow, PredictionSet
from camox.pipeline import read_predictions, write_predictions


def make_set(ground_truth, prediction, subjects=None, hands=None) -> PredictionSet:
    n = len(ground_truth)
    subjects = subjects or ["1"] * n
    hands = hands or [Hand.LEFT] * n
    return PredictionSet(
        rows=[
            PredictionRow(split_id=0, subject_id=s, hand=h, t_sec=float(i), ground_truth=g, prediction=p)
            for i, (g, p, s, h) in enumerate(zip(ground_truth, prediction, subjects, hands))
        ]
    )


def random_set(n=1000, seed=0, n_subjects=4) -> PredictionSet:
    rng = np.random.default_rng(seed)
    gt = rng.uniform(70.0, 100.0, size=n)
    pred = gt + rng.normal(0.0, 4.0, size=n)
    subjects = [str(1 + i % n_subjects) for i in range(n)]
    hands = [Hand.LEFT if (i // n_subjects) % 2 else Hand.RIGHT for i in range(n)]
    return make_set(gt.tolist(), pred.tolist(), subjects, hands)


# --- regression --------------------------------------------------------------

def test_mae_examples():
    assert mae(make_set([92.0, 78.0], [92.0, 78.0])) == 0.0
    assert mae(make_set([92.0, 78.0], [90.0, 80.0])) == 2.0


def test_empty_set_is_rejected():
    with pytest.raises(DataFormatError):
        mae(PredictionSet())
    with pytest.raises(DataFormatError):
        bland_altman(PredictionSet())


def test_subject_mean_mae_averages_subjects():
    pred_set = make_set([90.0, 90.0, 90.0], [91.0, 93.0, 80.0], subjects=["1", "1", "2"])
    assert subject_mean_mae(pred_set) == pytest.approx((2.0 + 10.0) / 2)
    assert mae(pred_set) == pytest.approx(14.0 / 3)


def test_bland_altman_alternating_diffs():
    result = bland_altman(make_set([90.0] * 4, [91.0, 89.0, 91.0, 89.0]))

    assert result.mean_diff == 0.0
    assert result.loa_halfwidth == pytest.approx(1.96)
    assert result.lower == pytest.approx(-1.96)
    assert np.allclose(result.means, [90.5, 89.5, 90.5, 89.5])


def test_bland_altman_identical_series():
    result = bland_altman(make_set([88.0, 95.0], [88.0, 95.0]))
    assert (result.mean_diff, result.loa_halfwidth) == (0.0, 0.0)


def test_regression_metrics_match_brute_force():
    pred_set = random_set(seed=3)
    gt, pred = pred_set.ground_truth, pred_set.prediction

    diffs = [p - g for p, g in zip(pred, gt)]
    mu = sum(diffs) / len(diffs)
    sigma = (sum((d - mu) ** 2 for d in diffs) / len(diffs)) ** 0.5

    assert mae(pred_set) == pytest.approx(sum(abs(d) for d in diffs) / len(diffs), abs=1e-9)
    result = bland_altman(pred_set)
    assert result.mean_diff == pytest.approx(mu, abs=1e-9)
    assert result.loa_halfwidth == pytest.approx(1.96 * sigma, abs=1e-9)


# --- classification ----------------------------------------------------------

def test_classify_counts_strictly_below():
    pred_set = make_set([85.0, 89.0, 90.0, 95.0, 92.0], [86.0, 91.0, 87.0, 96.0, 88.0])
    counts = classify(pred_set, 90.0, 88.0)

    # Truth positives: 85 and 89. Predicted positives: 86 and 87
    assert (counts.tp, counts.fn, counts.fp, counts.tn) == (1, 1, 1, 2)
    assert counts.total == 5
    assert counts.sensitivity == 0.5
    assert counts.specificity == pytest.approx(2 / 3)


def test_perfect_predictor_is_perfect_classifier():
    pred_set = random_set(seed=1)
    exact = make_set(pred_set.ground_truth.tolist(), pred_set.ground_truth.tolist())
    counts = classify(exact, 90.0, 90.0)
    assert counts.sensitivity == 1.0 and counts.specificity == 1.0


def test_degenerate_boundaries():
    source = random_set(seed=2)
    pred_set = make_set(source.ground_truth.tolist(), np.clip(source.prediction, 0.0, 99.9).tolist())
    low = classify(pred_set, 90.0, 0.0)
    high = classify(pred_set, 90.0, 100.0)
    assert low.tp == low.fp == 0
    assert high.tn == high.fn == 0


def test_classify_matches_brute_force():
    pred_set = random_set(seed=4)
    counts = classify(pred_set, 92.0, 89.5)
    tp = sum(1 for r in pred_set.rows if r.ground_truth < 92.0 and r.prediction < 89.5)
    tn = sum(1 for r in pred_set.rows if r.ground_truth >= 92.0 and r.prediction >= 89.5)
    assert (counts.tp, counts.tn) == (tp, tn)


def test_classify_rejects_out_of_range_threshold():
    with pytest.raises(ConfigError):
        classify(make_set([90.0], [90.0]), 101.0, 90.0)


def test_single_class_rates_are_undefined():
    counts = classify(make_set([97.0, 98.0], [95.0, 99.0]), 90.0, 90.0)
    assert counts.sensitivity is None
    assert counts.specificity == 1.0


# --- ROC ---------------------------------------------------------------------

def test_separating_predictions_have_unit_auc():
    pred_set = make_set([80.0, 85.0, 95.0, 97.0], [75.0, 82.0, 93.0, 99.0])
    curve = roc_sweep(pred_set, 90.0)

    assert curve.auc == 1.0
    assert curve.grid_auc == pytest.approx(1.0)
    assert curve.best_boundary == 82.5
    assert len(curve.points) == 61


def test_random_predictions_have_chance_auc():
    rng = np.random.default_rng(42)
    gt = rng.uniform(70.0, 100.0, size=1000)
    pred = rng.permutation(gt)
    auc = roc_sweep(make_set(gt.tolist(), pred.tolist()), 90.0).auc
    assert 0.4 <= auc <= 0.6


def test_roc_is_monotone_in_boundary():
    curve = roc_sweep(random_set(seed=5), 90.0)
    boundaries = [p.boundary for p in curve.points]
    assert boundaries == sorted(boundaries)
    assert all(a.tpr <= b.tpr and a.fpr <= b.fpr for a, b in zip(curve.points, curve.points[1:]))


def test_auc_is_invariant_under_increasing_transform():
    pred_set = random_set(seed=6)
    transformed = make_set(pred_set.ground_truth.tolist(), np.exp(pred_set.prediction / 10.0).tolist())
    assert empirical_auc(transformed, 90.0) == pytest.approx(empirical_auc(pred_set, 90.0), abs=1e-12)


def test_auc_matches_pair_count():
    pred_set = random_set(n=300, seed=7)
    pos = [r.prediction for r in pred_set.rows if r.ground_truth < 90.0]
    neg = [r.prediction for r in pred_set.rows if r.ground_truth >= 90.0]
    wins = sum(1.0 if p < q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    assert empirical_auc(pred_set, 90.0) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-9)


def test_single_class_roc_is_an_error():
    with pytest.raises(SingleClassError):
        roc_sweep(make_set([95.0, 96.0], [90.0, 97.0]), 90.0)


# --- report ------------------------------------------------------------------

def test_report_covers_default_thresholds():
    result = report(random_set(seed=8))

    assert [t.threshold for t in result.classification] == [95.0, 90.0, 85.0]
    assert result.ablation == []
    assert result.n_subjects == 4
    assert len(result.hands) == 8
    assert result.mae == pytest.approx(np.mean([s.mae for s in result.subjects]))
    entry = result.threshold(90.0)
    assert entry.at_boundary.decision_boundary == 90.0
    assert entry.roc is not None and entry.at_best_boundary is not None
    assert len(entry.per_subject) == 4


def test_report_with_fixed_boundary():
    result = report(random_set(seed=9), ReportConfig(thresholds=[90.0], decision_boundary=88.0))
    assert result.threshold(90.0).at_boundary.decision_boundary == 88.0


def test_report_omits_roc_for_single_class_threshold():
    pred_set = make_set([95.0, 97.0, 99.0], [94.0, 96.0, 98.0])
    result = report(pred_set, ReportConfig(thresholds=[90.0, 98.0]))

    assert result.threshold(90.0).roc is None
    assert result.threshold(98.0).roc is not None
    assert result.mae == pytest.approx(1.0)


def test_aggregate_bland_altman_recomputes_exactly():
    pred_set = random_set(seed=10)
    result = report(pred_set)
    pooled = bland_altman(pred_set)
    assert result.pooled_bland_altman.mean_diff == pooled.mean_diff
    assert result.pooled_bland_altman.loa_halfwidth == pooled.loa_halfwidth


def test_clamped_report_limits_predictions():
    pred_set = make_set([99.0, 98.0, 85.0], [103.0, 98.0, 85.0])
    assert report(pred_set).mae == pytest.approx(4.0 / 3)
    assert report(pred_set, ReportConfig(clamp=True)).mae == pytest.approx(1.0 / 3)


def test_report_config_validates_thresholds():
    with pytest.raises(ValueError):
        ReportConfig(thresholds=[])
    with pytest.raises(ValueError):
        ReportConfig(thresholds=[120.0])


def test_written_report_reads_back_identically(tmp_path):
    pred_set = random_set(seed=11)
    ablation = [AblationRow(floor=70.0, mae=5.0, pooled_mae=5.1, n_samples=100),
                AblationRow(floor=85.0, mae=3.1, pooled_mae=3.0, n_samples=60)]
    result = report(pred_set, ablation=ablation)

    written = write_report(result, pred_set, tmp_path)

    names = {p.name for p in written}
    assert {"report.json", "bland_altman.csv", "roc_95.csv", "roc_90.csv", "roc_85.csv", "ablation.csv"} <= names
    assert {f"regression_{s}.csv" for s in ("1", "2", "3", "4")} <= names
    assert read_report(tmp_path / "report.json").model_dump() == result.model_dump()

    roc = pd.read_csv(tmp_path / "roc_90.csv")
    assert list(roc.columns) == ["scope", "boundary", "fpr", "tpr"]
    assert (roc["scope"] == "pooled").sum() == 61
    assert len(pd.read_csv(tmp_path / "ablation.csv")) == 2
    assert len(pd.read_csv(tmp_path / "bland_altman.csv")) == len(pred_set)


def test_report_from_csv_is_idempotent(tmp_path):
    path = tmp_path / "predictions.csv"
    write_predictions(random_set(seed=12), path)

    first = report(read_predictions(path))
    write_report(first, read_predictions(path), tmp_path / "out")
    second = report(read_predictions(path))

    assert read_report(tmp_path / "out" / "report.json").model_dump() == second.model_dump()


def test_unknown_report_schema_is_rejected(tmp_path):
    path = tmp_path / "report.json"
    path.write_text('{"schema_version": 99}')
    with pytest.raises(DataFormatError):
        read_report(path)
