import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from oracles import loop_f1, pairwise_auroc, random_score_sets, sweep_fpr_at_tpr

from epsfault.evaluation import (EvalReport, anomaly_scores, auroc, confusion, f1_at_threshold,
                                 f1_from_counts, fpr_at_tpr, report_from_scores, roc_points,
                                 write_roc_csv)
from epsfault.exceptions import DataError
from epsfault.flow import FlowModel
from epsfault.nn import AutoencoderModel


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_fpr_examples():
    assert fpr_at_tpr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])[0] == 0.0
    same = np.linspace(0, 1, 20)
    fpr, _ = fpr_at_tpr(np.r_[same, same], np.r_[np.zeros(20), np.ones(20)])
    assert fpr >= 0.95


def test_fpr_interleaved_20_20():
    labels = np.array([1, 0] * 20)
    scores = np.arange(40.0)[::-1]
    scores[[5, 11]] = scores[[11, 5]]
    fpr, thr = fpr_at_tpr(scores, labels)
    assert (fpr, thr) == sweep_fpr_at_tpr(scores, labels)
    # 19 of 20 faults are needed, reached at the 19th fault from the top
    assert thr == 3.0 and fpr == 18 / 20


def test_f1_examples():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.1])
    labels = np.array([1, 1, 1, 0, 1])
    assert confusion(scores, labels, 0.5) == {"tp": 3, "fp": 1, "tn": 0, "fn": 1}
    assert f1_from_counts(3, 1, 1) == 0.75
    assert f1_at_threshold(scores, labels, 0.5) == 0.75
    assert f1_at_threshold([0.1, 0.2], [0, 1], 5.0) == 0.0
    assert f1_at_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1], 0.8) == 1.0
    with pytest.raises(ValueError):
        f1_at_threshold([0.1, 0.2], [0, 1], np.inf)


def test_single_class_and_length_errors():
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [0, 0])
    with pytest.raises(DataError):
        fpr_at_tpr([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 1, 1])


def test_metrics_match_brute_force_oracles():
    for scores, labels in random_score_sets(60, 300, seed=1):
        assert abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) < 1e-12
        fpr, thr = fpr_at_tpr(scores, labels)
        ref_fpr, ref_thr = sweep_fpr_at_tpr(scores, labels)
        assert thr == ref_thr and abs(fpr - ref_fpr) < 1e-12
        assert abs(report_from_scores(scores, labels).f1 - loop_f1(scores, labels, thr)) < 1e-12


def test_auroc_equals_trapezoidal_roc_area():
    for scores, labels in random_score_sets(20, 200, seed=2):
        pts = roc_points(scores, labels)
        assert abs(np.trapezoid(pts[:, 2], pts[:, 1]) - auroc(scores, labels)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5).map(lambda v: round(v, 3)), min_size=4, max_size=40), st.integers(0, 2 ** 16))
def test_metric_invariances(values, seed):
    s = np.array(values)
    labels = np.random.default_rng(seed).integers(0, 2, size=len(s))
    labels[:2] = [0, 1]
    a = auroc(s, labels)
    assert 0.0 <= a <= 1.0
    # strictly monotone transforms keep the ranking
    assert auroc(np.exp(s / 5.0), labels) == pytest.approx(a, abs=1e-12)
    assert a + auroc(-s, labels) == pytest.approx(1.0, abs=1e-12)
    # duplicating every window leaves every metric unchanged
    rep, dup = report_from_scores(s, labels), report_from_scores(np.r_[s, s], np.r_[labels, labels])
    assert dup.auroc == pytest.approx(rep.auroc, abs=1e-12)
    assert dup.fpr95 == pytest.approx(rep.fpr95, abs=1e-12) and dup.f1 == pytest.approx(rep.f1, abs=1e-12)
    assert 0 <= rep.fpr95 <= 1 and 0 <= rep.f1 <= 1


def test_report_round_trip_and_roc_csv(tmp_path):
    rep = report_from_scores([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert EvalReport.from_json(rep.to_json()) == rep
    assert json.loads(rep.to_json())["auroc"] == 0.75
    assert "AUROC" in rep.table()
    write_roc_csv([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1], tmp_path / "roc.csv")
    rows = (tmp_path / "roc.csv").read_text().splitlines()
    assert rows[0] == "threshold,fpr,tpr" and len(rows) == 5


def test_anomaly_score_examples():
    x = np.random.default_rng(0).normal(size=(6, 4))
    flow = FlowModel(4, 2, 1, 4)
    expected = 2 * np.log(2 * np.pi) + 0.5 * (x ** 2).sum(1)
    np.testing.assert_allclose(anomaly_scores(flow, x), expected, rtol=0, atol=1e-12)
    assert np.all(anomaly_scores(AutoencoderModel(4, [3], []), np.zeros((3, 4))) == 0.0)
    dup = anomaly_scores(flow, np.vstack([x[:1], x[:1]]))
    assert dup[0] == dup[1]
    with pytest.raises(ValueError):
        anomaly_scores(flow, x[0])
