import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lesionlab.errors import DimensionMismatch, EmptyInput, LabelOutOfRange, LengthMismatch, NoSamples
from lesionlab.metrics import (
    MetricsReport,
    build_report,
    confusion_matrix,
    jaccard,
    load_report,
    mean_jaccard,
    normalized_multiclass_accuracy,
    plot_confusion,
    render_report,
)


def set_jaccard(a, b):
    pa = {tuple(p) for p in np.argwhere(a)}
    pb = {tuple(p) for p in np.argwhere(b)}
    if not pa | pb:
        return 1.0
    return len(pa & pb) / len(pa | pb)


def test_jaccard_examples():
    a = np.zeros((20, 20), bool)
    a[:10, :10] = True
    assert jaccard(a, a) == 1.0
    b = np.zeros((20, 20), bool)
    b[10:, 10:] = True
    assert jaccard(a, b) == 0.0
    # 10x10 at cols 0-9 vs cols 5-14: intersection 50, union 150
    c = np.zeros((20, 20), bool)
    c[:10, 5:15] = True
    assert jaccard(a, c) == pytest.approx(1 / 3)
    assert set_jaccard(a, c) == pytest.approx(1 / 3)


def test_jaccard_empty_conventions():
    empty = np.zeros((4, 4), bool)
    full = np.ones((4, 4), bool)
    assert jaccard(empty, empty) == 1.0
    assert jaccard(empty, full) == 0.0
    assert jaccard(full, empty) == 0.0
    with pytest.raises(DimensionMismatch):
        jaccard(empty, np.zeros((4, 5), bool))


masks16 = arrays(bool, (16, 16))


@settings(max_examples=200, deadline=None)
@given(masks16, masks16)
def test_jaccard_symmetric_and_matches_set_oracle(a, b):
    assert jaccard(a, b) == jaccard(b, a)
    assert jaccard(a, b) == set_jaccard(a, b)


@settings(max_examples=100, deadline=None)
@given(masks16)
def test_jaccard_self_is_one(a):
    assert jaccard(a, a) == 1.0


def test_jaccard_monotone_in_intersection():
    truth = np.zeros((10, 10), bool)
    truth[:, :5] = True
    pred = np.zeros((10, 10), bool)
    pred[:, 5:7] = True  # false positives keep the union at truth | pred
    union = (truth | pred).sum()
    previous = jaccard(pred, truth)
    for col in range(5):
        pred[:, col] = True
        assert (truth | pred).sum() == union
        score = jaccard(pred, truth)
        assert score > previous
        previous = score


def _pair_with_score(pred_px, truth_px):
    pred = np.zeros(pred_px, bool)
    truth = np.zeros(pred_px, bool)
    pred[:] = True
    truth[:truth_px] = True
    return pred, truth


def test_mean_jaccard():
    a = np.ones((3, 3), bool)
    assert mean_jaccard([(a, a)])[0] == jaccard(a, a)
    empty = np.zeros((3, 3), bool)
    assert mean_jaccard([(a, a), (a, empty)])[0] == 0.5
    p1 = _pair_with_score(10, 6)  # 0.6
    p2 = _pair_with_score(10, 7)  # 0.7
    mean, thresholded, scores = mean_jaccard([p1, p2])
    assert scores == pytest.approx([0.6, 0.7])
    assert mean == pytest.approx(0.65)
    assert thresholded == pytest.approx(0.35)
    with pytest.raises(EmptyInput):
        mean_jaccard([])


def test_confusion_matrix():
    cm = confusion_matrix([0, 0, 1], [0, 1, 1])
    assert cm[0, 0] == 1 and cm[0, 1] == 1 and cm[1, 1] == 1
    assert cm.sum() == 3
    diag = confusion_matrix([0, 1, 2, 3, 4, 5, 6], [0, 1, 2, 3, 4, 5, 6])
    assert np.array_equal(diag, np.eye(7, dtype=int))
    assert not confusion_matrix([], []).any()
    with pytest.raises(LengthMismatch):
        confusion_matrix([0, 1], [0])
    with pytest.raises(LabelOutOfRange):
        confusion_matrix([7], [0])


def test_normalized_accuracy():
    assert normalized_multiclass_accuracy(np.eye(7, dtype=int) * 3) == 1.0
    assert normalized_multiclass_accuracy(np.array([[8, 2], [5, 5]])) == pytest.approx(0.65)
    true = np.repeat(np.arange(7), 10)
    cm = confusion_matrix(true, np.full_like(true, 3))
    assert normalized_multiclass_accuracy(cm) == pytest.approx(1 / 7)
    # classes with no true samples are excluded
    cm = confusion_matrix([0, 0, 1], [0, 1, 1])
    assert normalized_multiclass_accuracy(cm) == pytest.approx((0.5 + 1.0) / 2)
    with pytest.raises(NoSamples):
        normalized_multiclass_accuracy(np.zeros((7, 7), int))


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=60),
    st.integers(0, 6),
    st.integers(2, 5),
)
def test_normalized_accuracy_invariant_to_class_duplication(pairs, k_class, times):
    true, pred = map(list, zip(*pairs))
    base = normalized_multiclass_accuracy(confusion_matrix(true, pred))
    extra = [(t, p) for t, p in pairs if t == k_class] * (times - 1)
    if extra:
        t2, p2 = map(list, zip(*(pairs + extra)))
        assert normalized_multiclass_accuracy(confusion_matrix(t2, p2)) == pytest.approx(base, abs=1e-12)


def test_report_round_trip_and_rendering(tmp_path):
    m = np.zeros((8, 8), bool)
    m[2:5, 2:5] = True
    report = build_report(
        seg_pairs=[(m, m), (m, ~m)],
        seg_sample_ids=["a", "b"],
        true_labels=[0, 1, 1, 6],
        pred_labels=[0, 1, 2, 6],
        cls_sample_ids=["a", "b", "c", "d"],
        model_id="m",
        corpus_id="c",
    )
    files = render_report(report, tmp_path)
    assert {f.name for f in files} == {"report.json", "confusion.png", "jaccard_hist.png"}
    assert all(f.stat().st_size > 0 for f in files)
    again = load_report(tmp_path / "report.json")
    assert again == report
    assert json.loads((tmp_path / "report.json").read_text())["schema_version"] == 1
    present = [r for r in report.per_class_recall if r is not None]
    assert report.normalized_accuracy == pytest.approx(np.mean(present))


def test_heatmap_annotations_match_counts():
    import matplotlib

    matplotlib.use("Agg")
    cm = confusion_matrix([0, 0, 1, 2, 2, 2], [0, 1, 1, 2, 2, 0])
    ax = plot_confusion(cm)
    texts = {(int(round(t.get_position()[1])), int(round(t.get_position()[0]))): t.get_text() for t in ax.texts}
    assert len(texts) == 49
    for (i, j), v in np.ndenumerate(cm):
        assert texts[(i, j)] == str(v)


def test_report_with_no_validation_samples_is_rejected():
    with pytest.raises(NoSamples):
        build_report(true_labels=[], pred_labels=[])
