import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import accuracy_ref, boundary_ref, dsc_ref, hd95_ref, iou_ref, random_instance
from mambacafu.metrics import (accuracy, aggregate_reports, boundary, confusion_matrix, dsc, f1_score, hausdorff,
                               hd95, iou, segmentation_report, write_csv)

masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


def _same(a, b, tol):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol


def test_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, gt = random_instance(rng)
        assert abs(accuracy(pred, gt, 3) - accuracy_ref(pred.tolist(), gt.tolist())) <= 1e-9
        for c in (1, 2):
            a, b = (pred == c).tolist(), (gt == c).tolist()
            assert abs(dsc(pred == c, gt == c) - dsc_ref(a, b)) <= 1e-9
            assert abs(iou(pred == c, gt == c) - iou_ref(a, b)) <= 1e-9
            assert _same(hd95(pred == c, gt == c), hd95_ref(a, b), 1e-9)


def test_hd95_single_points():
    a, b = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
    a[0, 0], b[3, 4] = True, True
    assert hd95(a, b) == 5.0 and hausdorff(a, b) == 5.0


def test_hd95_spacing():
    a, b = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
    a[0, 0], b[3, 4] = True, True
    assert hd95(a, b, spacing=(2.0, 0.5)) == pytest.approx(math.hypot(6, 2))


@settings(max_examples=80, deadline=None)
@given(a=masks, data=st.data())
def test_identities(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    d, j = dsc(a, b), iou(a, b)
    assert abs(d - 2 * j / (1 + j)) <= 1e-12
    assert abs(d - f1_score(a, b)) <= 1e-12
    assert dsc(a, a) == 1.0 and iou(a, a) == 1.0


@settings(max_examples=80, deadline=None)
@given(a=masks, data=st.data())
def test_hd95_bounded_by_hausdorff(a, data):
    b = data.draw(arrays(np.bool_, a.shape))
    h95, h = hd95(a, b), hausdorff(a, b)
    if math.isnan(h):
        assert math.isnan(h95)
    else:
        assert 0.0 <= h95 <= h + 1e-12
        assert hd95(a, b) == hd95(b, a)


@settings(max_examples=50, deadline=None)
@given(a=masks)
def test_boundary_matches_reference(a):
    got = {tuple(p) for p in np.argwhere(boundary(a))}
    assert got == boundary_ref(a.tolist())


def test_empty_conventions():
    e, f = np.zeros((4, 4), bool), np.ones((4, 4), bool)
    assert dsc(e, e) == 1.0 and iou(e, e) == 1.0 and hd95(e, e) == 0.0
    assert math.isnan(hd95(e, f)) and dsc(e, f) == 0.0


def test_confusion_matrix_and_accuracy():
    pred, gt = np.array([[0, 1], [2, 2]]), np.array([[0, 1], [1, 2]])
    cm = confusion_matrix(pred, gt, 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    assert accuracy(pred, gt, 3) == 0.75


def test_report_skips_undefined_hd95():
    gt = np.zeros((8, 8), int)
    gt[2:5, 2:5] = 1
    rep = segmentation_report(np.zeros_like(gt), gt, 3)
    assert rep.per_class[1]["dsc"] == 0.0 and math.isnan(rep.per_class[1]["hd95"])
    assert rep.skipped_classes == [1]
    assert rep.per_class[2]["dsc"] == 1.0 and rep.per_class[2]["hd95"] == 0.0
    assert rep.mean_dsc == 0.5 and rep.mean_hd95 == 0.0


def test_report_binary_and_shape_check():
    gt = np.zeros((6, 6), int)
    gt[1:3, 1:3] = 1
    rep = segmentation_report(gt, gt, 1)
    assert list(rep.per_class) == [1] and rep.mean_dsc == 1.0 and rep.accuracy == 1.0
    with pytest.raises(ValueError):
        segmentation_report(gt, gt[:3], 2)


def test_report_serialisation():
    rng = np.random.default_rng(1)
    pred, gt = random_instance(rng)
    rep = segmentation_report(pred, gt, 3, metadata={"run": "x"})
    d = json.loads(rep.to_json())
    assert d["mean_dsc"] == pytest.approx(rep.mean_dsc) and d["metadata"] == {"run": "x"}
    assert set(d["per_class"]) == {"1", "2"}
    row = rep.csv_row("case_1")
    buf = io.StringIO()
    write_csv([row], buf)
    header, line = buf.getvalue().splitlines()
    assert header.split(",")[:2] == ["case_id", "mean_dsc"] and "dsc_1" in header and "hd95_2" in header
    assert line.startswith("case_1,")


def test_aggregate_means_per_class():
    rng = np.random.default_rng(2)
    reps = [segmentation_report(*random_instance(rng), 3) for _ in range(4)]
    agg = aggregate_reports(reps)
    for c in (1, 2):
        assert agg.per_class[c]["dsc"] == pytest.approx(np.mean([r.per_class[c]["dsc"] for r in reps]))
    with pytest.raises(ValueError):
        aggregate_reports([])
