import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yolors import metrics
from yolors.metrics import Detection, GroundTruth, MatchResult

from oracles import box_iou, greedy_flags, rank_enum_ap


def box(x, y, s=10.0):
    return (x, y, x + s, y + s)


# -- iou ----------------------------------------------------------------------

def test_iou_examples():
    assert metrics.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert metrics.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert metrics.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        metrics.iou((0, 0, 0, 1), (0, 0, 1, 1))


def test_iou_matches_area_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = tuple(sorted(rng.integers(0, 12, 2)))
        b = tuple(sorted(rng.integers(0, 12, 2)))
        if a[0] == a[1] or b[0] == b[1]:
            continue
        A, B = (a[0], b[0], a[1], b[1]), (b[0], a[0], b[1], a[1])
        grid = np.zeros((12, 12, 2), bool)
        grid[A[1]:A[3], A[0]:A[2], 0] = True
        grid[B[1]:B[3], B[0]:B[2], 1] = True
        ref = (grid[..., 0] & grid[..., 1]).sum() / (grid[..., 0] | grid[..., 1]).sum()
        assert metrics.iou(A, B) == pytest.approx(ref, abs=1e-12)


# -- matching ---------------------------------------------------------------

def test_perfect_match():
    truths = [GroundTruth(0, box(0, 0)), GroundTruth(1, box(20, 20))]
    dets = [Detection(0, 0.9, box(0, 0)), Detection(1, 0.8, box(20, 20))]
    m = metrics.match_detections(dets, truths)
    assert (m.tp, m.fp, m.fn) == (2, 0, 0)


def test_zero_detections():
    m = metrics.match_detections([], [GroundTruth(0, box(0, 0))] * 3)
    assert (m.tp, m.fp, m.fn) == (0, 0, 3)


def test_two_detections_one_truth():
    m = metrics.match_detections([Detection(0, 0.9, box(0, 0)), Detection(0, 0.8, box(1, 0))], [GroundTruth(0, box(0, 0))])
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)
    assert m.det_tp == [True, False]


def test_class_mismatch_is_fp():
    m = metrics.match_detections([Detection(1, 0.9, box(0, 0))], [GroundTruth(0, box(0, 0))])
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)


def test_other_image_never_matches():
    m = metrics.match_detections([Detection(0, 0.9, box(0, 0), "a")], [GroundTruth(0, box(0, 0), "b")])
    assert m.tp == 0


def random_scene(rng, n_img=3, n_truth=6, n_det=10, classes=2):
    truths, dets = [], []
    for _ in range(n_truth):
        truths.append(GroundTruth(int(rng.integers(classes)), box(*rng.uniform(0, 40, 2), rng.uniform(5, 15)), int(rng.integers(n_img))))
    for _ in range(n_det):
        if truths and rng.random() < 0.7:
            t = truths[int(rng.integers(len(truths)))]
            x1, y1, x2, y2 = t.box
            j = rng.normal(0, 2, 4)
            b = (x1 + j[0], y1 + j[1], x2 + j[2], y2 + j[3])
            if b[2] <= b[0] or b[3] <= b[1]:
                b = t.box
            dets.append(Detection(int(rng.integers(classes)), float(rng.uniform(0.01, 1)), b, t.image_id))
        else:
            dets.append(Detection(int(rng.integers(classes)), float(rng.uniform(0.01, 1)), box(*rng.uniform(0, 40, 2)), int(rng.integers(n_img))))
    return dets, truths


def test_match_invariants_random():
    rng = np.random.default_rng(1)
    for _ in range(200):
        dets, truths = random_scene(rng, n_truth=int(rng.integers(0, 8)), n_det=int(rng.integers(0, 12)))
        m = metrics.match_detections(dets, truths)
        assert m.tp + m.fp == len(dets) and m.tp + m.fn == len(truths)
        used = [j for j in m.det_match if j >= 0]
        assert len(used) == len(set(used))


# -- P/R/F1 -------------------------------------------------------------------

def counts(tp, fp, fn):
    return MatchResult([True] * tp + [False] * fp, [0] * tp + [-1] * fp, [True] * tp + [False] * fn)


def test_precision_recall_examples():
    p, r, _ = metrics.precision_recall(counts(8, 2, 2))
    assert (p, r) == pytest.approx((0.8, 0.8))
    p, r, flags = metrics.precision_recall(counts(0, 5, 0))
    assert p == 0.0 and flags
    p, r, _ = metrics.precision_recall(counts(90, 10, 0))
    assert (p, r) == pytest.approx((0.9, 1.0))


def test_f1_examples():
    assert metrics.f1(0.8, 0.8) == pytest.approx(0.8)
    assert metrics.f1(0.921, 0.890) == pytest.approx(0.9052, abs=1e-4)
    # the reported 0.90 is the value truncated to two places
    assert int(metrics.f1(0.921, 0.890) * 100) / 100 == 0.90
    assert metrics.f1(1.0, 0.0) == 0.0
    assert metrics.f1(0.0, 0.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_f1_properties(p, r):
    v = metrics.f1(p, r)
    assert v == pytest.approx(metrics.f1(r, p), abs=1e-15)
    assert v <= min(max(p, r), (p + r) / 2) + 1e-12
    if p == r:
        assert v == pytest.approx(p, abs=1e-15)


# -- AP ----------------------------------------------------------------------

def test_ap_examples():
    truths = [GroundTruth(0, box(0, 0)), GroundTruth(0, box(30, 30))]
    assert metrics.average_precision([Detection(0, 0.9, box(0, 0)), Detection(0, 0.8, box(30, 30))], truths) == 1.0
    assert metrics.average_precision([], truths) == 0.0
    dets = [Detection(0, 0.9, box(0, 0)), Detection(0, 0.8, box(60, 60)), Detection(0, 0.7, box(30, 30))]
    ap = metrics.average_precision(dets, truths)
    assert ap == pytest.approx(rank_enum_ap([True, False, True], 2), abs=1e-12)
    assert ap == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-12)


def test_ap_oracle_random():
    rng = np.random.default_rng(2)
    n = 0
    while n < 150:
        dets, truths = random_scene(rng, n_truth=int(rng.integers(1, 9)), n_det=int(rng.integers(1, 15)), classes=1)
        thr = float(rng.choice([0.5, 0.75]))
        flags = greedy_flags([(d.score, d.box, d.image_id) for d in dets], [(t.box, t.image_id) for t in truths], thr)
        ref = rank_enum_ap(flags, len(truths))
        assert metrics.average_precision(dets, truths, thr) == pytest.approx(ref, abs=1e-9)
        n += 1


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(3)
    for _ in range(50):
        dets, truths = random_scene(rng, classes=1)
        aps = [metrics.average_precision(dets, truths, t) for t in metrics.COCO_THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


# -- mAP ---------------------------------------------------------------------

def test_map_examples():
    truths = [GroundTruth(0, box(0, 0)), GroundTruth(1, box(30, 30))]
    perfect = [Detection(0, 0.9, box(0, 0)), Detection(1, 0.9, box(30, 30))]
    m50, m5095, _ = metrics.map_at(perfect, truths)
    assert m50 == 1.0 and m5095 == 1.0
    half = [Detection(0, 0.9, box(0, 0))]
    m50, _, table = metrics.map_at(half, truths)
    assert m50 == 0.5 and table[1][0.5] == 0.0
    single = [GroundTruth(0, box(0, 0))]
    dets = [Detection(0, 0.9, box(2, 2)), Detection(0, 0.5, box(0, 0))]
    assert metrics.map_at(dets, single)[0] == metrics.average_precision(dets, single, 0.5)
    with pytest.raises(ValueError):
        metrics.map_at(perfect, truths, [0.3])


# -- confusion -----------------------------------------------------------

def test_confusion_examples():
    truths = [GroundTruth(0, box(0, 0)), GroundTruth(1, box(30, 30)), GroundTruth(1, box(60, 0))]
    perfect = [Detection(t.class_id, 0.9, t.box) for t in truths]
    cm = metrics.confusion_matrix(perfect, truths, 2)
    assert cm.tolist() == [[1, 0, 0], [0, 2, 0], [0, 0, 0]]
    cm = metrics.confusion_matrix([], truths, 2)
    assert cm.tolist() == [[0, 0, 1], [0, 0, 2], [0, 0, 0]]
    wrong = [Detection(1, 0.9, box(0, 0)), Detection(0, 0.9, box(90, 90)), Detection(0, 0.1, box(30, 30))]
    cm = metrics.confusion_matrix(wrong, truths, 2)
    assert cm.tolist() == [[0, 1, 0], [0, 0, 2], [1, 0, 0]]


def test_confusion_row_sums():
    rng = np.random.default_rng(4)
    for _ in range(50):
        dets, truths = random_scene(rng, classes=3)
        cm = metrics.confusion_matrix(dets, truths, 3)
        for c in range(3):
            assert cm[c].sum() == sum(t.class_id == c for t in truths)


def test_evaluate_report_json():
    truths = [GroundTruth(0, box(0, 0)), GroundTruth(1, box(30, 30))]
    rep = metrics.evaluate([Detection(0, 0.9, box(0, 0))], truths, 2)
    d = rep.to_dict()
    assert d["precision"]["0"] == 1.0 and d["recall"]["1"] == 0.0
    assert d["map50"] == 0.5
    assert any("class 1" in f for f in rep.flags)
    assert '"map50": 0.5' in rep.to_json()


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 1.5, box(0, 0))
    with pytest.raises(ValueError):
        Detection(0, 0.5, (1, 1, 1, 2))
