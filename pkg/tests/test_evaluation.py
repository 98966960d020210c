"""IoU, matching, average precision vs a brute-force oracle, evaluate()."""

import numpy as np
import pytest

from fogda.evaluation import (
    MetricsReport,
    average_precision,
    evaluate,
    iou,
    match_detections,
)
from fogda.models import Detection, ModelParams
from fogda.scenes import BoxLabel


# ---------------------------------------------------------------------------
# iou
# ---------------------------------------------------------------------------

def test_iou_identity():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0


def test_iou_disjoint():
    assert iou((0, 0, 2, 2), (3, 3, 5, 5)) == 0.0


def test_iou_hand_case():
    assert np.isclose(iou((0, 0, 2, 2), (1, 1, 3, 3)), 1.0 / 7.0, rtol=1e-12)


def test_iou_degenerate_box():
    assert iou((1, 1, 1, 3), (0, 0, 2, 2)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 1, 1)) == 0.0


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def test_match_perfect():
    dets = [Detection(0, (10, 10, 20, 20), 0.9)]
    gts = [BoxLabel(0, (10, 10, 20, 20))]
    assert match_detections(dets, gts) == [True]


def test_match_one_to_one():
    dets = [Detection(0, (10, 10, 20, 20), 0.9), Detection(0, (10, 10, 20, 20), 0.8)]
    gts = [BoxLabel(0, (10, 10, 20, 20))]
    assert match_detections(dets, gts) == [True, False]


def test_match_below_threshold_is_fp():
    dets = [Detection(0, (0, 0, 10, 4), 0.9)]  # IoU 0.4 against the GT
    gts = [BoxLabel(0, (0, 0, 10, 10))]
    assert np.isclose(iou(dets[0].box, gts[0].box), 0.4)
    assert match_detections(dets, gts) == [False]


def test_match_prefers_highest_iou_gt():
    det = Detection(0, (0, 0, 10, 10), 0.9)
    worse = BoxLabel(0, (0, 0, 10, 14))
    better = BoxLabel(0, (0, 0, 10, 11))
    flags = match_detections([det, Detection(0, (0, 0, 10, 11), 0.8)], [worse, better])
    # the first det takes `better`; the second can still match `worse`
    assert flags == [True, True]


def test_match_respects_class():
    dets = [Detection(1, (10, 10, 20, 20), 0.9)]
    gts = [BoxLabel(0, (10, 10, 20, 20))]
    assert match_detections(dets, gts) == [False]


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def brute_force_ap(flags, scores, n_gt):
    """Recompute AP by enumerating every distinct score threshold."""
    if n_gt == 0 or len(flags) == 0:
        return 0.0
    flags = np.asarray(flags, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    points = []
    for thr in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= thr
        tp = int(np.sum(flags & keep))
        fp = int(np.sum(~flags & keep))
        points.append((tp / n_gt, tp / (tp + fp)))
    env = [max(p for _r, p in points[i:]) for i in range(len(points))]
    ap = 0.0
    prev = 0.0
    for (r, _p), e in zip(points, env):
        ap += (r - prev) * e
        prev = r
    return ap


def test_ap_single_tp():
    assert average_precision([True], [0.9], 1) == 1.0


def test_ap_order_matters():
    assert average_precision([True, False], [0.9, 0.8], 1) == 1.0
    assert average_precision([False, True], [0.9, 0.8], 1) == 0.5


def test_ap_all_fp():
    assert average_precision([False, False], [0.9, 0.8], 2) == 0.0


def test_ap_empty():
    assert average_precision([], [], 3) == 0.0


def test_ap_rejects_negative_gt_count():
    with pytest.raises(ValueError, match="n_gt"):
        average_precision([True], [0.9], -1)


def test_ap_rejects_misaligned_inputs():
    with pytest.raises(ValueError, match="align"):
        average_precision([True, False], [0.9], 1)


def test_ap_matches_brute_force_oracle():
    rng = np.random.default_rng(21)
    for _ in range(300):
        n = int(rng.integers(1, 21))
        n_gt = int(rng.integers(0, 6))
        flags = rng.random(n) < 0.5
        if n_gt > 0:
            flags &= np.cumsum(flags) <= n_gt  # at most n_gt true positives
        else:
            flags[:] = False
        scores = np.round(rng.random(n), 2)  # coarse grid forces score ties
        got = average_precision(flags.tolist(), scores.tolist(), n_gt)
        assert got == brute_force_ap(flags, scores, n_gt)


def test_ap_invariant_under_order_preserving_rescale():
    rng = np.random.default_rng(22)
    for _ in range(50):
        n = int(rng.integers(1, 15))
        flags = (rng.random(n) < 0.5).tolist()
        scores = rng.random(n)
        a = average_precision(flags, scores.tolist(), 3)
        b = average_precision(flags, (0.25 * scores + 0.5).tolist(), 3)
        assert a == b


def test_ap_duplicate_lower_score_tp_never_increases():
    rng = np.random.default_rng(23)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        flags = (rng.random(n) < 0.6).tolist()
        scores = rng.random(n).tolist()
        base = average_precision(flags, scores, 4)
        # a duplicate of a matched GT arrives as one more FP at a lower score
        dup = average_precision(flags + [False], scores + [min(scores) / 2], 4)
        assert dup <= base + 1e-15


# ---------------------------------------------------------------------------
# reports and evaluate()
# ---------------------------------------------------------------------------

def test_metrics_report_round_trip(tmp_path):
    report = MetricsReport(per_class_ap={"box": 0.5, "disc": 0.75}, map=0.625,
                           counts={"box": 4, "disc": 2, "tri": 0}, protocol="da")
    path = tmp_path / "metrics.json"
    report.save(path)
    loaded = MetricsReport.load(path)
    assert loaded == report


def test_evaluate_deterministic(tiny_dataset):
    params = ModelParams.init(len(tiny_dataset.class_names), seed=3)
    a = evaluate(params, tiny_dataset, "test_target", protocol="da")
    b = evaluate(params, tiny_dataset, "test_target", protocol="da")
    assert a == b
    assert a.protocol == "da"
    assert 0.0 <= a.map <= 1.0
    assert all(0.0 <= v <= 1.0 for v in a.per_class_ap.values())


def test_evaluate_map_is_mean_of_present_classes(tiny_dataset):
    params = ModelParams.init(len(tiny_dataset.class_names), seed=3)
    rep = evaluate(params, tiny_dataset, "test_clear")
    present = [v for name, v in rep.per_class_ap.items() if rep.counts[name] > 0]
    assert np.isclose(rep.map, np.mean(present), rtol=1e-12)
    for name, n in rep.counts.items():
        assert (name in rep.per_class_ap) == (n > 0)


def test_evaluate_rejects_unknown_split(tiny_dataset):
    params = ModelParams.init(len(tiny_dataset.class_names), seed=3)
    with pytest.raises(KeyError):
        evaluate(params, tiny_dataset, "nope")
