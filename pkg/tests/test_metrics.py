import numpy as np
import pytest
from hypothesis import given, strategies as st

from ionlab import metrics as mt
from ionlab.postprocess import Detection

GT = mt.GroundTruthObject


def det(score, box, image_id=0, class_id=0):
    return Detection(image_id, class_id, score, tuple(float(v) for v in box))


def tp_fp_tp_case():
    gts = [GT(0, 0, (0, 0, 10, 10)), GT(0, 0, (20, 20, 30, 30))]
    dets = [det(0.9, (0, 0, 10, 10)), det(0.8, (50, 50, 60, 60)), det(0.7, (20, 20, 30, 30))]
    return dets, gts


def test_thresholds_are_exact_grid():
    assert mt.COCO_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_ap_five_sixths():
    assert mt.average_precision([1, 0, 1], [0, 1, 0], 2) == pytest.approx(5 / 6, abs=1e-12)
    dets, gts = tp_fp_tp_case()
    tp, fp, n = mt.match_detections(dets, gts)
    assert tp.tolist() == [True, False, True] and fp.tolist() == [False, True, False] and n == 2
    assert mt.mean_ap(dets, gts)[0] == pytest.approx(5 / 6, abs=1e-12)


def test_ap_edge_cases():
    assert mt.average_precision([], [], 3) == 0.0
    assert mt.average_precision([1], [0], 0) == 0.0
    assert mt.average_precision([1, 1], [0, 0], 2) == 1.0
    assert mt.average_precision([0, 1], [1, 0], 1) == 0.5


def test_uniform_iou_07_gives_half():
    gts = [GT(i, i % 2, (0, 0, 10, 10)) for i in range(4)]
    dets = [det(0.5 + 0.1 * i, (0, 0, 7, 10), i, i % 2) for i in range(4)]
    res = mt.coco_map(dets, gts)
    assert res.map == pytest.approx(0.5, abs=1e-12)
    assert res.map50 == 1.0 and res.map_at(0.7) == 1.0 and res.map_at(0.75) == 0.0


def test_small_bucket_boundary_inclusive():
    gts = [GT(0, 0, (0, 0, 32, 32)), GT(0, 0, (40, 40, 72.01, 72))]
    dets = [det(0.9, (0, 0, 32, 32)), det(0.8, (40, 40, 72.01, 72))]
    sizes = mt.size_stratified(dets, gts, thresholds=(0.5,))
    assert sizes["small"]["ap"] == 1.0 and sizes["medium"]["ap"] == 1.0
    assert sizes["small"]["ar"] == 1.0 and sizes["large"]["ap"] == 0.0
    # only the exact-32^2 object counts as small
    _, n = mt._class_flags(dets, gts, (0.5,), mt.SIZE_BUCKETS["small"])
    assert n == 1


def test_difficult_ground_truth_is_ignored():
    gts = [GT(0, 0, (0, 0, 10, 10)), GT(0, 0, (20, 20, 30, 30), difficult=True)]
    dets = [det(0.9, (20, 20, 30, 30)), det(0.8, (0, 0, 10, 10))]
    tp, fp, n = mt.match_detections(dets, gts)
    assert n == 1 and tp.tolist() == [False, True] and not fp.any()
    assert mt.mean_ap(dets, gts)[0] == 1.0


def test_duplicate_detection_is_false_positive():
    gts = [GT(0, 0, (0, 0, 10, 10))]
    dets = [det(0.9, (0, 0, 10, 10)), det(0.8, (0, 0, 10, 10))]
    tp, fp, _ = mt.match_detections(dets, gts)
    assert tp.tolist() == [True, False] and fp.tolist() == [False, True]


def test_average_recall_cases():
    gts = [GT(0, 0, (0, 0, 10, 10)), GT(0, 0, (20, 20, 30, 30))]
    assert mt.average_recall([det(0.9, (0, 0, 10, 10))], gts) == 0.5
    assert mt.average_recall([], gts) == 0.0
    # IoU 0.7 hits 5 of 10 thresholds
    assert mt.average_recall([det(0.9, (0, 0, 7, 10)), det(0.8, (20, 20, 30, 30))], gts) == pytest.approx(0.75)
    many = [det(0.1, (50, 50, 60, 60))] * 3 + [det(0.05, (0, 0, 10, 10))]
    assert mt.average_recall(many, gts, max_dets=3) == 0.0
    assert mt.average_recall(many, gts, max_dets=4) == 0.5


def test_evaluate_bundle():
    dets, gts = tp_fp_tp_case()
    res = mt.evaluate(dets, gts)
    d = res.as_dict()
    assert d["map50"] == pytest.approx(5 / 6) and set(res.by_size) == {"small", "medium", "large"}
    assert "ap50_class0" in d and "map50" in res.table()


def random_case(seed):
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for img in range(3):
        for _ in range(int(rng.integers(0, 4))):
            xy = rng.uniform(0, 50, 2)
            wh = rng.uniform(5, 30, 2)
            box = np.concatenate([xy, xy + wh])
            c = int(rng.integers(2))
            gts.append(GT(img, c, tuple(box)))
            for _ in range(int(rng.integers(0, 3))):
                dets.append(det(float(rng.uniform()), box + rng.normal(0, 2, 4) * [1, 1, 0, 0] + [0, 0, 3, 3], img, c))
        for _ in range(int(rng.integers(0, 3))):
            xy = rng.uniform(0, 50, 2)
            dets.append(det(float(rng.uniform()), np.concatenate([xy, xy + 10]), img, int(rng.integers(2))))
    return dets, gts


@given(st.integers(0, 10**6))
def test_order_invariance(seed):
    dets, gts = random_case(seed)
    perm = np.random.default_rng(seed + 1).permutation(len(dets))
    a = mt.coco_map(dets, gts)
    b = mt.coco_map([dets[i] for i in perm], gts)
    assert a.map == pytest.approx(b.map, abs=1e-12)


@given(st.integers(0, 10**6))
def test_ap_non_increasing_in_threshold_and_bounded(seed):
    dets, gts = random_case(seed)
    m = mt.mean_ap(dets, gts, mt.COCO_THRESHOLDS)
    assert np.all(np.diff(m) <= 1e-12) and np.all((m >= 0) & (m <= 1))


@given(st.integers(0, 10**6))
def test_adding_a_perfect_top_detection_never_hurts(seed):
    dets, gts = random_case(seed)
    if not gts:
        return
    missing = [g for g in gts if not any(d.image_id == g.image_id and d.class_id == g.class_id for d in dets)]
    if not missing:
        return
    g = missing[0]
    before = mt.mean_ap(dets, gts)[0]
    after = mt.mean_ap(dets + [det(2.0, g.box, g.image_id, g.class_id)], gts)[0]
    assert after >= before - 1e-12
