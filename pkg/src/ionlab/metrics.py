"""Detection evaluation: AP per class, VOC mAP@0.5, COCO mAP@[0.5:0.95], AR, size buckets.

AP integrates the precision envelope over recall at every recall step
(all-points interpolation). Matching is greedy in descending score order: a
detection takes the highest-IoU unmatched ground truth of its class with
IoU >= threshold. Difficult (or out-of-bucket) ground truth is ignored: it is
not counted and a detection that only matches it is neither TP nor FP.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .postprocess import iou_matrix, score_order

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
SIZE_BUCKETS = {
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}


@dataclass(frozen=True)
class GroundTruthObject:
    image_id: str | int
    class_id: int
    box: tuple
    difficult: bool = False

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if x2 < x1 or y2 < y1:
            raise ValueError(f"unordered box {self.box}")

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass
class EvalResult:
    thresholds: tuple
    ap: dict = field(default_factory=dict)  # class_id -> list of AP per threshold
    map50: float = 0.0
    map: float = 0.0
    ar: float = 0.0
    by_size: dict = field(default_factory=dict)  # bucket -> {"ap": .., "ar": ..}

    def map_at(self, thresh: float) -> float:
        i = self.thresholds.index(round(thresh, 2))
        vals = [v[i] for v in self.ap.values()]
        return float(np.mean(vals)) if vals else 0.0

    def as_dict(self) -> dict:
        out = {"map50": self.map50, "map": self.map, "ar": self.ar}
        for bucket, vals in self.by_size.items():
            out[f"ap_{bucket}"] = vals["ap"]
            out[f"ar_{bucket}"] = vals["ar"]
        for c in sorted(self.ap):
            out[f"ap50_class{c}"] = self.ap[c][0] if self.thresholds[0] == 0.5 else float("nan")
        return out

    def table(self) -> str:
        lines = [f"{'metric':<14}{'value':>10}"]
        for k, v in self.as_dict().items():
            lines.append(f"{k:<14}{v:>10.4f}")
        return "\n".join(lines)


def _box_area(b: np.ndarray) -> np.ndarray:
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def _in_range(area, area_range) -> np.ndarray:
    lo, hi = area_range
    # small bucket includes its upper edge and starts at 0
    return (area > lo if lo > 0 else area >= lo) & (area <= hi)


def _match_image(det_boxes, gt_boxes, gt_ignore, thresholds, area_range=None):
    """Flags ``(T, d)``: 1 TP, 0 FP, -1 ignored, for dets in rank order."""
    d, t = len(det_boxes), len(thresholds)
    flags = np.zeros((t, d), dtype=np.int8)
    if d == 0:
        return flags
    ov = iou_matrix(det_boxes, gt_boxes) if len(gt_boxes) else np.zeros((d, 0))
    det_out = (
        ~_in_range(_box_area(det_boxes), area_range) if area_range is not None else np.zeros(d, dtype=bool)
    )
    for ti, thr in enumerate(thresholds):
        taken = np.zeros(len(gt_boxes), dtype=bool)
        for i in range(d):
            ok = (ov[i] >= thr) & ~taken & ~gt_ignore
            if ok.any():
                j = int(np.argmax(np.where(ok, ov[i], -1.0)))
                taken[j] = True
                flags[ti, i] = 1
            elif np.any((ov[i] >= thr) & gt_ignore) or det_out[i]:
                flags[ti, i] = -1
    return flags


def _group(dets, gts, class_id):
    d = [x for x in dets if x.class_id == class_id]
    g = [x for x in gts if x.class_id == class_id]
    return d, g


def _class_flags(dets, gts, thresholds, area_range=None):
    """Flags ``(T, n)`` in global rank order, ranked scores, countable GT count."""
    scores = np.array([x.score for x in dets], dtype=np.float64)
    order = score_order(scores)
    gt_by_image = {}
    for g in gts:
        gt_by_image.setdefault(g.image_id, []).append(g)
    det_rank_by_image = {}
    for rank, i in enumerate(order):
        det_rank_by_image.setdefault(dets[i].image_id, []).append((rank, i))
    flags = np.zeros((len(thresholds), len(dets)), dtype=np.int8)
    num_gt = 0
    ignore_by_image = {}
    for image_id, glist in gt_by_image.items():
        boxes = np.array([g.box for g in glist], dtype=np.float64).reshape(-1, 4)
        ign = np.array([g.difficult for g in glist], dtype=bool)
        if area_range is not None:
            ign |= ~_in_range(_box_area(boxes), area_range)
        ignore_by_image[image_id] = (boxes, ign)
        num_gt += int((~ign).sum())
    for image_id, ranked in det_rank_by_image.items():
        ranks = [r for r, _ in ranked]
        boxes = np.array([dets[i].box for _, i in ranked], dtype=np.float64).reshape(-1, 4)
        gb, gi = ignore_by_image.get(image_id, (np.zeros((0, 4)), np.zeros(0, dtype=bool)))
        flags[:, ranks] = _match_image(boxes, gb, gi, thresholds, area_range)
    return flags, num_gt


def match_detections(dets, gts, iou_thresh: float = 0.5):
    """Greedy matching of one class's detections.

    Returns ``(tp, fp, num_gt)``: boolean arrays in descending-score order (ties
    by input index) and the number of countable ground-truth objects.
    Detections ignored because they hit difficult ground truth are False in both.
    """
    flags, num_gt = _class_flags(list(dets), list(gts), (iou_thresh,))
    return flags[0] == 1, flags[0] == 0, num_gt


def average_precision(tp, fp, num_gt: int) -> float:
    """Area under the precision envelope; 0 when there is no ground truth."""
    tp = np.asarray(tp, dtype=bool)
    fp = np.asarray(fp, dtype=bool)
    keep = tp | fp
    tp, fp = tp[keep], fp[keep]
    if num_gt <= 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _classes(gts):
    return sorted({g.class_id for g in gts})


def per_class_ap(dets, gts, thresholds=COCO_THRESHOLDS, area_range=None) -> dict:
    """``class_id -> [AP per threshold]`` for classes with countable ground truth."""
    dets, gts = list(dets), list(gts)
    out = {}
    for c in _classes(gts):
        d, g = _group(dets, gts, c)
        flags, num_gt = _class_flags(d, g, thresholds, area_range)
        if num_gt == 0:
            continue
        out[c] = [average_precision(f == 1, f == 0, num_gt) for f in flags]
    return out


def mean_ap(dets, gts, thresholds=(0.5,), area_range=None) -> np.ndarray:
    """Class-mean AP at each threshold."""
    ap = per_class_ap(dets, gts, tuple(thresholds), area_range)
    if not ap:
        return np.zeros(len(thresholds))
    return np.mean(np.array(list(ap.values())), axis=0)


def coco_map(dets, gts, thresholds=COCO_THRESHOLDS) -> EvalResult:
    """mAP averaged over IoU 0.50:0.05:0.95, plus the IoU-0.5 view."""
    thresholds = tuple(thresholds)
    ap = per_class_ap(dets, gts, thresholds)
    res = EvalResult(thresholds, ap)
    if ap:
        per_t = np.mean(np.array(list(ap.values())), axis=0)
        res.map = float(per_t.mean())
        res.map50 = float(per_t[thresholds.index(0.5)]) if 0.5 in thresholds else float("nan")
    return res


def _cap_per_image(dets, max_dets):
    if max_dets is None:
        return list(dets)
    by_image = {}
    for i, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(i)
    keep = []
    for idx in by_image.values():
        scores = np.array([dets[i].score for i in idx])
        keep.extend(idx[j] for j in score_order(scores)[:max_dets])
    return [dets[i] for i in sorted(keep)]


def average_recall(dets, gts, max_dets: int | None = 100, thresholds=COCO_THRESHOLDS, area_range=None) -> float:
    """Recall at the full (per-image capped) list, averaged over IoU thresholds then classes."""
    dets = _cap_per_image(list(dets), max_dets)
    gts = list(gts)
    recalls = []
    for c in _classes(gts):
        d, g = _group(dets, gts, c)
        flags, num_gt = _class_flags(d, g, tuple(thresholds), area_range)
        if num_gt == 0:
            continue
        recalls.append(np.mean((flags == 1).sum(axis=1) / num_gt))
    return float(np.mean(recalls)) if recalls else 0.0


def size_stratified(dets, gts, thresholds=COCO_THRESHOLDS, max_dets: int | None = 100) -> dict:
    """AP and AR per COCO size bucket (small: area <= 32^2, medium <= 96^2, large above).

    Ground truth outside the bucket is ignored, as are unmatched detections
    whose own area falls outside it.
    """
    dets, gts = list(dets), list(gts)
    out = {}
    for name, rng in SIZE_BUCKETS.items():
        m = mean_ap(dets, gts, thresholds, rng)
        out[name] = {
            "ap": float(np.mean(m)),
            "ar": average_recall(dets, gts, max_dets, thresholds, rng),
        }
    return out


def evaluate(dets, gts, max_dets: int | None = 100) -> EvalResult:
    dets, gts = list(dets), list(gts)
    res = coco_map(dets, gts)
    res.ar = average_recall(dets, gts, max_dets)
    res.by_size = size_stratified(dets, gts, max_dets=max_dets)
    return res
