"""From raw head outputs to final detections.

Raw detections are scored boxes per (image, class). The pipeline is: score
threshold, greedy NMS, score-weighted box voting over all surviving boxes,
then a per-image cap. Two-round regression feeds the round-1 regressed boxes
back through the network and pools both rounds before NMS.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .detect_head import decode_delta


@dataclass(frozen=True)
class Detection:
    image_id: str | int
    class_id: int
    score: float
    box: tuple  # (x1, y1, x2, y2)

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("non-finite detection score")
        x1, y1, x2, y2 = self.box
        if x2 < x1 or y2 < y1:
            raise ValueError(f"unordered box {self.box}")


@dataclass
class VotingConfig:
    nms_iou: float = 0.3
    vote_iou: float | None = 0.5  # None disables voting
    rounds: int = 2
    score_thresh: float = 0.05
    max_per_image: int = 100

    def __post_init__(self):
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ValueError("nms_iou must be in [0, 1]")
        if self.vote_iou is not None and not 0.0 <= self.vote_iou <= 1.0:
            raise ValueError("vote_iou must be in [0, 1]")
        if self.rounds not in (1, 2):
            raise ValueError("rounds must be 1 or 2")


# tuned on COCO minival
COCO_TUNED = dict(nms_iou=0.443, vote_iou=0.854)


@dataclass
class AnchorConfig:
    base: tuple = (32.0, 32.0)
    aspect_ratios: tuple = ((1, 2), (1, 1), (2, 1))  # w:h
    scales: tuple = (64.0, 90.5, 128.0, 181.0, 256.0, 362.0, 512.0)


# ----------------------------------------------------------------- overlap


def _as_box(b):
    if hasattr(b, "as_array"):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def iou(a, b) -> float:
    a, b = _as_box(a), _as_box(b)
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


# --------------------------------------------------------------- NMS / vote


def score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float):
    """Greedy NMS for one class.

    Returns ``(kept, suppressed_by)``: kept indices in greedy order, and a dict
    mapping each kept index to the indices it suppressed (IoU > threshold).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    ov = iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    kept = []
    suppressed_by = {}
    for pos, i in enumerate(order):
        if not alive[pos]:
            continue
        kept.append(int(i))
        rest = order[pos + 1 :]
        hit = alive[pos + 1 :] & (ov[i, rest] > iou_thresh)
        suppressed_by[int(i)] = [int(j) for j in rest[hit]]
        alive[pos + 1 :] &= ~hit
    return kept, suppressed_by


def weighted_vote(kept_boxes: np.ndarray, pool_boxes: np.ndarray, pool_scores: np.ndarray, vote_iou: float):
    """Replace each kept box by the score-weighted mean of pool boxes with IoU >= ``vote_iou``.

    The pool should contain the kept boxes themselves so every box has at least
    its own vote.
    """
    kept_boxes = np.asarray(kept_boxes, dtype=np.float64).reshape(-1, 4)
    pool_boxes = np.asarray(pool_boxes, dtype=np.float64).reshape(-1, 4)
    w = (iou_matrix(kept_boxes, pool_boxes) >= vote_iou) * np.asarray(pool_scores)[None, :]
    total = w.sum(axis=1, keepdims=True)
    out = kept_boxes.copy()
    ok = total[:, 0] > 0
    out[ok] = (w[ok] @ pool_boxes) / total[ok]
    return out


@dataclass
class RawDetections:
    """Scored boxes for one image, any number of classes (0-based class ids)."""

    image_id: str | int
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.scores)

    def to_detections(self) -> list:
        return [
            Detection(self.image_id, int(c), float(s), tuple(float(v) for v in b))
            for b, s, c in zip(self.boxes, self.scores, self.classes)
        ]

    @classmethod
    def from_detections(cls, image_id, dets):
        dets = list(dets)
        if not dets:
            return cls(image_id)
        return cls(
            image_id,
            np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4),
            np.array([d.score for d in dets], dtype=np.float64),
            np.array([d.class_id for d in dets], dtype=np.int64),
        )


def postprocess_image(raw: RawDetections, config: VotingConfig) -> RawDetections:
    """Threshold, per-class NMS + voting, then cap by global score."""
    keep = raw.scores > config.score_thresh
    boxes, scores, classes = raw.boxes[keep], raw.scores[keep], raw.classes[keep]
    out_b, out_s, out_c = [], [], []
    for c in np.unique(classes):
        idx = np.flatnonzero(classes == c)
        b, s = boxes[idx], scores[idx]
        kept, _ = nms(b, s, config.nms_iou)
        kb = b[kept]
        if config.vote_iou is not None:
            kb = weighted_vote(kb, b, s, config.vote_iou)
        out_b.append(kb)
        out_s.append(s[kept])
        out_c.append(np.full(len(kept), c, dtype=np.int64))
    if not out_s:
        return RawDetections(raw.image_id)
    b, s, c = np.concatenate(out_b), np.concatenate(out_s), np.concatenate(out_c)
    order = score_order(s)[: config.max_per_image]
    return RawDetections(raw.image_id, b[order], s[order], c[order])


def postprocess(detections, config: VotingConfig) -> list:
    """List-of-:class:`Detection` form of :func:`postprocess_image`, grouped by image."""
    by_image = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    out = []
    for image_id, dets in by_image.items():
        out.extend(postprocess_image(RawDetections.from_detections(image_id, dets), config).to_detections())
    return out


# ------------------------------------------------------ two-round regression


def _round_detections(boxes_per_class, probs, deltas, image_size):
    """Detections of one round. ``boxes_per_class`` is (n, 4) or (K, n, 4)."""
    k = probs.shape[1] - 1
    b_all, s_all, c_all, next_boxes = [], [], [], []
    for c in range(k):
        src = boxes_per_class if boxes_per_class.ndim == 2 else boxes_per_class[c]
        reg = decode_delta(src, deltas[:, 4 * c : 4 * c + 4], image_size)
        b_all.append(reg)
        s_all.append(probs[:, c + 1])
        c_all.append(np.full(len(src), c, dtype=np.int64))
        next_boxes.append(reg)
    return np.concatenate(b_all), np.concatenate(s_all), np.concatenate(c_all), np.stack(next_boxes)


MIN_BOX_SIZE = 1.0


def _ensure_min_size(boxes: np.ndarray, min_size: float = MIN_BOX_SIZE) -> np.ndarray:
    """Widen boxes thinner than ``min_size`` about their center (clipping can collapse them)."""
    b = boxes.copy()
    for lo, hi in ((0, 2), (1, 3)):
        c = 0.5 * (b[..., lo] + b[..., hi])
        thin = b[..., hi] - b[..., lo] < min_size
        b[..., lo] = np.where(thin, c - 0.5 * min_size, b[..., lo])
        b[..., hi] = np.where(thin, c + 0.5 * min_size, b[..., hi])
    return b


def two_round_raw(proposals: np.ndarray, forward_fn: Callable, rounds: int = 2, image_size=None,
                  image_id=0) -> RawDetections:
    """Score and regress proposals; with ``rounds=2`` re-score the regressed boxes.

    ``forward_fn(boxes (n, 4)) -> (probs (n, K+1), deltas (n, 4K))``. In round 2
    each class's regressed boxes are evaluated again and that class's output is
    kept. Detections of all rounds are pooled.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    probs, deltas = forward_fn(proposals)
    b, s, c, nxt = _round_detections(proposals, probs, deltas, image_size)
    parts = [(b, s, c)]
    if rounds == 2:
        k = probs.shape[1] - 1
        # round-1 boxes clipped to the image border can have zero extent
        nxt = _ensure_min_size(nxt)
        p2 = np.empty((k, len(proposals), 1))
        d2 = np.empty((k, len(proposals), 4))
        for cls in range(k):
            pr, de = forward_fn(nxt[cls])
            p2[cls, :, 0] = pr[:, cls + 1]
            d2[cls] = de[:, 4 * cls : 4 * cls + 4]
        b2 = np.concatenate([decode_delta(nxt[cls], d2[cls], image_size) for cls in range(k)])
        s2 = p2[:, :, 0].reshape(-1)
        c2 = np.repeat(np.arange(k, dtype=np.int64), len(proposals))
        parts.append((b2, s2, c2))
    return RawDetections(
        image_id,
        np.concatenate([p[0] for p in parts]),
        np.concatenate([p[1] for p in parts]),
        np.concatenate([p[2] for p in parts]),
    )


def two_round_regression(proposals, forward_fn, config: VotingConfig, image_size=None, image_id=0):
    raw = two_round_raw(proposals, forward_fn, config.rounds, image_size, image_id)
    return postprocess_image(raw, config)


# ------------------------------------------------------------- flip merge


def flip_boxes(boxes: np.ndarray, image_width: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).copy()
    b[..., [0, 2]] = image_width - b[..., [2, 0]]
    return b


def flip_merge(probs: np.ndarray, deltas: np.ndarray, probs_flipped: np.ndarray, deltas_flipped: np.ndarray):
    """Average per-ROI outputs of the original and mirrored image.

    ``*_flipped`` were produced for the mirrored ROIs on the mirrored image;
    their dx is negated before averaging, everything else is averaged as is.
    """
    if probs.shape != probs_flipped.shape or deltas.shape != deltas_flipped.shape:
        raise ValueError("original and flipped outputs cover different ROI sets")
    back = np.asarray(deltas_flipped, dtype=np.float64).copy()
    back[:, 0::4] *= -1.0
    return (probs + probs_flipped) / 2.0, (deltas + back) / 2.0


# ------------------------------------------------------- threshold search


def threshold_search(raw_by_image: list, gts, n_samples: int = 200, seed: int = 0, candidates=None,
                     metric=None, base: VotingConfig | None = None):
    """Random search over ``(nms_iou, vote_iou)`` in ``[0, 1]^2``.

    ``raw_by_image`` are pre-NMS :class:`RawDetections` evaluated once; each
    candidate only re-runs post-processing. ``metric(dets, gts) -> float``
    defaults to COCO mAP@[0.5:0.95]. Returns ``(nms_iou, vote_iou, score)``.
    """
    from .metrics import coco_map

    if not raw_by_image or not gts:
        raise ValueError("threshold search needs validation detections and ground truth")
    metric = metric or (lambda d, g: coco_map(d, g).map)
    base = base or VotingConfig()
    if candidates is None:
        rng = np.random.default_rng(seed)
        candidates = [tuple(p) for p in rng.uniform(0.0, 1.0, size=(n_samples, 2))]
    best = None
    for nms_t, vote_t in candidates:
        cfg = VotingConfig(nms_t, vote_t, base.rounds, base.score_thresh, base.max_per_image)
        dets = []
        for raw in raw_by_image:
            dets.extend(postprocess_image(raw, cfg).to_detections())
        score = metric(dets, gts)
        if best is None or score > best[2]:
            best = (float(nms_t), float(vote_t), float(score))
    return best


# ---------------------------------------------------------------- anchors


def generate_anchor_shapes(config: AnchorConfig | None = None) -> list:
    """Base square plus every ratio x scale, area-preserving: ``w = s*sqrt(r)``, ``h = s/sqrt(r)``."""
    config = config or AnchorConfig()
    shapes = [tuple(float(v) for v in config.base)]
    for rw, rh in config.aspect_ratios:
        r = rw / rh
        for s in config.scales:
            shapes.append((s * math.sqrt(r), s / math.sqrt(r)))
    return shapes
