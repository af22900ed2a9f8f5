"""Seeded synthetic benchmark for box voting.

Each ground-truth object is covered by a cloud of loosely localized,
moderately scored detections, and with some probability by one precise,
confidently scored detection; random false positives are sprinkled on top.
Voting averages the kept box with its neighbors: that rescues poorly placed
kept boxes (helping loose IoU) but drags precise ones toward the cloud mean
(hurting tight IoU) unless the vote threshold is tight.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .metrics import GroundTruthObject, mean_ap
from .postprocess import RawDetections, VotingConfig, postprocess_image


@dataclass
class VotingBenchConfig:
    seed: int = 0
    n_images: int = 300
    objects_per_image: tuple = (1, 4)  # inclusive range
    num_classes: int = 3
    image_size: float = 256.0
    size_range: tuple = (24.0, 96.0)
    p_precise: float = 0.5
    sigma_precise: float = 0.015  # center shift / size and log-size std
    score_precise: tuple = (0.75, 1.0)
    cloud_size: int = 8
    sigma_cloud: float = 0.12
    score_cloud: tuple = (0.15, 0.7)
    false_positives: int = 3  # per image
    score_fp: tuple = (0.05, 0.6)
    nms_iou: float = 0.3


def _jitter(box, sigma, rng, n):
    w, h = box[2] - box[0], box[3] - box[1]
    cx, cy = box[0] + w / 2, box[1] + h / 2
    e = rng.normal(0.0, sigma, size=(n, 4))
    cx = cx + e[:, 0] * w
    cy = cy + e[:, 1] * h
    w2, h2 = w * np.exp(e[:, 2]), h * np.exp(e[:, 3])
    return np.stack([cx - w2 / 2, cy - h2 / 2, cx + w2 / 2, cy + h2 / 2], axis=1)


def make_jittered_detections(config: VotingBenchConfig):
    """Returns ``(raw detections per image, ground truth)``."""
    rng = np.random.default_rng(config.seed)
    raws, gts = [], []
    lo, hi = config.size_range
    for image_id in range(config.n_images):
        boxes, scores, classes = [], [], []
        for _ in range(int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))):
            c = int(rng.integers(config.num_classes))
            w, h = rng.uniform(lo, hi, size=2)
            x, y = rng.uniform(0, config.image_size - w), rng.uniform(0, config.image_size - h)
            gt = np.array([x, y, x + w, y + h])
            gts.append(GroundTruthObject(image_id, c, tuple(gt.tolist())))
            cloud = _jitter(gt, config.sigma_cloud, rng, config.cloud_size)
            boxes.append(cloud)
            scores.append(rng.uniform(*config.score_cloud, size=config.cloud_size))
            classes.append(np.full(config.cloud_size, c))
            if rng.random() < config.p_precise:
                boxes.append(_jitter(gt, config.sigma_precise, rng, 1))
                scores.append(rng.uniform(*config.score_precise, size=1))
                classes.append(np.full(1, c))
        k = config.false_positives
        if k:
            wh = rng.uniform(lo, hi, size=(k, 2))
            xy = rng.uniform(0, 1, size=(k, 2)) * (config.image_size - wh)
            boxes.append(np.concatenate([xy, xy + wh], axis=1))
            scores.append(rng.uniform(*config.score_fp, size=k))
            classes.append(rng.integers(config.num_classes, size=k))
        raws.append(RawDetections(image_id, np.concatenate(boxes), np.concatenate(scores),
                                  np.concatenate(classes).astype(np.int64)))
    return raws, gts


def voting_benchmark(config: VotingBenchConfig | None = None, vote_ious=(None, 0.5, 0.854),
                     thresholds=(0.5, 0.85)) -> dict:
    """mAP at each IoU threshold for each vote setting (``None`` = plain NMS).

    Returns ``{vote_iou: {threshold: mAP}, "seconds": runtime}``.
    """
    config = config or VotingBenchConfig()
    t0 = time.perf_counter()
    raws, gts = make_jittered_detections(config)
    out = {}
    for v in vote_ious:
        cfg = VotingConfig(config.nms_iou, v, score_thresh=0.0, max_per_image=100)
        dets = []
        for raw in raws:
            dets.extend(postprocess_image(raw, cfg).to_detections())
        m = mean_ap(dets, gts, thresholds)
        out[v] = {t: float(x) for t, x in zip(thresholds, m)}
    out["seconds"] = time.perf_counter() - t0
    return out
