"""Synthetic shapes scenes: a desk-scale stand-in for a detection dataset.

Each scene is a noisy RGB image with a few filled shapes (rectangle, disc,
triangle; one class each), their boxes, a per-pixel class map, and jittered
proposal boxes whose quality is deliberately worse for small objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .metrics import GroundTruthObject
from .postprocess import iou_matrix

SHAPES = ("rectangle", "disc", "triangle")
# class-tinted base colors; per-object color is a noisy blend with these
BASE_COLORS = np.array([[0.9, 0.25, 0.2], [0.2, 0.85, 0.3], [0.25, 0.35, 0.95]])
SMALL_AREA = 32.0**2


@dataclass
class DataConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 10
    max_size: int = 40
    noise: float = 0.12
    color_tint: float = 0.6  # weight of the class color in each object's color
    max_overlap: float = 0.2
    jitter_per_object: int = 10
    jitter_small: float = 0.28  # std of center shift / size, relative to the box
    jitter_large: float = 0.14
    small_miss_prob: float = 0.15  # chance a small object gets no close proposals
    random_proposals: int = 40

    def __post_init__(self):
        if self.num_classes < 1 or self.num_classes > len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if not 0 < self.min_size <= self.max_size <= self.image_size:
            raise ValueError("need 0 < min_size <= max_size <= image_size")


@dataclass
class SyntheticScene:
    image_id: int
    image: np.ndarray  # (3, H, W)
    objects: list  # GroundTruthObject
    class_map: np.ndarray  # (H, W) ints, 0 background, c + 1 for class c
    proposals: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    @property
    def gt_boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def gt_classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)


def _shape_mask(cls: int, box, size: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = (xx >= x1) & (xx < x2) & (yy >= y1) & (yy < y2)
    if SHAPES[cls] == "rectangle":
        return inside
    if SHAPES[cls] == "disc":
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    # apex at top center, base along the bottom edge
    cx = (x1 + x2) / 2
    half = (x2 - x1) / 2 * (yy - y1) / (y2 - y1)
    return inside & (np.abs(xx - cx) <= half)


def _jitter(box, sigma, rng, size):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx = (x1 + x2) / 2 + rng.normal(0, sigma) * w
    cy = (y1 + y2) / 2 + rng.normal(0, sigma) * h
    nw = w * np.exp(rng.normal(0, sigma))
    nh = h * np.exp(rng.normal(0, sigma))
    b = np.array([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2])
    b = np.clip(b, 0, size)
    if b[2] - b[0] < 2 or b[3] - b[1] < 2:
        return None
    return b


def make_proposals(gt_boxes: np.ndarray, config: DataConfig, rng) -> np.ndarray:
    size = config.image_size
    out = []
    for box in gt_boxes:
        small = (box[2] - box[0]) * (box[3] - box[1]) <= SMALL_AREA
        sigma = config.jitter_small if small else config.jitter_large
        if small and rng.random() < config.small_miss_prob:
            sigma *= 3.0
        for _ in range(config.jitter_per_object):
            b = _jitter(box, sigma, rng, size)
            if b is not None:
                out.append(b)
    for _ in range(config.random_proposals):
        w, h = rng.uniform(config.min_size * 0.6, config.max_size * 1.2, size=2)
        x = rng.uniform(0, max(size - w, 1))
        y = rng.uniform(0, max(size - h, 1))
        out.append(np.clip([x, y, x + w, y + h], 0, size))
    return np.array(out, dtype=np.float64).reshape(-1, 4)


def render_scene(image_id: int, config: DataConfig, rng) -> SyntheticScene:
    s = config.image_size
    gy, gx = np.mgrid[0:s, 0:s] / s
    bg_tone = rng.uniform(0.3, 0.6, size=(3, 1, 1))
    slope = rng.uniform(-0.15, 0.15, size=(3, 2))
    image = bg_tone + slope[:, 0, None, None] * gx + slope[:, 1, None, None] * gy
    class_map = np.zeros((s, s), dtype=np.int64)
    objects = []
    boxes = []
    n_obj = rng.integers(config.min_objects, config.max_objects + 1)
    for _ in range(n_obj):
        for _attempt in range(20):
            cls = int(rng.integers(config.num_classes))
            w, h = rng.integers(config.min_size, config.max_size + 1, size=2)
            x1 = int(rng.integers(0, s - w + 1))
            y1 = int(rng.integers(0, s - h + 1))
            box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
            if boxes and iou_matrix(np.array([box]), np.array(boxes)).max() > config.max_overlap:
                continue
            mask = _shape_mask(cls, box, s)
            color = config.color_tint * BASE_COLORS[cls] + (1 - config.color_tint) * rng.uniform(0, 1, 3)
            image[:, mask] = color[:, None]
            class_map[mask] = cls + 1
            boxes.append(box)
            objects.append(GroundTruthObject(image_id, cls, box))
            break
    image = image + rng.normal(0, config.noise, size=image.shape)
    scene = SyntheticScene(image_id, image, objects, class_map)
    scene.proposals = make_proposals(scene.gt_boxes, config, rng)
    return scene


def generate_shapes_dataset(seed: int, n_images: int, config: DataConfig | None = None, start_id: int = 0) -> list:
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    config = config or DataConfig()
    rng = np.random.default_rng(seed)
    return [render_scene(start_id + i, config, rng) for i in range(n_images)]


def proposal_recall(scenes, iou_thresh: float = 0.5) -> dict:
    """Fraction of ground truth covered by some proposal, overall and for small / large objects."""
    hits = {"all": [], "small": [], "large": []}
    for sc in scenes:
        gt = sc.gt_boxes
        if not len(gt):
            continue
        best = iou_matrix(gt, sc.proposals).max(axis=1) if len(sc.proposals) else np.zeros(len(gt))
        area = (gt[:, 2] - gt[:, 0]) * (gt[:, 3] - gt[:, 1])
        for b, a in zip(best >= iou_thresh, area):
            hits["all"].append(b)
            hits["small" if a <= SMALL_AREA else "large"].append(b)
    return {k: float(np.mean(v)) if v else float("nan") for k, v in hits.items()}


def ground_truth(scenes) -> list:
    return [o for sc in scenes for o in sc.objects]
