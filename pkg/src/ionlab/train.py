"""Deterministic desk-scale training.

Updates accumulate gradients over several single-image passes, clip the
global gradient norm, and apply SGD with momentum under an exponentially
decaying learning rate. Training runs in stages, each freezing a set of layers.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import ground_truth
from .metrics import evaluate, mean_ap
from .model import IonModel, sample_rois
from .postprocess import VotingConfig, postprocess_image

log = logging.getLogger(__name__)


@dataclass
class LrSchedule:
    lr_start: float
    lr_end: float
    total_iters: int

    def __post_init__(self):
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")


def lr_at(schedule: LrSchedule, it: int) -> float:
    """Geometric interpolation from ``lr_start`` (iter 0) to ``lr_end`` (iter total)."""
    if not 0 <= it <= schedule.total_iters:
        raise ValueError(f"iteration {it} outside [0, {schedule.total_iters}]")
    if it == 0 or schedule.total_iters == 0:
        return schedule.lr_start
    if it == schedule.total_iters:
        return schedule.lr_end
    return schedule.lr_start * (schedule.lr_end / schedule.lr_start) ** (it / schedule.total_iters)


@dataclass
class Stage:
    frozen: tuple
    iters: int
    lr_start: float
    lr_end: float

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_start, self.lr_end, self.iters)


# the two-stage VOC recipe; desk-scale configs shrink ``iters``
FULL_SCALE_STAGES = (
    Stage(("conv1", "conv2", "conv3", "conv4", "conv5"), 40_000, 5e-3, 1e-4),
    Stage(("conv1", "conv2"), 100_000, 1e-3, 1e-5),
)


@dataclass
class TrainConfig:
    images_per_update: int = 4
    rois_per_image: int = 128
    fg_fraction: float = 0.25
    fg_thresh: float = 0.5
    bg_thresh_lo: float = 0.1
    clip_norm_single: float = 20.0
    clip_norm_accum: float = 80.0
    clip_mode: str = "accum"  # "accum": clip the summed gradient; "per_pass": clip each image's
    momentum: float = 0.9
    stages: tuple = FULL_SCALE_STAGES
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.clip_mode not in ("accum", "per_pass"):
            raise ValueError("clip_mode must be 'accum' or 'per_pass'")
        if self.images_per_update < 1 or self.rois_per_image < 1:
            raise ValueError("need at least one image and one ROI per update")

    @property
    def rois_per_update(self) -> int:
        return self.images_per_update * self.rois_per_image

    @property
    def update_clip(self) -> float:
        return self.clip_norm_accum if self.images_per_update > 1 else self.clip_norm_single


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))


def clip_gradient(grad, threshold: float):
    """Rescale to norm ``threshold`` when the L2 norm exceeds it.

    Accepts one array or a ``name -> array`` dict (clipped by its global norm).
    Returns ``(clipped, norm_before)``.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    if isinstance(grad, dict):
        norm = global_norm(grad)
        if norm > threshold:
            f = threshold / norm
            return {k: g * f for k, g in grad.items()}, norm
        return dict(grad), norm
    g = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return g * (threshold / norm), norm
    return g.copy(), norm


@dataclass
class TrainState:
    seed: int
    momentum: dict = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        ss = np.random.SeedSequence(self.seed)
        order, sampling, dropout = ss.spawn(3)
        self.order_rng = np.random.default_rng(order)
        self.sample_rng = np.random.default_rng(sampling)
        self.dropout_rng = np.random.default_rng(dropout)


def image_gradient(model: IonModel, scene, config: TrainConfig, state: TrainState, frozen=frozenset(),
                   training: bool = True):
    sample = sample_rois(scene.proposals, scene.gt_boxes, scene.gt_classes, config.rois_per_image,
                         state.sample_rng, config.fg_fraction, config.fg_thresh, config.bg_thresh_lo)
    return model.loss_and_grads(scene, sample.rois, sample.labels, sample.targets, training,
                                state.dropout_rng, frozen)


def accumulate_gradients(model, scenes, config: TrainConfig, state: TrainState, frozen=frozenset()):
    """Sum per-image gradients in scene order. Returns ``(grads, mean losses)``."""
    total = {}
    losses = {}
    for scene in scenes:
        lo, g = image_gradient(model, scene, config, state, frozen)
        if not np.isfinite(lo["total"]):
            raise FloatingPointError(f"non-finite loss on image {scene.image_id}: {lo}")
        if config.clip_mode == "per_pass":
            g, _ = clip_gradient(g, config.clip_norm_single)
        for k in sorted(g):
            total[k] = total[k] + g[k] if k in total else g[k].copy()
        for k, v in lo.items():
            losses[k] = losses.get(k, 0.0) + v / len(scenes)
    return total, losses


def sgd_momentum_update(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    """``v <- momentum * v + lr * g``; ``p <- p - v``, in place."""
    for k in sorted(grads):
        v = velocity.get(k)
        if v is None:
            v = velocity[k] = np.zeros_like(params[k])
        v *= momentum
        v += lr * grads[k]
        params[k] -= v


def train_step_accumulating(model: IonModel, scenes, config: TrainConfig, lr: float, state: TrainState,
                            frozen=frozenset()) -> dict:
    if len(scenes) != config.images_per_update:
        raise ValueError(f"expected {config.images_per_update} scenes, got {len(scenes)}")
    grads, losses = accumulate_gradients(model, scenes, config, state, frozen)
    if config.clip_mode == "accum":
        grads, norm = clip_gradient(grads, config.update_clip)
    else:
        norm = global_norm(grads)
    sgd_momentum_update(model.params, grads, state.momentum, lr, config.momentum)
    state.iteration += 1
    return {**losses, "grad_norm": norm, "lr": lr}


def _batches(n_scenes: int, size: int, rng):
    while True:
        perm = rng.permutation(n_scenes)
        for i in range(0, n_scenes - size + 1, size):
            yield perm[i : i + size]


def run_staged_training(model: IonModel, scenes, config: TrainConfig, state: TrainState | None = None,
                        eval_fn=None, eval_every: int = 0, progress=None):
    """Run every stage in order. Returns ``(model, curve)``; curve rows are dicts.

    ``eval_fn(model) -> dict`` is called every ``eval_every`` updates (0: never)
    and its values are merged into that row.
    """
    state = state or TrainState(config.seed)
    if len(scenes) < config.images_per_update:
        raise ValueError("fewer scenes than images per update")
    if model.config.measure_scale and state.iteration == 0:
        scale = model.measure_conv5_norm(scenes[:16])
        model.set_fixed_scale(scale)
        log.info("fusion scale set to measured conv5 norm %.2f", scale)
    frozen_sets = [model.resolve_layers(st.frozen) for st in config.stages]
    batches = _batches(len(scenes), config.images_per_update, state.order_rng)
    curve = []
    t0 = time.perf_counter()
    global_it = 0
    for si, (stage, frozen) in enumerate(zip(config.stages, frozen_sets)):
        sched = stage.schedule
        for it in range(stage.iters):
            idx = next(batches)
            row = train_step_accumulating(model, [scenes[i] for i in idx], config, lr_at(sched, it), state,
                                          frozen)
            global_it += 1
            row.update(stage=si, iter=global_it, seconds=time.perf_counter() - t0)
            if eval_fn is not None and eval_every and global_it % eval_every == 0:
                row.update(eval_fn(model))
            curve.append(row)
            if config.log_every and global_it % config.log_every == 0:
                log.info("stage %d iter %d lr %.2e loss %.4f (cls %.4f reg %.4f seg %.4f) |g| %.2f",
                         si, global_it, row["lr"], row["total"], row["cls"], row["reg"], row["seg"],
                         row["grad_norm"])
            if progress is not None:
                progress(row)
    return model, curve


def write_curve_csv(curve, path) -> None:
    keys = []
    for row in curve:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in curve:
            w.writerow(row)


# ------------------------------------------------------------ evaluation


def detect_scenes(model: IonModel, scenes, voting: VotingConfig, flip: bool = False) -> list:
    dets = []
    for sc in scenes:
        raw = model.raw_detections(sc, voting.rounds, flip)
        dets.extend(postprocess_image(raw, voting).to_detections())
    return dets


def raw_detections(model: IonModel, scenes, rounds: int = 2, flip: bool = False) -> list:
    return [model.raw_detections(sc, rounds, flip) for sc in scenes]


def evaluate_model(model: IonModel, scenes, voting: VotingConfig, full: bool = False) -> dict:
    dets = detect_scenes(model, scenes, voting)
    gts = ground_truth(scenes)
    if full:
        return evaluate(dets, gts).as_dict()
    m = mean_ap(dets, gts, (0.5,))
    return {"ap50": float(m[0])}
