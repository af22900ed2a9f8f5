"""Desk-scale training recipes and the ablation variants compared in the acceptance run.

All variants share the data, seed, schedule and evaluation; they differ only in
the model fields listed in ``VARIANTS``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DataConfig, generate_shapes_dataset
from .model import IonModel, ModelConfig
from .postprocess import VotingConfig
from .train import Stage, TrainConfig, TrainState, evaluate_model, run_staged_training

# fusion scale for the toy backbone: puts normalized-then-scaled entries near unit size
TOY_SCALE = 40.0

VARIANTS = {
    # skip pooling from conv3 + conv4 + conv5 + context, normalized fusion, seg regularizer
    "ion": dict(seg_loss=True, scale_init=TOY_SCALE),
    "ion_noseg": dict(seg_loss=False, scale_init=TOY_SCALE),
    "conv5_only": dict(context="none", sources=(("conv5", 16),), scale_init=TOY_SCALE),
    "unnormalized": dict(seg_loss=True, norm_mode="none", scale_mode="fixed"),
}


@dataclass
class ToyBudget:
    n_train: int = 2000
    n_test: int = 200
    train_seed: int = 1
    test_seed: int = 2
    iters: int = 800
    lr_start: float = 3e-3
    lr_end: float = 3e-4
    images_per_update: int = 4
    rois_per_image: int = 64
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)

    def train_config(self) -> TrainConfig:
        # a single stage with nothing frozen: the toy backbone has no pretrained weights to protect
        return TrainConfig(
            images_per_update=self.images_per_update,
            rois_per_image=self.rois_per_image,
            stages=(Stage((), self.iters, self.lr_start, self.lr_end),),
            seed=self.seed,
            log_every=0,
        )


def toy_datasets(budget: ToyBudget):
    train = generate_shapes_dataset(budget.train_seed, budget.n_train, budget.data)
    test = generate_shapes_dataset(budget.test_seed, budget.n_test, budget.data, start_id=100_000)
    return train, test


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    return ModelConfig(**{**VARIANTS[name], **overrides})


def train_variant(config: ModelConfig, budget: ToyBudget, train_scenes, test_scenes=None,
                  voting: VotingConfig | None = None) -> dict:
    """Train one model under ``budget``; returns timings, the model and (optionally) test metrics."""
    model = IonModel(config)
    t0 = time.perf_counter()
    model, curve = run_staged_training(model, train_scenes, budget.train_config(), TrainState(budget.seed))
    out = {"model": model, "curve": curve, "train_seconds": time.perf_counter() - t0}
    if test_scenes is not None:
        t1 = time.perf_counter()
        out["metrics"] = evaluate_model(model, test_scenes, voting or VotingConfig(), full=True)
        out["eval_seconds"] = time.perf_counter() - t1
    return out


def run_ablation(names=tuple(VARIANTS), budget: ToyBudget | None = None, progress=None) -> dict:
    budget = budget or ToyBudget()
    train, test = toy_datasets(budget)
    results = {}
    for name in names:
        r = train_variant(variant_config(name), budget, train, test)
        results[name] = r
        if progress is not None:
            progress(name, r)
    return results


def shrink(budget: ToyBudget, **kw) -> ToyBudget:
    return replace(budget, **kw)


def final_loss(curve, key: str = "total", window: int = 50) -> float:
    vals = [row[key] for row in curve[-window:]]
    return float(np.mean(vals)) if vals else float("nan")
