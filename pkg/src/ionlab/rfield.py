"""Perturbation probes of context-operator receptive fields.

Perturb every channel of the center input cell and record which output cells
change. Weights are made nonnegative and inputs positive so that no ReLU masks
the perturbation: any dependence in the wiring shows up in the response.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import context as ctx

RFIELD_OPS = ("conv3x3x2", "conv5x5x2", "gap", "irnn", "irnn2dir")


@dataclass
class ReceptiveField:
    op: str
    input_size: tuple  # (H, W)
    rows: tuple  # inclusive bounding rows of affected outputs
    cols: tuple
    full_image: bool  # every output cell responds
    spatially_varying: bool  # the response differs between affected cells
    affected: np.ndarray  # (H, W) bool

    @property
    def window(self) -> tuple:
        return self.rows[1] - self.rows[0] + 1, self.cols[1] - self.cols[0] + 1

    def describe(self) -> str:
        h, w = self.window
        extent = "full image" if self.full_image else f"{h}x{w} window"
        var = "spatially varying" if self.spatially_varying else "spatially constant"
        rows = "single row" if h == 1 else f"rows {self.rows[0]}..{self.rows[1]}"
        return f"{self.op}: {extent} ({rows}, cols {self.cols[0]}..{self.cols[1]}), {var}"


def _nonnegative(arrays: dict) -> None:
    for name, a in arrays.items():
        if name.endswith(".b") or name.endswith("b0"):
            a[...] = 0.0
        else:
            np.abs(a, out=a)


def build_operator(op: str, channels: int, rng):
    """Returns ``x -> output`` for the named context operator (nonnegative weights)."""
    if op in ("conv3x3x2", "conv5x5x2"):
        params = ctx.init_conv_stack(channels, 3 if op == "conv3x3x2" else 5, rng)
        _nonnegative(params.arrays())
        return lambda x: ctx.conv_stack_forward(x, params)
    if op == "gap":
        return ctx.gap_context_forward
    if op == "irnn":
        params = ctx.init_irnn_block(channels, channels, channels, rng, num_layers=2, dropout_p=0.0)
        _nonnegative(params.arrays())
        return lambda x: ctx.irnn_block_forward(x, params)
    if op == "irnn2dir":
        params = ctx.init_two_direction_block(channels, channels, channels, rng, dropout_p=0.0)
        _nonnegative(params.arrays())
        first = ctx.IrnnBlockParams(params.layers[:1], 0.0)  # response after the left-right layer
        return lambda x: ctx.irnn_block_forward(x, first)
    raise ValueError(f"unknown operator {op!r}; choose from {RFIELD_OPS}")


def probe_receptive_field(op: str, height: int = 15, width: int = 15, channels: int = 2, seed: int = 0,
                          delta: float = 1.0, rtol: float = 1e-12) -> ReceptiveField:
    if op not in RFIELD_OPS:
        raise ValueError(f"unknown operator {op!r}; choose from {RFIELD_OPS}")
    if height < 1 or width < 1 or channels < 1:
        raise ValueError("input dims must be positive")
    rng = np.random.default_rng(seed)
    fn = build_operator(op, channels, rng)
    x = rng.uniform(0.5, 1.5, size=(channels, height, width))
    base = fn(x)
    xp = x.copy()
    cy, cx = height // 2, width // 2
    xp[:, cy, cx] += delta
    diff = np.abs(fn(xp) - base).sum(axis=0)
    scale = max(float(diff.max()), 1.0)
    affected = diff > rtol * scale
    if not affected.any():
        raise RuntimeError(f"{op}: the perturbation did not reach any output")
    ys, xs = np.nonzero(affected)
    vals = diff[affected]
    varying = bool(vals.max() - vals.min() > 1e-9 * scale)
    return ReceptiveField(op, (height, width), (int(ys.min()), int(ys.max())), (int(xs.min()), int(xs.max())),
                          bool(affected.all()), varying, affected)
