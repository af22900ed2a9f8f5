"""Multi-layer ROI pooling with amplitude normalization.

Each source layer is ROI max-pooled to a fixed grid, L2 normalized, re-scaled,
then all sources are concatenated along channels and reduced by a 1x1 conv.
ROI batches are ``(N, 4)`` arrays of ``x1, y1, x2, y2`` image coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn_core import ConvParams, ShapeError, xavier_init

NORM_MODES = ("all", "channel", "none")
DEFAULT_SCALE = {"all": 1000.0, "channel": 130.0, "none": 1.0}
NORM_EPS = 1e-12


@dataclass(frozen=True)
class RoiBox:
    x1: float
    y1: float
    x2: float
    y2: float
    image_id: str | int = 0

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"unordered box {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class SkipPoolConfig:
    sources: list = field(default_factory=lambda: [("conv3", 4), ("conv4", 8), ("conv5", 16), ("context", 16)])
    pooled_h: int = 7
    pooled_w: int = 7
    norm_mode: str = "all"
    scale_mode: str = "learned"  # or "fixed"
    scale_init: float | None = None  # None: 1000 for "all", 130 for "channel"
    reduced_channels: int = 512

    def __post_init__(self):
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.scale_mode not in ("learned", "fixed"):
            raise ValueError("scale_mode must be 'learned' or 'fixed'")
        if self.pooled_h <= 0 or self.pooled_w <= 0:
            raise ValueError("pooled dims must be positive")
        if self.norm_mode != "none" and self.initial_scale() <= 0:
            raise ValueError("scale_init must be positive when normalizing")

    def initial_scale(self) -> float:
        if self.scale_init is not None:
            return float(self.scale_init)
        return DEFAULT_SCALE[self.norm_mode]


@dataclass
class SkipPoolParams:
    scales: dict  # source -> per-channel array (learned) or float (fixed)
    reduce: ConvParams

    def arrays(self):
        out = {f"scale.{k}": v for k, v in self.scales.items() if isinstance(v, np.ndarray)}
        out["reduce.w"] = self.reduce.weights
        out["reduce.b"] = self.reduce.bias
        return out


def init_skip_pool(config: SkipPoolConfig, source_channels: dict, rng) -> SkipPoolParams:
    scales = {}
    for name, _ in config.sources:
        if config.norm_mode == "none":
            scales[name] = 1.0
        elif config.scale_mode == "learned":
            scales[name] = np.full(source_channels[name], config.initial_scale())
        else:
            scales[name] = config.initial_scale()
    total = sum(source_channels[name] for name, _ in config.sources)
    # Xavier keeps the reduce output amplitude roughly fixed as sources are added
    reduce = ConvParams(
        xavier_init((config.reduced_channels, total, 1, 1), rng), np.zeros(config.reduced_channels)
    )
    return SkipPoolParams(scales, reduce)


# ------------------------------------------------------------ ROI max pool


def roi_cells(boxes: np.ndarray, stride: int, height: int, width: int) -> np.ndarray:
    """Map image boxes to feature-cell rectangles ``[y0, y1) x [x0, x1)``.

    Top-left uses floor(coord / stride), bottom-right ceil(coord / stride); the
    result is clipped to the map and made at least one cell in each axis.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    x0 = np.clip(np.floor(boxes[:, 0] / stride), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.floor(boxes[:, 1] / stride), 0, height - 1).astype(np.int64)
    x1 = np.clip(np.ceil(boxes[:, 2] / stride), 0, width).astype(np.int64)
    y1 = np.clip(np.ceil(boxes[:, 3] / stride), 0, height).astype(np.int64)
    x1 = np.maximum(x1, x0 + 1)
    y1 = np.maximum(y1, y0 + 1)
    return np.stack([y0, y1, x0, x1], axis=1)


def _bin_edges(start: np.ndarray, stop: np.ndarray, bins: int):
    extent = (stop - start)[:, None]
    k = np.arange(bins + 1)[None, :]
    edges = start[:, None] + (k * extent) // bins
    lo, hi = edges[:, :-1], edges[:, 1:]
    hi = np.maximum(hi, lo + 1)  # empty bins cover one cell
    return lo, hi


def roi_max_pool_batch(feature: np.ndarray, boxes: np.ndarray, stride: int, pooled_h: int, pooled_w: int):
    """Max-pool every ROI in ``boxes`` from one ``(C, H, W)`` map.

    Returns ``(pooled (N, C, ph, pw), argmax (N, C, ph, pw))``; argmax holds the
    flat ``h * W + w`` index of the winning cell (ties go to the smallest index).
    """
    c, h, w = feature.shape
    cells = roi_cells(boxes, stride, h, w)
    n = cells.shape[0]
    if n == 0:
        return np.zeros((0, c, pooled_h, pooled_w)), np.zeros((0, c, pooled_h, pooled_w), dtype=np.int64)
    ylo, yhi = _bin_edges(cells[:, 0], cells[:, 1], pooled_h)
    xlo, xhi = _bin_edges(cells[:, 2], cells[:, 3], pooled_w)
    kh = int((yhi - ylo).max())
    kw = int((xhi - xlo).max())
    rows = ylo[:, :, None] + np.arange(kh)  # (N, ph, kh)
    cols = xlo[:, :, None] + np.arange(kw)  # (N, pw, kw)
    rvalid = rows < yhi[:, :, None]
    cvalid = cols < xhi[:, :, None]
    rows = np.minimum(rows, h - 1)
    cols = np.minimum(cols, w - 1)
    # (N, ph, pw, kh, kw) flat indices into H*W; padding slots point at a -inf sentinel
    flat = rows[:, :, None, :, None] * w + cols[:, None, :, None, :]
    valid = rvalid[:, :, None, :, None] & cvalid[:, None, :, None, :]
    flat = np.where(valid, flat, h * w).reshape(n * pooled_h * pooled_w, kh * kw)
    ext = np.concatenate([feature.reshape(c, h * w), np.full((c, 1), -np.inf)], axis=1)
    vals = ext[:, flat]  # (C, N*ph*pw, K)
    win = vals.argmax(axis=-1)  # first max = smallest flat index
    argmax = flat[np.arange(flat.shape[0])[None, :], win]  # (C, N*ph*pw)
    pooled = np.take_along_axis(ext, argmax, axis=1)
    pooled = pooled.reshape(c, n, pooled_h, pooled_w)
    argmax = argmax.reshape(c, n, pooled_h, pooled_w)
    return pooled.transpose(1, 0, 2, 3).copy(), argmax.transpose(1, 0, 2, 3).copy()


def roi_max_pool(feature: np.ndarray, roi, stride: int, pooled_h: int = 7, pooled_w: int = 7):
    """Single-ROI form of :func:`roi_max_pool_batch`."""
    box = roi.as_array() if isinstance(roi, RoiBox) else np.asarray(roi, dtype=np.float64)
    pooled, argmax = roi_max_pool_batch(feature, box[None], stride, pooled_h, pooled_w)
    return pooled[0], argmax[0]


def roi_max_pool_backward(grad: np.ndarray, argmax: np.ndarray, feature_shape) -> np.ndarray:
    """Route each pooled gradient to its argmax cell."""
    c, h, w = feature_shape
    if grad.shape != argmax.shape:
        raise ShapeError(f"grad shape {grad.shape} != argmax shape {argmax.shape}")
    chan = np.arange(c)[None, :, None, None]
    idx = (chan * (h * w) + argmax).reshape(-1)
    out = np.bincount(idx, weights=grad.reshape(-1), minlength=c * h * w)
    return out.reshape(c, h, w)


# ---------------------------------------------------------- normalization


def _norm_axes(x: np.ndarray, mode: str):
    # last three axes are (C, ph, pw)
    nd = x.ndim
    if mode == "all":
        return (nd - 3, nd - 2, nd - 1)
    if mode == "channel":
        return (nd - 3,)
    raise ValueError(f"unknown norm mode {mode!r}")


def l2_normalize(x: np.ndarray, mode: str = "all"):
    """Returns ``(normalized, norms)``.

    ``"all"`` divides each pooled blob by its L2 norm, ``"channel"`` divides each
    spatial location's channel vector by its own norm, ``"none"`` passes through.
    Norms below 1e-12 are clamped so dead ROIs stay at zero.
    """
    if mode == "none":
        return x, None
    norms = np.sqrt(np.sum(x * x, axis=_norm_axes(x, mode), keepdims=True))
    return x / np.maximum(norms, NORM_EPS), norms


def l2_normalize_backward(grad: np.ndarray, y: np.ndarray, norms, mode: str) -> np.ndarray:
    if mode == "none":
        return grad
    axes = _norm_axes(y, mode)
    denom = np.maximum(norms, NORM_EPS)
    live = norms > NORM_EPS
    proj = np.sum(grad * y, axis=axes, keepdims=True)
    return np.where(live, (grad - y * proj) / denom, grad / denom)


def rescale(x: np.ndarray, scale) -> np.ndarray:
    if isinstance(scale, np.ndarray):
        return x * scale[:, None, None]
    return x * scale


def rescale_backward(grad: np.ndarray, x: np.ndarray, scale):
    """Returns ``(grad_x, grad_scale or None)``."""
    if isinstance(scale, np.ndarray):
        gscale = np.sum(grad * x, axis=tuple(i for i in range(x.ndim) if i != x.ndim - 3))
        return grad * scale[:, None, None], gscale
    return grad * scale, None


def fuse_descriptors(descriptors: list, reduce: ConvParams) -> np.ndarray:
    """Concatenate ``(N, Ci, ph, pw)`` blobs in order and apply a 1x1 conv."""
    shapes = {d.shape[-2:] for d in descriptors}
    if len(shapes) != 1:
        raise ShapeError(f"sources disagree on pooled spatial dims: {sorted(shapes)}")
    cat = np.concatenate(descriptors, axis=-3)
    if cat.shape[-3] != reduce.in_channels:
        raise ShapeError(f"concat has {cat.shape[-3]} channels, reduce expects {reduce.in_channels}")
    return _reduce(cat, reduce)


def _reduce(cat, reduce: ConvParams):
    n, c, ph, pw = cat.shape
    w = reduce.weights.reshape(reduce.out_channels, c)
    out = np.matmul(w, cat.reshape(n, c, ph * pw)) + reduce.bias[:, None]
    return out.reshape(n, reduce.out_channels, ph, pw)


def _reduce_backward(grad, cat, reduce: ConvParams):
    n, c, ph, pw = cat.shape
    w = reduce.weights.reshape(reduce.out_channels, c)
    g = grad.reshape(n, reduce.out_channels, ph * pw)
    x = cat.reshape(n, c, ph * pw)
    gx = np.matmul(w.T, g).reshape(cat.shape)
    o = reduce.out_channels
    gw = (g.transpose(1, 0, 2).reshape(o, -1) @ x.transpose(1, 0, 2).reshape(c, -1).T).reshape(reduce.weights.shape)
    gb = g.sum(axis=(0, 2))
    return gx, gw, gb


def measure_mean_descriptor_norm(descriptors, mode: str = "all") -> float:
    """Mean L2 norm of pooled descriptors ``(N, C, ph, pw)`` under ``mode``."""
    d = np.asarray(descriptors, dtype=np.float64)
    if d.ndim != 4 or d.shape[0] == 0:
        raise ValueError("need at least one pooled descriptor of shape (N, C, ph, pw)")
    norms = np.sqrt(np.sum(d * d, axis=_norm_axes(d, mode)))
    return float(norms.mean())


# ------------------------------------------------------------ full chain


def skip_pool_forward(features: dict, boxes: np.ndarray, config: SkipPoolConfig, params: SkipPoolParams,
                      cache=None) -> np.ndarray:
    """Pool, normalize, scale, concat and reduce. Output ``(N, reduced, ph, pw)``."""
    scaled = []
    per_source = []
    for name, stride in config.sources:
        fmap = features[name]
        pooled, argmax = roi_max_pool_batch(fmap, boxes, stride, config.pooled_h, config.pooled_w)
        normed, norms = l2_normalize(pooled, config.norm_mode)
        out = rescale(normed, params.scales[name])
        scaled.append(out)
        per_source.append((name, fmap.shape, argmax, normed, norms))
    cat = np.concatenate(scaled, axis=1)
    out = _reduce(cat, params.reduce)
    if cache is not None:
        cache.update(per_source=per_source, cat=cat)
    return out


def skip_pool_backward(grad: np.ndarray, config: SkipPoolConfig, params: SkipPoolParams, cache):
    """Returns ``(grad per source feature map, param grads)``."""
    grads = {}
    gcat, grads["reduce.w"], grads["reduce.b"] = _reduce_backward(grad, cache["cat"], params.reduce)
    feat_grads = {}
    off = 0
    for name, shape, argmax, normed, norms in cache["per_source"]:
        c = shape[0]
        g = gcat[:, off : off + c]
        off += c
        g, gs = rescale_backward(g, normed, params.scales[name])
        if gs is not None:
            grads[f"scale.{name}"] = gs
        g = l2_normalize_backward(g, normed, norms, config.norm_mode)
        feat_grads[name] = roi_max_pool_backward(g, argmax, shape)
    return feat_grads, grads
