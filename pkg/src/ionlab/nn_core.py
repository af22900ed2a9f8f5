"""Dense numeric kernels with hand-written backward passes.

Feature maps are plain ``float64`` arrays shaped ``(channels, height, width)``.
Convolution weights are ``(out, in, kh, kw)``; dense weights are ``(out, in)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

FeatureMap = np.ndarray

CHECKPOINT_MAGIC = b"IONLAB-PARAMS"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def as_feature_map(values, channels: int, height: int, width: int) -> FeatureMap:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != channels * height * width:
        raise ShapeError(f"expected {channels}*{height}*{width} values, got {arr.size}")
    return arr.reshape(channels, height, width)


@dataclass
class ConvParams:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-d, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_channels {self.weights.shape[0]}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ValueError(f"invalid stride={self.stride} pad={self.pad}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    num_probes: int
    epsilon: float
    passed: bool = field(default=True)


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"input extent {size} with kernel {kernel}, stride {stride}, pad {pad} "
            "does not give a positive integer output size"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (C, Ho, Wo, kh, kw) -> (C*kh*kw, Ho*Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, ho: int, wo: int):
    c, h, w = shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    if pad:
        out = out[:, pad:-pad, pad:-pad]
    return out


def _check_input(x: np.ndarray, params: ConvParams):
    if x.ndim != 3:
        raise ShapeError(f"feature map must be (C, H, W), got shape {x.shape}")
    if x.shape[0] != params.in_channels:
        raise ShapeError(
            f"input has {x.shape[0]} channels but conv expects {params.in_channels} "
            f"(weights {params.weights.shape})"
        )


def conv2d_forward(x: FeatureMap, params: ConvParams) -> FeatureMap:
    """Zero-padded cross-correlation."""
    _check_input(x, params)
    cols, ho, wo = _im2col(x, params.kernel_h, params.kernel_w, params.stride, params.pad)
    out = params.weights.reshape(params.out_channels, -1) @ cols
    out += params.bias[:, None]
    return out.reshape(params.out_channels, ho, wo)


def conv2d_backward(x: FeatureMap, params: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    _check_input(x, params)
    kh, kw, s, p = params.kernel_h, params.kernel_w, params.stride, params.pad
    cols, ho, wo = _im2col(x, kh, kw, s, p)
    if grad_out.shape != (params.out_channels, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(params.out_channels, ho, wo)}")
    g = grad_out.reshape(params.out_channels, -1)
    w2 = params.weights.reshape(params.out_channels, -1)
    grad_w = (g @ cols.T).reshape(params.weights.shape)
    grad_b = g.sum(axis=1)
    grad_x = _col2im(w2.T @ g, x.shape, kh, kw, s, p, ho, wo)
    return grad_x, grad_w, grad_b


# ------------------------------------------------------------- deconvolution


def bilinear_kernel(size: int) -> np.ndarray:
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    filt = 1 - np.abs(og - center) / factor
    return np.outer(filt, filt)


def bilinear_deconv_params(channels: int, factor: int = 16) -> ConvParams:
    """Channel-diagonal transposed convolution initialized as bilinear upsampling."""
    k = 2 * factor
    w = np.zeros((channels, channels, k, k))
    kern = bilinear_kernel(k)
    for c in range(channels):
        w[c, c] = kern
    return ConvParams(w, np.zeros(channels), stride=factor)


def _deconv_geometry(x: np.ndarray, params: ConvParams, target):
    _, h, w = x.shape
    s = params.stride
    full_h = (h - 1) * s + params.kernel_h
    full_w = (w - 1) * s + params.kernel_w
    th, tw = target if target is not None else (h * s, w * s)
    if th <= 0 or tw <= 0 or th > full_h or tw > full_w:
        raise ShapeError(f"cannot crop deconvolution output {full_h}x{full_w} to {th}x{tw}")
    oy, ox = (full_h - th) // 2, (full_w - tw) // 2
    return full_h, full_w, th, tw, oy, ox


def deconv_upsample_forward(x: FeatureMap, params: ConvParams, target=None) -> FeatureMap:
    """Transposed convolution followed by a center crop to ``target`` (default stride * input)."""
    _check_input(x, params)
    c_in, h, w = x.shape
    full_h, full_w, th, tw, oy, ox = _deconv_geometry(x, params, target)
    o, kh, kw, s = params.out_channels, params.kernel_h, params.kernel_w, params.stride
    w2 = params.weights.transpose(1, 0, 2, 3).reshape(c_in, o * kh * kw)
    cols = (w2.T @ x.reshape(c_in, h * w)).reshape(o, kh, kw, h, w)
    full = np.zeros((o, full_h, full_w))
    for i in range(kh):
        for j in range(kw):
            full[:, i : i + s * h : s, j : j + s * w : s] += cols[:, i, j]
    out = full[:, oy : oy + th, ox : ox + tw] + params.bias[:, None, None]
    return out


def deconv_upsample_backward(x: FeatureMap, params: ConvParams, grad_out: np.ndarray, target=None):
    _check_input(x, params)
    c_in, h, w = x.shape
    full_h, full_w, th, tw, oy, ox = _deconv_geometry(x, params, target)
    o, kh, kw, s = params.out_channels, params.kernel_h, params.kernel_w, params.stride
    if grad_out.shape != (o, th, tw):
        raise ShapeError(f"grad_out shape {grad_out.shape} != output shape {(o, th, tw)}")
    gfull = np.zeros((o, full_h, full_w))
    gfull[:, oy : oy + th, ox : ox + tw] = grad_out
    gcols = np.empty((o, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            gcols[:, i, j] = gfull[:, i : i + s * h : s, j : j + s * w : s]
    gcols = gcols.reshape(o * kh * kw, h * w)
    xf = x.reshape(c_in, h * w)
    w2 = params.weights.transpose(1, 0, 2, 3).reshape(c_in, o * kh * kw)
    grad_x = (w2 @ gcols).reshape(x.shape)
    grad_w = (xf @ gcols.T).reshape(c_in, o, kh, kw).transpose(1, 0, 2, 3)
    grad_b = grad_out.sum(axis=(1, 2))
    return grad_x, np.ascontiguousarray(grad_w), grad_b


# ------------------------------------------------------- pointwise and losses


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return grad_out * (x > 0)


def softmax_forward(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input contains non-finite values")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_loss(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise ValueError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(probs[label]))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights=None):
    """Mean cross-entropy over rows of ``logits`` with integer ``labels``.

    Rows with ``weights == 0`` are ignored; the mean is over the total weight.
    Returns ``(loss, grad_logits, probs)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels outside [0, {k})")
    probs = softmax_forward(logits)
    n = logits.shape[0]
    wts = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = wts.sum()
    if total == 0:
        return 0.0, np.zeros_like(logits), probs
    # log-softmax directly, so a vanishing probability cannot produce log(0)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_picked = z[np.arange(n), labels] - np.log(np.exp(z).sum(axis=-1))
    loss = float(-(wts * log_picked).sum() / total)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= (wts / total)[:, None]
    return loss, grad, probs


def dropout_forward(x: np.ndarray, p: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not training or p <= 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def global_average_pool_unpool(x: FeatureMap) -> FeatureMap:
    mean = x.mean(axis=(1, 2), keepdims=True)
    return np.broadcast_to(mean, x.shape).copy()


def global_average_pool_unpool_backward(x: FeatureMap, grad_out: np.ndarray) -> np.ndarray:
    h, w = x.shape[1:]
    g = grad_out.sum(axis=(1, 2), keepdims=True) / (h * w)
    return np.broadcast_to(g, x.shape).copy()


# ---------------------------------------------------------------- initializers


def fans(shape) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) < 2:
        raise ValueError(f"cannot derive fan_in/fan_out from shape {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = fans(shape)
    if fan_in == 0 or fan_out == 0:
        raise ValueError(f"zero fan for shape {tuple(shape)}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def xavier_conv(out_c: int, in_c: int, k: int, rng, stride: int = 1, pad: int | None = None) -> ConvParams:
    if pad is None:
        pad = k // 2
    return ConvParams(xavier_init((out_c, in_c, k, k), rng), np.zeros(out_c), stride=stride, pad=pad)


# --------------------------------------------------------- gradient checking


def finite_diff_grad(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    epsilon: float = 1e-5,
    rng: np.random.Generator | None = None,
    max_full: int = 10_000,
    num_probes: int = 200,
):
    """Central-difference gradient of a scalar function.

    Sweeps every coordinate when ``x.size <= max_full``; otherwise probes a random
    subset of ``num_probes`` coordinates and leaves the rest as NaN. ``x`` is
    perturbed in place and restored.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grad = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    if flat.size <= max_full:
        idx = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=min(num_probes, flat.size), replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = fn(x)
        flat[i] = orig - epsilon
        fm = fn(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while probing coordinate {i}")
        gflat[i] = (fp - fm) / (2 * epsilon)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max of ``|a - n| / max(|a| + |n|, floor)`` over probed (non-NaN) coordinates."""
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


# ----------------------------------------------------------- checkpointing


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``name -> float64 array`` to a versioned, byte-deterministic file.

    Layout: ``IONLAB-PARAMS <version>\\n``, one JSON header line
    ``{"meta": ..., "arrays": [{"name", "shape"}...]}``, then each array's
    little-endian float64 bytes in header order. Names are sorted.
    """
    names = sorted(params)
    header = {
        "meta": meta or {},
        "arrays": [{"name": k, "shape": list(np.shape(params[k]))} for k in names],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b" " + str(CHECKPOINT_VERSION).encode() + b"\n")
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for k in names:
            f.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    first, rest = data.split(b"\n", 1)
    magic, _, version = first.partition(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    if int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported format version {int(version)}")
    head, body = rest.split(b"\n", 1)
    header = json.loads(head)
    out = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).astype(np.float64)
        out[entry["name"]] = arr.reshape(shape)
        offset += 8 * n
    if offset != len(body):
        raise ValueError(f"{path}: trailing or missing bytes")
    return out, header["meta"]
