"""Per-ROI classification / box-regression head and its training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import (
    dropout_backward,
    dropout_forward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
    softmax_forward,
    xavier_init,
)

DELTA_CLAMP = 4.0


@dataclass
class Dense:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray

    @classmethod
    def xavier(cls, n_in: int, n_out: int, rng, scale: float = 1.0):
        return cls(xavier_init((n_out, n_in), rng) * scale, np.zeros(n_out))

    def forward(self, x):
        return x @ self.weights.T + self.bias

    def backward(self, x, grad):
        return grad @ self.weights, grad.T @ x, grad.sum(axis=0)


@dataclass
class HeadParams:
    fc6: Dense
    fc7: Dense
    cls_out: Dense
    bbox_out: Dense
    dropout_p: float = 0.0

    @property
    def num_classes(self) -> int:
        """Foreground classes K (the classifier has K + 1 outputs)."""
        return self.cls_out.weights.shape[0] - 1

    def arrays(self):
        out = {}
        for name in ("fc6", "fc7", "cls_out", "bbox_out"):
            layer = getattr(self, name)
            out[f"{name}.w"] = layer.weights
            out[f"{name}.b"] = layer.bias
        return out


def init_head(in_features: int, hidden: int, num_classes: int, rng, dropout_p: float = 0.0) -> HeadParams:
    # small output layers, as in the usual Fast R-CNN init (std 0.01 / 0.001)
    cls_out = Dense(rng.normal(0, 0.01, (num_classes + 1, hidden)), np.zeros(num_classes + 1))
    bbox_out = Dense(rng.normal(0, 0.001, (4 * num_classes, hidden)), np.zeros(4 * num_classes))
    return HeadParams(
        Dense.xavier(in_features, hidden, rng),
        Dense.xavier(hidden, hidden, rng),
        cls_out,
        bbox_out,
        dropout_p,
    )


def head_forward(descriptor: np.ndarray, params: HeadParams, training: bool = False, rng=None, cache=None):
    """Returns ``(class probabilities (N, K+1), deltas (N, 4K), logits)``."""
    x = descriptor.reshape(descriptor.shape[0], -1)
    if x.shape[1] != params.fc6.weights.shape[1]:
        raise ValueError(f"descriptor has {x.shape[1]} features, fc6 expects {params.fc6.weights.shape[1]}")
    a6 = params.fc6.forward(x)
    h6, m6 = dropout_forward(relu_forward(a6), params.dropout_p, training, rng)
    a7 = params.fc7.forward(h6)
    h7, m7 = dropout_forward(relu_forward(a7), params.dropout_p, training, rng)
    logits = params.cls_out.forward(h7)
    deltas = params.bbox_out.forward(h7)
    if cache is not None:
        cache.update(x=x, a6=a6, h6=h6, m6=m6, a7=a7, h7=h7, m7=m7, shape=descriptor.shape)
    return softmax_forward(logits), deltas, logits


def head_backward(grad_logits: np.ndarray, grad_deltas: np.ndarray, params: HeadParams, cache):
    """Returns ``(grad_descriptor, grads)``."""
    grads = {}
    h7 = cache["h7"]
    g7a, grads["cls_out.w"], grads["cls_out.b"] = params.cls_out.backward(h7, grad_logits)
    g7b, grads["bbox_out.w"], grads["bbox_out.b"] = params.bbox_out.backward(h7, grad_deltas)
    g = relu_backward(cache["a7"], dropout_backward(g7a + g7b, cache["m7"]))
    g, grads["fc7.w"], grads["fc7.b"] = params.fc7.backward(cache["h6"], g)
    g = relu_backward(cache["a6"], dropout_backward(g, cache["m6"]))
    g, grads["fc6.w"], grads["fc6.b"] = params.fc6.backward(cache["x"], g)
    return g.reshape(cache["shape"]), grads


# ---------------------------------------------------------- box deltas


def _centers(boxes):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_delta(proposal, target) -> np.ndarray:
    """``(dx, dy, dw, dh)``: center shift over proposal size, log size ratio."""
    p = np.asarray(proposal, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    px, py, pw, ph = _centers(p)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("degenerate proposal (non-positive width or height)")
    tx, ty, tw, th = _centers(t)
    return np.stack([(tx - px) / pw, (ty - py) / ph, np.log(tw / pw), np.log(th / ph)], axis=-1)


def decode_delta(proposal, delta, image_size=None) -> np.ndarray:
    """Inverse of :func:`encode_delta`; dw/dh clamped to +-4, optional clip to ``(height, width)``."""
    p = np.asarray(proposal, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    px, py, pw, ph = _centers(p)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise ValueError("degenerate proposal (non-positive width or height)")
    cx = px + d[..., 0] * pw
    cy = py + d[..., 1] * ph
    w = pw * np.exp(np.clip(d[..., 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ph * np.exp(np.clip(d[..., 3], -DELTA_CLAMP, DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        height, width = image_size
        out[..., 0::2] = np.clip(out[..., 0::2], 0, width)
        out[..., 1::2] = np.clip(out[..., 1::2], 0, height)
    return out


# ------------------------------------------------------------ training loss


def smooth_l1(x: np.ndarray):
    ax = np.abs(x)
    val = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    grad = np.where(ax < 1.0, x, np.sign(x))
    return val, grad


def multitask_loss(logits: np.ndarray, deltas: np.ndarray, labels: np.ndarray, targets: np.ndarray):
    """Softmax cross-entropy plus smooth-L1 on the labeled class's 4 deltas.

    ``labels`` are 0 for background and ``1..K`` for objects; ``targets`` is
    ``(N, 4)`` and is ignored on background rows. Both terms are averaged over
    the N ROIs. Returns ``(loss, cls_loss, reg_loss, grad_logits, grad_deltas)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    k1 = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k1):
        raise ValueError(f"ROI label outside [0, {k1})")
    cls_loss, g_logits, _ = softmax_cross_entropy(logits, labels)
    g_deltas = np.zeros_like(deltas)
    reg_loss = 0.0
    fg = np.flatnonzero(labels > 0)
    if fg.size:
        cols = 4 * (labels[fg] - 1)[:, None] + np.arange(4)
        diff = deltas[fg[:, None], cols] - targets[fg]
        val, grad = smooth_l1(diff)
        reg_loss = float(val.sum() / n)
        g_deltas[fg[:, None], cols] = grad / n
    return cls_loss + reg_loss, cls_loss, reg_loss, g_logits, g_deltas
