"""Context operators on top of the last conv layer.

The main one is the stacked four-directional IRNN: a shared 1x1 input-to-hidden
conv seeds the hidden state, four ReLU recurrences sweep right/left/down/up,
their states are concatenated and mixed by a 1x1 conv. The alternatives
(stacked 3x3 / 5x5 convs, global average pooling) exist for ablations and
receptive-field probes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import (
    ConvParams,
    FeatureMap,
    conv2d_backward,
    conv2d_forward,
    deconv_upsample_backward,
    deconv_upsample_forward,
    dropout_backward,
    dropout_forward,
    global_average_pool_unpool,
    global_average_pool_unpool_backward,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
    bilinear_kernel,
    xavier_init,
)

# Concat order of direction channel groups.
DIRECTIONS = ("right", "left", "down", "up")


@dataclass
class IrnnDirectionParams:
    hidden_units: int
    whh: np.ndarray | None = None  # None: recurrence fixed to the identity
    b0: np.ndarray | None = None  # optional first-step bias

    def __post_init__(self):
        if self.hidden_units <= 0:
            raise ValueError("hidden_units must be positive")
        for name in ("whh", "b0"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))

    @classmethod
    def identity(cls, hidden_units: int, learned: bool = True, first_step_bias: bool = False):
        return cls(
            hidden_units,
            np.eye(hidden_units) if learned else None,
            np.zeros(hidden_units) if first_step_bias else None,
        )


@dataclass
class IrnnLayerParams:
    # a single ConvParams is shared by all directions; a dict gives one per direction
    input_to_hidden: ConvParams | dict
    directions: dict
    post_concat_reduce: ConvParams

    def order(self) -> list[str]:
        return [d for d in DIRECTIONS if d in self.directions]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        if isinstance(self.input_to_hidden, ConvParams):
            out["in2h.w"] = self.input_to_hidden.weights
            out["in2h.b"] = self.input_to_hidden.bias
        else:
            for d, p in self.input_to_hidden.items():
                out[f"in2h_{d}.w"] = p.weights
                out[f"in2h_{d}.b"] = p.bias
        for d in self.order():
            dp = self.directions[d]
            if dp.whh is not None:
                out[f"{d}.whh"] = dp.whh
            if dp.b0 is not None:
                out[f"{d}.b0"] = dp.b0
        out["reduce.w"] = self.post_concat_reduce.weights
        out["reduce.b"] = self.post_concat_reduce.bias
        return out


@dataclass
class IrnnBlockParams:
    layers: list
    dropout_p: float = 0.0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers, start=1):
            out.update({f"l{i}.{k}": v for k, v in layer.arrays().items()})
        return out


def init_irnn_block(
    in_channels: int,
    hidden_units: int = 512,
    out_channels: int | None = None,
    rng: np.random.Generator | None = None,
    num_layers: int = 2,
    learned_whh: bool = True,
    first_step_bias: bool = False,
    dropout_p: float = 0.25,
    layer_directions=None,
) -> IrnnBlockParams:
    """Identity-initialized recurrences, Xavier 1x1 transitions."""
    rng = rng or np.random.default_rng(0)
    out_channels = out_channels or in_channels
    layer_directions = layer_directions or [DIRECTIONS] * num_layers
    layers = []
    c_in = in_channels
    for dirs in layer_directions:
        in2h = ConvParams(xavier_init((hidden_units, c_in, 1, 1), rng), np.zeros(hidden_units))
        directions = {
            d: IrnnDirectionParams.identity(hidden_units, learned_whh, first_step_bias) for d in dirs
        }
        n_cat = hidden_units * len(dirs)
        reduce = ConvParams(xavier_init((out_channels, n_cat, 1, 1), rng), np.zeros(out_channels))
        layers.append(IrnnLayerParams(in2h, directions, reduce))
        c_in = out_channels
    return IrnnBlockParams(layers, dropout_p)


def init_two_direction_block(in_channels: int, hidden_units: int, out_channels=None, rng=None, **kw):
    """Left-right sweep layer followed by an up-down sweep layer."""
    return init_irnn_block(
        in_channels, hidden_units, out_channels, rng,
        layer_directions=[("right", "left"), ("down", "up")], **kw,
    )


# ------------------------------------------------------------------ sweeps


def _to_steps(x: np.ndarray, direction: str) -> np.ndarray:
    """View ``(C, H, W)`` as ``(T, C, R)``: T steps in sweep order, R parallel lanes."""
    if direction == "right":
        return x.transpose(2, 0, 1)
    if direction == "left":
        return x.transpose(2, 0, 1)[::-1]
    if direction == "down":
        return x.transpose(1, 0, 2)
    if direction == "up":
        return x.transpose(1, 0, 2)[::-1]
    raise ValueError(f"unknown direction {direction!r}")


def _from_steps(seq: np.ndarray, direction: str) -> np.ndarray:
    if direction == "right":
        return seq.transpose(1, 2, 0)
    if direction == "left":
        return seq[::-1].transpose(1, 2, 0)
    if direction == "down":
        return seq.transpose(1, 0, 2)
    if direction == "up":
        return seq[::-1].transpose(1, 0, 2)
    raise ValueError(f"unknown direction {direction!r}")


def _recurrent_product(whh: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``whh @ h`` accumulated in a fixed column order.

    Every output entry sees the same sequence of float operations regardless of
    how many lanes ``h`` holds, so batched and per-cell sweeps agree bitwise.
    """
    acc = np.zeros((whh.shape[0], h.shape[1]))
    for k in range(whh.shape[1]):
        acc += whh[:, k : k + 1] * h[k : k + 1]
    return acc


def _initial_state(params: IrnnDirectionParams, lanes: int) -> np.ndarray:
    if params.b0 is None:
        return np.zeros((params.hidden_units, lanes))
    return np.repeat(params.b0[:, None], lanes, axis=1)


def _sweep(seq: np.ndarray, params: IrnnDirectionParams):
    t_len, c, lanes = seq.shape
    if c != params.hidden_units:
        raise ValueError(f"seeded hidden has {c} channels, direction expects {params.hidden_units}")
    pre = np.empty_like(seq)
    hid = np.empty_like(seq)
    h = _initial_state(params, lanes)
    for t in range(t_len):
        if params.whh is None:
            pre[t] = seq[t] + h
        else:
            pre[t] = seq[t] + _recurrent_product(params.whh, h)
        h = relu_forward(pre[t])
        hid[t] = h
    return hid, pre


def irnn_direction_forward(seeded: FeatureMap, direction: str, params: IrnnDirectionParams, cache=None):
    """One ReLU recurrence over all rows (or columns) at once.

    ``seeded`` already holds the input-to-hidden projection; each step computes
    ``h_t = max(W_hh h_{t-1} + seeded_t, 0)``.
    """
    seq = _to_steps(np.asarray(seeded, dtype=np.float64), direction)
    hid, pre = _sweep(seq, params)
    if cache is not None:
        cache.update(hid=hid, pre=pre, direction=direction, params=params)
    return np.ascontiguousarray(_from_steps(hid, direction))


def irnn_accumulator_forward(seeded: FeatureMap, direction: str) -> FeatureMap:
    """Identity-fixed recurrence: accumulate then ReLU, step by step."""
    c = seeded.shape[0]
    return irnn_direction_forward(seeded, direction, IrnnDirectionParams(c, None, None))


def irnn_direction_reference(seeded: FeatureMap, direction: str, params: IrnnDirectionParams) -> FeatureMap:
    """Cell-at-a-time sweep, one lane at a time. Test oracle for the batched path."""
    seq = _to_steps(np.asarray(seeded, dtype=np.float64), direction)
    t_len, c, lanes = seq.shape
    out = np.empty_like(seq)
    for r in range(lanes):
        h = _initial_state(params, 1)
        for t in range(t_len):
            x = seq[t][:, r : r + 1]
            if params.whh is None:
                pre = x + h
            else:
                pre = x + _recurrent_product(params.whh, h)
            h = relu_forward(pre)
            out[t][:, r] = h[:, 0]
    return np.ascontiguousarray(_from_steps(out, direction))


def irnn_direction_backward(grad_out: np.ndarray, cache):
    """Returns ``(grad_seeded, grad_whh or None, grad_b0 or None)``."""
    direction, params = cache["direction"], cache["params"]
    hid, pre = cache["hid"], cache["pre"]
    g = _to_steps(grad_out, direction)
    t_len, c, lanes = g.shape
    gseq = np.empty_like(g)
    gw = np.zeros((c, c)) if params.whh is not None else None
    carry = np.zeros((c, lanes))
    for t in range(t_len - 1, -1, -1):
        dpre = relu_backward(pre[t], g[t] + carry)
        gseq[t] = dpre
        h_prev = hid[t - 1] if t > 0 else _initial_state(params, lanes)
        if params.whh is None:
            carry = dpre
        else:
            gw += dpre @ h_prev.T
            carry = params.whh.T @ dpre
    gb0 = carry.sum(axis=1) if params.b0 is not None else None
    return np.ascontiguousarray(_from_steps(gseq, direction)), gw, gb0


# ------------------------------------------------------------------- block


def _layer_forward(x, layer: IrnnLayerParams, dropout_p, training, rng):
    cache = {"x": x, "dirs": {}, "seeded": {}}
    parts = []
    shared = isinstance(layer.input_to_hidden, ConvParams)
    if shared:
        seeded = conv2d_forward(x, layer.input_to_hidden)
    for d in layer.order():
        s = seeded if shared else conv2d_forward(x, layer.input_to_hidden[d])
        cache["seeded"][d] = s
        dc = {}
        parts.append(irnn_direction_forward(s, d, layer.directions[d], cache=dc))
        cache["dirs"][d] = dc
    cat = np.concatenate(parts, axis=0)
    dropped, mask = dropout_forward(cat, dropout_p, training, rng)
    cache["cat"], cache["dropped"], cache["mask"] = cat, dropped, mask
    out = conv2d_forward(dropped, layer.post_concat_reduce)
    return out, cache


def _layer_backward(grad_out, layer: IrnnLayerParams, cache):
    grads = {}
    g_drop, grads["reduce.w"], grads["reduce.b"] = conv2d_backward(
        cache["dropped"], layer.post_concat_reduce, grad_out
    )
    g_cat = dropout_backward(g_drop, cache["mask"])
    shared = isinstance(layer.input_to_hidden, ConvParams)
    x = cache["x"]
    g_seed_total = np.zeros_like(cache["seeded"][layer.order()[0]]) if shared else None
    g_x = np.zeros_like(x)
    off = 0
    for d in layer.order():
        hu = layer.directions[d].hidden_units
        g_seed, gw, gb0 = irnn_direction_backward(g_cat[off : off + hu], cache["dirs"][d])
        off += hu
        if gw is not None:
            grads[f"{d}.whh"] = gw
        if gb0 is not None:
            grads[f"{d}.b0"] = gb0
        if shared:
            g_seed_total += g_seed
        else:
            gx, grads[f"in2h_{d}.w"], grads[f"in2h_{d}.b"] = conv2d_backward(
                x, layer.input_to_hidden[d], g_seed
            )
            g_x += gx
    if shared:
        g_x, grads["in2h.w"], grads["in2h.b"] = conv2d_backward(x, layer.input_to_hidden, g_seed_total)
    return g_x, grads


def irnn_block_forward(x: FeatureMap, params: IrnnBlockParams, training: bool = False, rng=None, cache=None):
    """Stacked IRNN layers; output keeps the input's spatial size.

    If ``cache`` is a list it receives one entry per layer (also exposing each
    layer's output under ``"out"``).
    """
    h = np.asarray(x, dtype=np.float64)
    for layer in params.layers:
        h, lc = _layer_forward(h, layer, params.dropout_p, training, rng)
        lc["out"] = h
        if cache is not None:
            cache.append(lc)
    return h


def irnn_block_backward(grad_out: np.ndarray, params: IrnnBlockParams, cache, extra_grads=None):
    """Backward through the stack.

    ``extra_grads`` maps a 0-based layer index to an additional gradient on that
    layer's output (used when an intermediate layer is also a pooling source).
    Returns ``(grad_input, grads)`` with keys matching ``params.arrays()``.
    """
    extra_grads = extra_grads or {}
    grads = {}
    g = grad_out
    for i in range(len(params.layers) - 1, -1, -1):
        if i in extra_grads:
            g = g + extra_grads[i]
        g, lg = _layer_backward(g, params.layers[i], cache[i])
        grads.update({f"l{i + 1}.{k}": v for k, v in lg.items()})
    return g, grads


def variant_two_direction_block(x: FeatureMap, params: IrnnBlockParams, training=False, rng=None, cache=None):
    """Left-right then up-down; ``params`` from :func:`init_two_direction_block`."""
    return irnn_block_forward(x, params, training, rng, cache)


# ------------------------------------------------------- conv / gap context


@dataclass
class ConvStackParams:
    convs: list

    def arrays(self):
        out = {}
        for i, c in enumerate(self.convs, start=1):
            out[f"c{i}.w"] = c.weights
            out[f"c{i}.b"] = c.bias
        return out


def init_conv_stack(channels: int, kernel: int, rng, depth: int = 2, out_channels=None) -> ConvStackParams:
    out_channels = out_channels or channels
    convs = []
    c = channels
    for _ in range(depth):
        convs.append(ConvParams(xavier_init((out_channels, c, kernel, kernel), rng), np.zeros(out_channels),
                                pad=kernel // 2))
        c = out_channels
    return ConvStackParams(convs)


def conv_stack_forward(x, params: ConvStackParams, cache=None):
    h = x
    for conv in params.convs:
        pre = conv2d_forward(h, conv)
        if cache is not None:
            cache.append((h, pre))
        h = relu_forward(pre)
    return h


def conv_stack_backward(grad_out, params: ConvStackParams, cache):
    grads = {}
    g = grad_out
    for i in range(len(params.convs) - 1, -1, -1):
        h, pre = cache[i]
        g = relu_backward(pre, g)
        g, grads[f"c{i + 1}.w"], grads[f"c{i + 1}.b"] = conv2d_backward(h, params.convs[i], g)
    return g, grads


def gap_context_forward(x, params=None, cache=None):
    return global_average_pool_unpool(x)


def gap_context_backward(grad_out, x):
    return global_average_pool_unpool_backward(x, grad_out)


# ------------------------------------------------------- segmentation head


@dataclass
class SegHeadParams:
    score: ConvParams  # 1x1 context -> per-class scores
    deconv: ConvParams  # transposed conv, bilinear init
    num_classes: int
    loss_weight: float = 1.0

    def arrays(self):
        return {
            "score.w": self.score.weights,
            "score.b": self.score.bias,
            "deconv.w": self.deconv.weights,
            "deconv.b": self.deconv.bias,
        }


def init_seg_head(in_channels: int, num_classes: int, rng, factor: int = 16, loss_weight: float = 1.0):
    score = ConvParams(xavier_init((num_classes, in_channels, 1, 1), rng), np.zeros(num_classes))
    k = 2 * factor
    w = np.zeros((num_classes, num_classes, k, k))
    kern = bilinear_kernel(k)
    for c in range(num_classes):
        w[c, c] = kern
    deconv = ConvParams(w, np.zeros(num_classes), stride=factor)
    return SegHeadParams(score, deconv, num_classes, loss_weight)


def seg_head_forward(context: FeatureMap, params: SegHeadParams, labels=None, ignore_label: int = 255,
                     cache=None):
    """Per-pixel class scores at ``stride`` x the context resolution.

    With ``labels`` given, also returns ``loss_weight`` x mean cross-entropy over
    non-ignored pixels; otherwise the loss is None.
    """
    s = params.deconv.stride
    target = (context.shape[1] * s, context.shape[2] * s)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != target:
            raise ValueError(f"label map shape {labels.shape} != upsampled shape {target}")
    coarse = conv2d_forward(context, params.score)
    scores = deconv_upsample_forward(coarse, params.deconv, target)
    loss = None
    if labels is not None:
        k = params.num_classes
        flat_lab = labels.reshape(-1)
        valid = flat_lab != ignore_label
        if np.any(flat_lab[valid] >= k) or np.any(flat_lab[valid] < 0):
            raise ValueError("segmentation label class out of range")
        logits = scores.reshape(k, -1).T
        safe = np.where(valid, flat_lab, 0)
        if params.loss_weight == 0 or not valid.any():
            loss, g = 0.0, np.zeros_like(logits)
        else:
            loss, g, _ = softmax_cross_entropy(logits, safe, valid.astype(np.float64))
            loss *= params.loss_weight
            g *= params.loss_weight
        if cache is not None:
            cache.update(context=context, coarse=coarse, target=target, grad_scores=g.T.reshape(scores.shape))
    return scores, loss


def seg_head_backward(params: SegHeadParams, cache):
    """Backward of the seg loss. Returns ``(grad_context, grads)``."""
    grads = {}
    g_coarse, grads["deconv.w"], grads["deconv.b"] = deconv_upsample_backward(
        cache["coarse"], params.deconv, cache["grad_scores"], cache["target"]
    )
    g_ctx, grads["score.w"], grads["score.b"] = conv2d_backward(cache["context"], params.score, g_coarse)
    return g_ctx, grads
