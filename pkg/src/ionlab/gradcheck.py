"""Finite-difference verification of every hand-written backward pass.

Each registered op builds a small random instance: the op's output is projected
onto fixed random weights to get a scalar, the analytic gradients come from the
op's backward pass, and every input/parameter tensor is compared against
central differences. Instances whose ReLU pre-activations (or max-pool
runner-ups) sit within ``KINK_MARGIN`` of a kink are redrawn, since the
function is not differentiable there.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import context as ctx
from .detect_head import Dense, HeadParams, head_backward, head_forward, multitask_loss
from .nn_core import (
    ConvParams,
    GradCheckReport,
    conv2d_backward,
    conv2d_forward,
    deconv_upsample_backward,
    deconv_upsample_forward,
    finite_diff_grad,
    global_average_pool_unpool,
    global_average_pool_unpool_backward,
    relative_error,
    relu_backward,
    relu_forward,
    softmax_cross_entropy,
)
from .skip_pool import (
    SkipPoolConfig,
    SkipPoolParams,
    l2_normalize,
    l2_normalize_backward,
    rescale,
    rescale_backward,
    roi_max_pool_batch,
    roi_max_pool_backward,
    skip_pool_backward,
    skip_pool_forward,
)

TOLERANCE = 1e-5
EPSILON = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class GradCase:
    loss: Callable[[], float]  # reads ``arrays`` in place
    arrays: dict  # name -> array to probe
    analytic: dict  # name -> analytic gradient
    margin: float = np.inf  # distance of the instance from the nearest kink


def _proj(rng, shape):
    return rng.normal(size=shape)


def _conv(rng, o, i, k, stride=1, pad=0):
    return ConvParams(rng.normal(0, 0.5, (o, i, k, k)), rng.normal(0, 0.5, o), stride, pad)


# ---------------------------------------------------------------- cases


def case_conv2d(rng):
    x = rng.normal(size=(2, 7, 7))
    p = _conv(rng, 3, 2, 3, stride=2, pad=1)
    r = _proj(rng, (3, 4, 4))
    gx, gw, gb = conv2d_backward(x, p, r)
    return GradCase(lambda: float(np.sum(conv2d_forward(x, p) * r)),
                    {"x": x, "w": p.weights, "b": p.bias}, {"x": gx, "w": gw, "b": gb})


def case_deconv(rng):
    x = rng.normal(size=(2, 3, 3))
    p = _conv(rng, 2, 2, 4, stride=2)
    r = _proj(rng, (2, 6, 6))
    gx, gw, gb = deconv_upsample_backward(x, p, r)
    return GradCase(lambda: float(np.sum(deconv_upsample_forward(x, p) * r)),
                    {"x": x, "w": p.weights, "b": p.bias}, {"x": gx, "w": gw, "b": gb})


def case_relu(rng):
    x = rng.normal(size=(3, 4, 4))
    r = _proj(rng, x.shape)
    return GradCase(lambda: float(np.sum(relu_forward(x) * r)), {"x": x}, {"x": relu_backward(x, r)},
                    float(np.abs(x).min()))


def case_softmax_ce(rng):
    logits = rng.normal(size=(5, 4)) * 2
    labels = rng.integers(0, 4, size=5)
    _, g, _ = softmax_cross_entropy(logits, labels)
    return GradCase(lambda: softmax_cross_entropy(logits, labels)[0], {"logits": logits}, {"logits": g})


def case_irnn_recurrence(rng):
    h = 3
    direction = ctx.DIRECTIONS[int(rng.integers(4))]
    params = ctx.IrnnDirectionParams(h, np.eye(h) + rng.normal(0, 0.3, (h, h)), rng.normal(0, 0.5, h))
    seeded = rng.normal(size=(h, 4, 5))
    r = _proj(rng, seeded.shape)
    cache = {}
    ctx.irnn_direction_forward(seeded, direction, params, cache)
    gs, gw, gb0 = ctx.irnn_direction_backward(r, cache)
    return GradCase(lambda: float(np.sum(ctx.irnn_direction_forward(seeded, direction, params) * r)),
                    {"seeded": seeded, "whh": params.whh, "b0": params.b0}, {"seeded": gs, "whh": gw, "b0": gb0},
                    float(np.abs(cache["pre"]).min()))


def case_irnn_accumulator(rng):
    h = 3
    direction = ctx.DIRECTIONS[int(rng.integers(4))]
    params = ctx.IrnnDirectionParams(h, None, None)
    seeded = rng.normal(size=(h, 5, 4))
    r = _proj(rng, seeded.shape)
    cache = {}
    ctx.irnn_direction_forward(seeded, direction, params, cache)
    gs, _, _ = ctx.irnn_direction_backward(r, cache)
    return GradCase(lambda: float(np.sum(ctx.irnn_accumulator_forward(seeded, direction) * r)),
                    {"seeded": seeded}, {"seeded": gs}, float(np.abs(cache["pre"]).min()))


def _block_margin(cache):
    pres = []
    for layer in cache:
        for dc in layer["dirs"].values():
            pres.append(np.abs(dc["pre"]).min())
    return float(min(pres))


def case_irnn_block(rng):
    block = ctx.init_irnn_block(3, 2, 3, rng, num_layers=2, learned_whh=True, first_step_bias=True, dropout_p=0.0)
    arrays = block.arrays()
    for v in arrays.values():
        v += rng.normal(0, 0.3, v.shape)
    x = rng.normal(size=(3, 3, 4))
    r = _proj(rng, x.shape)
    cache = []
    ctx.irnn_block_forward(x, block, cache=cache)
    gx, grads = ctx.irnn_block_backward(r, block, cache)
    return GradCase(lambda: float(np.sum(ctx.irnn_block_forward(x, block) * r)),
                    {"x": x, **arrays}, {"x": gx, **grads}, _block_margin(cache))


def _norm_scale_case(rng, mode):
    x = rng.normal(size=(2, 3, 2, 2))
    scale = rng.uniform(0.5, 2.0, size=3)
    r = _proj(rng, x.shape)

    def fwd():
        y, _ = l2_normalize(x, mode)
        return rescale(y, scale)

    y, norms = l2_normalize(x, mode)
    gy, gs = rescale_backward(r, y, scale)
    gx = l2_normalize_backward(gy, y, norms, mode)
    return GradCase(lambda: float(np.sum(fwd() * r)), {"x": x, "scale": scale}, {"x": gx, "scale": gs})


def case_l2norm_scale_all(rng):
    return _norm_scale_case(rng, "all")


def case_l2norm_scale_channel(rng):
    return _norm_scale_case(rng, "channel")


def _distinct_feature(rng, shape):
    # values spaced 0.01 apart: every pooling bin has a unique, well-separated max
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - 0.005 * n).reshape(shape).astype(np.float64)


def case_roi_max_pool(rng):
    feat = _distinct_feature(rng, (2, 8, 8))
    boxes = np.array([[0.0, 0.0, 20.0, 28.0], [6.0, 10.0, 30.0, 31.0], [12.0, 3.0, 15.0, 9.0]])
    pooled, argmax = roi_max_pool_batch(feat, boxes, 4, 3, 3)
    r = _proj(rng, pooled.shape)
    g = roi_max_pool_backward(r, argmax, feat.shape)
    return GradCase(lambda: float(np.sum(roi_max_pool_batch(feat, boxes, 4, 3, 3)[0] * r)), {"feature": feat},
                    {"feature": g}, 0.005)


def case_skip_pool(rng):
    cfg = SkipPoolConfig(sources=[("a", 2), ("b", 4)], pooled_h=2, pooled_w=2, norm_mode="all",
                         scale_mode="learned", scale_init=3.0, reduced_channels=3)
    feats = {"a": _distinct_feature(rng, (2, 8, 8)), "b": _distinct_feature(rng, (3, 4, 4))}
    params = SkipPoolParams({"a": rng.uniform(1, 3, 2), "b": rng.uniform(1, 3, 3)},
                            _conv(rng, 3, 5, 1))
    boxes = np.array([[0.0, 0.0, 14.0, 15.0], [3.0, 5.0, 12.0, 9.0]])
    r = _proj(rng, (2, 3, 2, 2))
    cache = {}
    skip_pool_forward(feats, boxes, cfg, params, cache)
    fg, pg = skip_pool_backward(r, cfg, params, cache)
    arrays = {"feat.a": feats["a"], "feat.b": feats["b"], "scale.a": params.scales["a"],
              "scale.b": params.scales["b"], "reduce.w": params.reduce.weights, "reduce.b": params.reduce.bias}
    analytic = {"feat.a": fg["a"], "feat.b": fg["b"], **pg}
    return GradCase(lambda: float(np.sum(skip_pool_forward(feats, boxes, cfg, params) * r)), arrays, analytic,
                    0.005)


def case_global_avg(rng):
    x = rng.normal(size=(2, 3, 4))
    r = _proj(rng, x.shape)
    return GradCase(lambda: float(np.sum(global_average_pool_unpool(x) * r)), {"x": x},
                    {"x": global_average_pool_unpool_backward(x, r)})


def case_conv_stack(rng):
    stack = ctx.init_conv_stack(2, 3, rng)
    for c in stack.convs:
        c.bias[...] = rng.normal(0, 0.3, c.bias.shape)
    x = rng.normal(size=(2, 5, 5))
    r = _proj(rng, x.shape)
    cache = []
    ctx.conv_stack_forward(x, stack, cache=cache)
    gx, grads = ctx.conv_stack_backward(r, stack, cache)
    arrays = {}
    for i, c in enumerate(stack.convs, start=1):
        arrays[f"c{i}.w"], arrays[f"c{i}.b"] = c.weights, c.bias
    margin = min(float(np.abs(pre).min()) for _, pre in cache)
    return GradCase(lambda: float(np.sum(ctx.conv_stack_forward(x, stack) * r)), {"x": x, **arrays},
                    {"x": gx, **grads}, margin)


def case_fc_head(rng):
    d, hidden, k = 6, 5, 2
    params = HeadParams(*(Dense(rng.normal(0, 0.5, (o, i)), rng.normal(0, 0.5, o))
                          for o, i in ((hidden, d), (hidden, hidden), (k + 1, hidden), (4 * k, hidden))))
    x = rng.normal(size=(3, d))
    rl, rd = _proj(rng, (3, k + 1)), _proj(rng, (3, 4 * k))
    cache = {}
    head_forward(x, params, cache=cache)
    gx, grads = head_backward(rl, rd, params, cache)

    def loss():
        _, deltas, logits = head_forward(x, params)
        return float(np.sum(logits * rl) + np.sum(deltas * rd))

    arrays = {"x": x, **params.arrays()}
    margin = float(min(np.abs(cache["a6"]).min(), np.abs(cache["a7"]).min()))
    return GradCase(loss, arrays, {"x": gx, **grads}, margin)


def case_multitask_loss(rng):
    n, k = 6, 3
    logits = rng.normal(size=(n, k + 1))
    deltas = rng.normal(size=(n, 4 * k)) * 1.5
    labels = rng.integers(0, k + 1, size=n)
    labels[0], labels[1] = 0, 1
    targets = rng.normal(size=(n, 4))
    _, _, _, gl, gd = multitask_loss(logits, deltas, labels, targets)
    return GradCase(lambda: multitask_loss(logits, deltas, labels, targets)[0],
                    {"logits": logits, "deltas": deltas}, {"logits": gl, "deltas": gd})


def case_seg_head(rng):
    params = ctx.init_seg_head(3, 3, rng, factor=2)
    params.score.bias[...] = rng.normal(0, 0.3, 3)
    params.deconv.weights[...] += rng.normal(0, 0.1, params.deconv.weights.shape)
    x = rng.normal(size=(3, 3, 3))
    labels = rng.integers(0, 3, size=(6, 6))
    labels[0, :3] = 255
    cache = {}
    ctx.seg_head_forward(x, params, labels, cache=cache)
    gx, grads = ctx.seg_head_backward(params, cache)
    return GradCase(lambda: ctx.seg_head_forward(x, params, labels)[1],
                    {"x": x, **params.arrays()}, {"x": gx, **grads})


REGISTRY: dict[str, Callable] = {
    "conv2d": case_conv2d,
    "deconv_upsample": case_deconv,
    "relu": case_relu,
    "softmax_cross_entropy": case_softmax_ce,
    "irnn_recurrence": case_irnn_recurrence,
    "irnn_accumulator": case_irnn_accumulator,
    "irnn_block": case_irnn_block,
    "l2norm_scale_all": case_l2norm_scale_all,
    "l2norm_scale_channel": case_l2norm_scale_channel,
    "roi_max_pool": case_roi_max_pool,
    "skip_pool": case_skip_pool,
    "global_average_pool": case_global_avg,
    "conv_stack": case_conv_stack,
    "fc_head": case_fc_head,
    "multitask_loss": case_multitask_loss,
    "seg_head": case_seg_head,
}


def check_case(case: GradCase, epsilon: float = EPSILON, rng=None) -> tuple[float, int]:
    """Max relative error over all tensors of one instance, and the number of probed coordinates."""
    worst, probes = 0.0, 0
    for name, arr in case.arrays.items():
        numeric = finite_diff_grad(lambda _: case.loss(), arr, epsilon, rng)
        worst = max(worst, relative_error(case.analytic[name], numeric))
        probes += int(np.count_nonzero(~np.isnan(numeric)))
    return worst, probes


def check_op(name: str, builder: Callable, instances: int = 5, seed: int = 0, epsilon: float = EPSILON,
             tolerance: float = TOLERANCE, max_redraws: int = 100) -> GradCheckReport:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, probes, done, redraws = 0.0, 0, 0, 0
    while done < instances:
        case = builder(rng)
        if case.margin < KINK_MARGIN:
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(f"{name}: could not draw an instance away from kinks")
            continue
        err, n = check_case(case, epsilon, rng)
        worst, probes, done = max(worst, err), probes + n, done + 1
    return GradCheckReport(name, worst, probes, epsilon, worst <= tolerance)


def run_gradcheck(names=None, instances: int = 5, seed: int = 0, epsilon: float = EPSILON,
                  tolerance: float = TOLERANCE, registry=None) -> list:
    registry = REGISTRY if registry is None else registry
    names = list(registry) if names is None else list(names)
    unknown = [n for n in names if n not in registry]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; registered: {sorted(registry)}")
    reports = []
    for n in names:
        t0 = time.perf_counter()
        rep = check_op(n, registry[n], instances, seed, epsilon, tolerance)
        rep.seconds = time.perf_counter() - t0
        reports.append(rep)
    return reports


def format_reports(reports) -> str:
    width = max(len(r.op_name) for r in reports) if reports else 10
    lines = [f"{'op':<{width}}  {'max_rel_error':>13}  {'probes':>7}  result"]
    for r in reports:
        lines.append(f"{r.op_name:<{width}}  {r.max_rel_error:13.3e}  {r.num_probes:7d}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
