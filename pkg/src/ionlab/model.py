"""A small ION-style detector assembled from the kernels.

Backbone of strided 3x3 convs (conv1..conv5), an optional context operator on
conv5, skip pooling from any subset of {conv3, conv4, conv5, context}, and the
fc head. Parameters live in one flat ``name -> array`` dict whose arrays are
shared with the layer dataclasses, so in-place updates reach both.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import context as ctx
from .detect_head import decode_delta, encode_delta, head_backward, head_forward, init_head, multitask_loss
from .nn_core import ConvParams, conv2d_backward, conv2d_forward, relu_backward, relu_forward, xavier_init
from .postprocess import RawDetections, flip_boxes, flip_merge, iou_matrix, two_round_raw
from .skip_pool import (
    SkipPoolConfig,
    init_skip_pool,
    measure_mean_descriptor_norm,
    roi_max_pool_batch,
    skip_pool_backward,
    skip_pool_forward,
)

CONTEXT_OPS = ("irnn", "irnn2dir", "conv3x3x2", "conv5x5x2", "gap", "none")


@dataclass
class ModelConfig:
    num_classes: int = 3
    image_channels: int = 3
    backbone_channels: tuple = (12, 16, 24, 32, 32)
    backbone_strides: tuple = (1, 2, 2, 2, 2)
    context: str = "irnn"
    irnn_hidden: int = 16
    irnn_layers: int = 2
    learned_whh: bool = True
    first_step_bias: bool = False
    context_dropout: float = 0.0
    sources: tuple = (("conv3", 4), ("conv4", 8), ("conv5", 16), ("context", 16))
    pooled: int = 7
    norm_mode: str = "all"
    scale_mode: str = "learned"
    scale_init: float | None = None
    measure_scale: bool = False  # set the scale to the measured mean conv5 norm
    reduced_channels: int = 32
    head_hidden: int = 128
    head_dropout: float = 0.0
    seg_loss: bool = False
    seg_loss_weight: float = 1.0
    bbox_std: tuple = (0.1, 0.1, 0.2, 0.2)
    pixel_mean: float = 0.5
    backbone_init: str = "he"  # "he" (ReLU-gain normal) or "xavier" (uniform)
    init_seed: int = 0

    def __post_init__(self):
        if self.context not in CONTEXT_OPS:
            raise ValueError(f"context must be one of {CONTEXT_OPS}")
        if len(self.backbone_channels) != 5 or len(self.backbone_strides) != 5:
            raise ValueError("backbone has exactly five conv layers")
        names = [s for s, _ in self.sources]
        if any(n.startswith("context") for n in names) and self.context == "none":
            raise ValueError("context source requested but context op is 'none'")
        if "context1" in names and self.context not in ("irnn", "irnn2dir"):
            raise ValueError("the 'context1' source (first IRNN layer output) needs an IRNN context op")
        if self.backbone_init not in ("he", "xavier"):
            raise ValueError("backbone_init must be 'he' or 'xavier'")
        if self.seg_loss and self.context == "none":
            raise ValueError("segmentation loss attaches to the context features")

    def skip_config(self) -> SkipPoolConfig:
        return SkipPoolConfig(
            sources=[tuple(s) for s in self.sources],
            pooled_h=self.pooled,
            pooled_w=self.pooled,
            norm_mode=self.norm_mode,
            scale_mode=self.scale_mode,
            scale_init=self.scale_init,
            reduced_channels=self.reduced_channels,
        )


def _stride_at(config: ModelConfig, layer: int) -> int:
    return int(np.prod(config.backbone_strides[:layer]))


class IonModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(config.init_seed)
        self.backbone = []
        c_in = config.image_channels
        for c_out, s in zip(config.backbone_channels, config.backbone_strides):
            # stride-s layers use a 2s kernel so output sizes divide exactly
            k = 3 if s == 1 else 2 * s
            if config.backbone_init == "he":
                w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), size=(c_out, c_in, k, k))
            else:
                w = xavier_init((c_out, c_in, k, k), rng)
            self.backbone.append(ConvParams(w, np.zeros(c_out), stride=s, pad=(k - s) // 2))
            c_in = c_out
        c5 = config.backbone_channels[-1]
        kind = config.context
        if kind == "irnn":
            self.context = ctx.init_irnn_block(
                c5, config.irnn_hidden, c5, rng, config.irnn_layers, config.learned_whh,
                config.first_step_bias, config.context_dropout,
            )
        elif kind == "irnn2dir":
            self.context = ctx.init_two_direction_block(
                c5, config.irnn_hidden, c5, rng, learned_whh=config.learned_whh,
                first_step_bias=config.first_step_bias, dropout_p=config.context_dropout,
            )
        elif kind == "conv3x3x2":
            self.context = ctx.init_conv_stack(c5, 3, rng)
        elif kind == "conv5x5x2":
            self.context = ctx.init_conv_stack(c5, 5, rng)
        else:
            self.context = None
        channels = {f"conv{i + 1}": c for i, c in enumerate(config.backbone_channels)}
        channels["context"] = channels["context1"] = c5
        self.skip_config = config.skip_config()
        for name, stride in self.skip_config.sources:
            if name not in channels:
                raise ValueError(f"unknown pooling source {name!r}")
            if name.startswith("conv") and stride != _stride_at(config, int(name[4:])):
                raise ValueError(f"source {name} has stride {_stride_at(config, int(name[4:]))}, config says {stride}")
        self.source_channels = channels
        self.skip = init_skip_pool(self.skip_config, channels, rng)
        feat = config.reduced_channels * config.pooled**2
        self.head = init_head(feat, config.head_hidden, config.num_classes, rng, config.head_dropout)
        self.seg = None
        if config.seg_loss:
            self.seg = ctx.init_seg_head(c5, config.num_classes + 1, rng, _stride_at(config, 5),
                                         config.seg_loss_weight)
        self.bbox_std = np.asarray(config.bbox_std, dtype=np.float64)
        self.params = self._collect()

    # ------------------------------------------------------------ params

    def _collect(self) -> dict:
        p = {}
        for i, conv in enumerate(self.backbone, start=1):
            p[f"conv{i}.w"] = conv.weights
            p[f"conv{i}.b"] = conv.bias
        if self.context is not None and hasattr(self.context, "arrays"):
            p.update({f"context.{k}": v for k, v in self.context.arrays().items()})
        p.update({f"skip.{k}": v for k, v in self.skip.arrays().items()})
        p.update({f"head.{k}": v for k, v in self.head.arrays().items()})
        if self.seg is not None:
            p.update({f"seg.{k}": v for k, v in self.seg.arrays().items()})
        return p

    def load_state(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint keys do not match model: {sorted(missing)[:5]}")
        for k, v in arrays.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k][...] = v

    def resolve_layers(self, names) -> set:
        """Parameter keys under each layer name (``conv3``, ``context``, ``head.fc6``...)."""
        keys = set()
        for n in names:
            hit = {k for k in self.params if k == n or k.startswith(n + ".")}
            if not hit:
                raise KeyError(f"layer name {n!r} matches no parameters")
            keys |= hit
        return keys

    def set_fixed_scale(self, value: float) -> None:
        for name, s in self.skip.scales.items():
            if isinstance(s, np.ndarray):
                s[...] = value
            elif self.skip_config.norm_mode != "none":
                self.skip.scales[name] = float(value)

    def measure_conv5_norm(self, scenes, max_rois: int = 64) -> float:
        pooled = []
        for sc in scenes:
            feats = self.features(sc.image)
            boxes = sc.proposals[:max_rois]
            p, _ = roi_max_pool_batch(feats["conv5"], boxes, _stride_at(self.config, 5), self.config.pooled,
                                      self.config.pooled)
            pooled.append(p)
        mode = self.skip_config.norm_mode if self.skip_config.norm_mode != "none" else "all"
        return measure_mean_descriptor_norm(np.concatenate(pooled), mode)

    # ----------------------------------------------------------- forward

    def features(self, image: np.ndarray, training: bool = False, rng=None, cache=None) -> dict:
        feats = {}
        x = np.asarray(image, dtype=np.float64) - self.config.pixel_mean
        bb = []
        for i, conv in enumerate(self.backbone, start=1):
            pre = conv2d_forward(x, conv)
            bb.append((x, pre))
            x = relu_forward(pre)
            feats[f"conv{i}"] = x
        c5 = feats["conv5"]
        kind = self.config.context
        cc = []
        if kind in ("irnn", "irnn2dir"):
            feats["context"] = ctx.irnn_block_forward(c5, self.context, training, rng, cache=cc)
            feats["context1"] = cc[0]["out"]
        elif kind in ("conv3x3x2", "conv5x5x2"):
            feats["context"] = ctx.conv_stack_forward(c5, self.context, cache=cc)
        elif kind == "gap":
            feats["context"] = ctx.gap_context_forward(c5)
        if cache is not None:
            cache.update(backbone=bb, context=cc)
        return feats

    def _roi_outputs(self, feats, boxes, training=False, rng=None, cache=None):
        sc = {} if cache is not None else None
        desc = skip_pool_forward(feats, boxes, self.skip_config, self.skip, cache=sc)
        hc = {} if cache is not None else None
        probs, deltas, logits = head_forward(desc, self.head, training, rng, cache=hc)
        if cache is not None:
            cache.update(skip=sc, head=hc)
        return probs, deltas, logits

    def roi_forward_fn(self, feats):
        """``boxes -> (probs, deltas)`` on precomputed features, deltas in image units."""
        k = self.config.num_classes
        std = np.tile(self.bbox_std, k)

        def fn(boxes):
            probs, deltas, _ = self._roi_outputs(feats, boxes)
            return probs, deltas * std

        return fn

    # ---------------------------------------------------------- training

    def loss_and_grads(self, scene, rois, labels, targets, training=True, rng=None, frozen=frozenset()):
        """Forward + backward on one image. ``targets`` are unnormalized deltas.

        Returns ``(losses dict, grads dict)``; frozen keys get no gradient entry
        and backprop stops below the lowest trainable backbone layer.
        """
        cache = {}
        feats = self.features(scene.image, training, rng, cache=cache)
        rc = {}
        probs, deltas, logits = self._roi_outputs(feats, rois, training, rng, cache=rc)
        norm_t = targets / self.bbox_std
        loss, cls_loss, reg_loss, g_logits, g_deltas = multitask_loss(logits, deltas, labels, norm_t)
        losses = {"cls": cls_loss, "reg": reg_loss, "seg": 0.0}
        grads = {}
        seg_cache = {}
        if self.seg is not None:
            _, seg_loss = ctx.seg_head_forward(feats["context"], self.seg, scene.class_map, cache=seg_cache)
            losses["seg"] = seg_loss
            loss += seg_loss
        losses["total"] = loss

        g_desc, hg = head_backward(g_logits, g_deltas, self.head, rc["head"])
        grads.update({f"head.{k}": v for k, v in hg.items()})
        fgrads, sg = skip_pool_backward(g_desc, self.skip_config, self.skip, rc["skip"])
        grads.update({f"skip.{k}": v for k, v in sg.items()})

        def acc(name, g):
            fgrads[name] = fgrads[name] + g if name in fgrads else g

        kind = self.config.context
        trainable_ctx = any(k.startswith("context.") and k not in frozen for k in self.params)
        lowest = self._lowest_trainable_conv(frozen)
        need_c5_grad = lowest is not None
        if kind != "none" and ("context" in fgrads or "context1" in fgrads or self.seg is not None):
            g_ctx = fgrads.pop("context", np.zeros_like(feats["context"]))
            if self.seg is not None:
                g_c, seg_g = ctx.seg_head_backward(self.seg, seg_cache)
                grads.update({f"seg.{k}": v for k, v in seg_g.items()})
                g_ctx = g_ctx + g_c
            if kind in ("irnn", "irnn2dir"):
                extra = {0: fgrads.pop("context1")} if "context1" in fgrads else None
                if trainable_ctx or need_c5_grad:
                    g5, cg = ctx.irnn_block_backward(g_ctx, self.context, cache["context"], extra)
                    grads.update({f"context.{k}": v for k, v in cg.items()})
                    acc("conv5", g5)
            elif kind in ("conv3x3x2", "conv5x5x2"):
                g5, cg = ctx.conv_stack_backward(g_ctx, self.context, cache["context"])
                grads.update({f"context.{k}": v for k, v in cg.items()})
                acc("conv5", g5)
            else:
                acc("conv5", ctx.gap_context_backward(g_ctx, feats["conv5"]))

        if lowest is not None:
            g = None
            for i in range(5, lowest - 1, -1):
                name = f"conv{i}"
                if name in fgrads:
                    g = fgrads[name] if g is None else g + fgrads[name]
                if g is None:
                    continue
                x, pre = cache["backbone"][i - 1]
                g = relu_backward(pre, g)
                gx, gw, gb = conv2d_backward(x, self.backbone[i - 1], g)
                grads[f"conv{i}.w"], grads[f"conv{i}.b"] = gw, gb
                g = gx
        for k in list(grads):
            if k in frozen:
                del grads[k]
        return losses, grads

    def _lowest_trainable_conv(self, frozen):
        for i in range(1, 6):
            if f"conv{i}.w" not in frozen or f"conv{i}.b" not in frozen:
                return i
        return None

    # --------------------------------------------------------- inference

    def predict(self, image, boxes, flip: bool = False):
        """Per-ROI ``(probs, deltas)`` with optional left-right flip averaging."""
        fn = self.roi_forward_fn(self.features(image))
        probs, deltas = fn(boxes)
        if flip:
            width = image.shape[2]
            ffn = self.roi_forward_fn(self.features(image[:, :, ::-1].copy()))
            pf, df = ffn(flip_boxes(boxes, width))
            probs, deltas = flip_merge(probs, deltas, pf, df)
        return probs, deltas

    def raw_detections(self, scene, rounds: int = 2, flip: bool = False) -> RawDetections:
        size = scene.image.shape[1:]
        if flip:
            fn = lambda b: self.predict(scene.image, b, flip=True)  # noqa: E731
        else:
            fn = self.roi_forward_fn(self.features(scene.image))
        return two_round_raw(scene.proposals, fn, rounds, size, scene.image_id)


# --------------------------------------------------------------- ROI sampling


@dataclass
class RoiSample:
    rois: np.ndarray
    labels: np.ndarray  # 0 background, c + 1 for class c
    targets: np.ndarray  # (N, 4) deltas to the matched gt, zero for background


def sample_rois(proposals, gt_boxes, gt_classes, rois_per_image: int, rng, fg_fraction: float = 0.25,
                fg_thresh: float = 0.5, bg_lo: float = 0.1) -> RoiSample:
    """Fixed-fraction fg/bg sampling; ground-truth boxes join the candidate pool.

    Foreground: IoU >= ``fg_thresh``; background: IoU in ``[bg_lo, fg_thresh)``.
    A short class is filled by sampling with repetition. Without any background
    candidate in range, the lowest-IoU candidates below ``fg_thresh`` are used.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cand = np.concatenate([gt_boxes, proposals]) if len(gt_boxes) else proposals
    if len(cand) == 0:
        raise ValueError("need at least one proposal")
    if len(gt_boxes):
        ov = iou_matrix(cand, gt_boxes)
        best = ov.max(axis=1)
        match = ov.argmax(axis=1)
    else:
        best = np.zeros(len(cand))
        match = np.zeros(len(cand), dtype=np.int64)
    fg = np.flatnonzero(best >= fg_thresh)
    bg = np.flatnonzero((best >= bg_lo) & (best < fg_thresh))
    if len(bg) == 0:
        below = np.flatnonzero(best < fg_thresh)
        bg = below[np.argsort(best[below], kind="stable")][: max(1, rois_per_image)]
    n_fg = int(round(fg_fraction * rois_per_image)) if len(fg) else 0
    if len(bg) == 0:
        n_fg = rois_per_image
    n_bg = rois_per_image - n_fg

    def pick(pool, n):
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if len(pool) >= n:
            return rng.choice(pool, size=n, replace=False)
        extra = rng.choice(pool, size=n - len(pool), replace=True)
        return np.concatenate([rng.permutation(pool), extra])

    idx = np.concatenate([pick(fg, n_fg), pick(bg, n_bg)]).astype(np.int64)
    rois = cand[idx]
    labels = np.zeros(len(idx), dtype=np.int64)
    targets = np.zeros((len(idx), 4))
    is_fg = best[idx] >= fg_thresh
    if is_fg.any():
        m = match[idx][is_fg]
        labels[is_fg] = np.asarray(gt_classes)[m] + 1
        targets[is_fg] = encode_delta(rois[is_fg], gt_boxes[m])
    return RoiSample(rois, labels, targets)
