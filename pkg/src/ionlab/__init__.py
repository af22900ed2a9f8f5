"""Desk-scale laboratory for context-aware object detection.

Numpy implementations, each with a hand-written backward pass, of:

- spatial IRNN context features,
- multi-layer skip pooling with L2 normalization,
- the detection head, post-processing (NMS, box voting, flip merging) and COCO-style evaluation,
- a deterministic toy training harness on synthetic shapes.
"""
__version__ = "0.1.0"
