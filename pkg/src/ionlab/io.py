"""File formats that decouple the pipeline stages.

Detections and ground truth are JSON Lines, one object per line::

    {"image_id": 3, "class_id": 1, "score": 0.92, "box": [x1, y1, x2, y2]}
    {"image_id": 3, "class_id": 1, "box": [x1, y1, x2, y2], "difficult": false}   # ground truth

An optional first line ``{"schema": "ionlab.detections", "version": 1}`` (or
``ionlab.groundtruth``) pins the format; writers always emit it. Floats are
written with ``repr`` precision, so a write/read round trip is lossless.

Scenes (images, proposals, pixel class maps, objects) go in a single ``.npz``.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import SyntheticScene
from .metrics import GroundTruthObject
from .postprocess import Detection

SCHEMA_VERSION = 1
DET_SCHEMA = "ionlab.detections"
GT_SCHEMA = "ionlab.groundtruth"


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path, self.line = path, line
        loc = str(path or "<input>") + (f":{line}" if line is not None else "")
        super().__init__(f"{loc}: {message}")


def _header(schema: str) -> str:
    return json.dumps({"schema": schema, "version": SCHEMA_VERSION})


def _box(value, path, lineno):
    if not isinstance(value, list) or len(value) != 4:
        raise DataFormatError("'box' must be a list of 4 numbers", path, lineno)
    try:
        b = tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise DataFormatError("'box' must be a list of 4 numbers", path, lineno) from None
    if b[2] < b[0] or b[3] < b[1]:
        raise DataFormatError(f"box {list(b)} has x2 < x1 or y2 < y1", path, lineno)
    return b


def _int(rec, key, path, lineno):
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise DataFormatError(f"{key!r} must be an integer, got {v!r}", path, lineno)
    return v


def _records(path, schema: str):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataFormatError(f"cannot read file: {e.strerror}", path) from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"invalid JSON ({e.msg})", path, lineno) from None
        if not isinstance(rec, dict):
            raise DataFormatError("each line must be a JSON object", path, lineno)
        if "schema" in rec:
            if rec.get("schema") != schema or rec.get("version") != SCHEMA_VERSION:
                raise DataFormatError(
                    f"schema mismatch: expected {schema} v{SCHEMA_VERSION}, "
                    f"found {rec.get('schema')} v{rec.get('version')}", path, lineno)
            continue
        yield lineno, rec


def write_detections(path, detections) -> None:
    with open(path, "w") as f:
        f.write(_header(DET_SCHEMA) + "\n")
        for d in detections:
            f.write(json.dumps({"image_id": int(d.image_id), "class_id": int(d.class_id),
                                "score": float(d.score), "box": [float(v) for v in d.box]}) + "\n")


def read_detections(path) -> list:
    out = []
    for lineno, rec in _records(path, DET_SCHEMA):
        score = rec.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise DataFormatError(f"'score' must be a number, got {score!r}", path, lineno)
        out.append(Detection(_int(rec, "image_id", path, lineno), _int(rec, "class_id", path, lineno),
                             float(score), _box(rec.get("box"), path, lineno)))
    return out


def write_ground_truth(path, objects) -> None:
    with open(path, "w") as f:
        f.write(_header(GT_SCHEMA) + "\n")
        for o in objects:
            f.write(json.dumps({"image_id": int(o.image_id), "class_id": int(o.class_id),
                                "box": [float(v) for v in o.box], "difficult": bool(o.difficult)}) + "\n")


def read_ground_truth(path) -> list:
    out = []
    for lineno, rec in _records(path, GT_SCHEMA):
        diff = rec.get("difficult", False)
        if not isinstance(diff, bool):
            raise DataFormatError(f"'difficult' must be true/false, got {diff!r}", path, lineno)
        out.append(GroundTruthObject(_int(rec, "image_id", path, lineno), _int(rec, "class_id", path, lineno),
                                     _box(rec.get("box"), path, lineno), diff))
    return out


# ------------------------------------------------------------------ scenes


def save_scenes(path, scenes) -> None:
    def offsets(lengths):
        return np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)

    np.savez(
        path,
        version=np.int64(SCHEMA_VERSION),
        image_ids=np.array([s.image_id for s in scenes], dtype=np.int64),
        images=np.stack([s.image for s in scenes]),
        class_maps=np.stack([s.class_map for s in scenes]),
        proposals=np.concatenate([s.proposals.reshape(-1, 4) for s in scenes]),
        proposal_offsets=offsets([len(s.proposals) for s in scenes]),
        gt_boxes=np.concatenate([s.gt_boxes for s in scenes]),
        gt_classes=np.concatenate([s.gt_classes for s in scenes]),
        gt_difficult=np.array([o.difficult for s in scenes for o in s.objects], dtype=bool),
        gt_offsets=offsets([len(s.objects) for s in scenes]),
    )


def load_scenes(path) -> list:
    try:
        z = np.load(path)
    except (OSError, ValueError) as e:
        raise DataFormatError(f"cannot load scenes archive: {e}", path) from None
    with z:
        try:
            if int(z["version"]) != SCHEMA_VERSION:
                raise DataFormatError(f"scenes archive version {int(z['version'])} != {SCHEMA_VERSION}", path)
            a = {k: z[k] for k in ("image_ids", "images", "class_maps", "proposals", "proposal_offsets",
                                    "gt_boxes", "gt_classes", "gt_difficult", "gt_offsets")}
        except KeyError as e:
            raise DataFormatError(f"scenes archive is missing {e}", path) from None
    po, go = a["proposal_offsets"], a["gt_offsets"]
    scenes = []
    for i, iid in enumerate(a["image_ids"]):
        objs = [
            GroundTruthObject(int(iid), int(a["gt_classes"][j]), tuple(float(v) for v in a["gt_boxes"][j]),
                              bool(a["gt_difficult"][j]))
            for j in range(go[i], go[i + 1])
        ]
        scenes.append(SyntheticScene(int(iid), a["images"][i], objs, a["class_maps"][i],
                                     a["proposals"][po[i]: po[i + 1]].copy()))
    return scenes
