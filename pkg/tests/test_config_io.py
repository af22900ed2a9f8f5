import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ionlab import io as lab_io
from ionlab.config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config_text,
    parse_sources,
    parse_stages,
    parse_value,
)
from ionlab.data import generate_shapes_dataset
from ionlab.metrics import GroundTruthObject
from ionlab.postprocess import Detection
from ionlab.train import Stage

# ------------------------------------------------------------------ config


def test_defaults_match_toy_recipe():
    cfg = parse_config_text("")
    assert cfg.variant is None and cfg.budget.iters == 800
    tc = cfg.train_config()
    assert tc.stages == (Stage((), 800, 3e-3, 3e-4),) and tc.images_per_update == 4


def test_parse_full_example(tmp_path):
    text = """
    # an experiment
    variant = conv5_only
    model.head_hidden = 64        # trailing comment
    model.scale_init = none
    data.noise = 0.2
    budget.iters = 10
    train.momentum = 0.95
    train.stages = conv1+conv2 | 5 | 1e-3 | 1e-4 ; - | 5 | 1e-4 | 1e-5
    """
    p = tmp_path / "exp.cfg"
    p.write_text(text)
    cfg = load_config(p)
    assert cfg.variant == "conv5_only" and cfg.model.context == "none"
    assert cfg.model.sources == (("conv5", 16),) and cfg.model.head_hidden == 64 and cfg.model.scale_init is None
    assert cfg.budget.data.noise == 0.2 and cfg.budget.iters == 10
    tc = cfg.train_config()
    assert tc.momentum == 0.95 and tc.stages[0] == Stage(("conv1", "conv2"), 5, 1e-3, 1e-4)
    assert tc.stages[1].frozen == ()


def test_to_text_round_trip():
    cfg = parse_config_text("variant = ion\nmodel.backbone_channels = 4, 4, 6, 6, 8\ntrain.clip_mode = per_pass\n")
    again = parse_config_text(cfg.to_text())
    assert again.model == cfg.model and again.budget == cfg.budget
    assert again.train_config() == cfg.train_config()


@pytest.mark.parametrize("text, line, fragment", [
    ("model.context = irnn\nmodel.bogus = 3\n", 2, "unknown key"),
    ("\n\nbudget.iters = many\n", 3, "bad value"),
    ("model.pooled = 5\nmodel.pooled = 6\n", 2, "repeated"),
    ("variant = huge\n", 1, "unknown variant"),
    ("just some words\n", 1, "key = value"),
    ("model.seg_loss = maybe\n", 1, "bad value"),
    ("model.sources = conv3\n", 1, "name:stride"),
    ("train.stages = a | 1\n", 1, "frozen | iters"),
    ("train.seed = 3\n", 1, "unknown key"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as e:
        parse_config_text(text, "exp.cfg")
    assert e.value.line == line and fragment in str(e.value) and f"exp.cfg:{line}:" in str(e.value)


def test_semantic_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config_text("model.context = none\n")  # default sources include the context
    with pytest.raises(ConfigError):
        parse_config_text("train.clip_mode = sometimes\n")


def test_value_parsers():
    assert parse_value(bool, "yes") is True and parse_value(int, " 4 ") == 4
    assert parse_value(float | None, "None") is None and parse_value(tuple, "1, 2.5") == (1, 2.5)
    assert parse_sources("conv3:4, context:16") == (("conv3", 4), ("context", 16))
    assert parse_stages("- | 3 | 0.1 | 0.01") == (Stage((), 3, 0.1, 0.01),)
    assert isinstance(ExperimentConfig(), ExperimentConfig)


# -------------------------------------------------------------------- jsonl

finite = st.floats(-1e6, 1e6, allow_nan=False)


@st.composite
def detections(draw):
    out = []
    for _ in range(draw(st.integers(0, 8))):
        x, y = draw(finite), draw(finite)
        w, h = draw(st.floats(0, 1e3)), draw(st.floats(0, 1e3))
        out.append(Detection(draw(st.integers(0, 10**9)), draw(st.integers(0, 90)), draw(st.floats(0, 1)),
                             (x, y, x + w, y + h)))
    return out


@given(detections())
def test_detections_round_trip(tmp_path_factory, dets):
    p = tmp_path_factory.mktemp("d") / "dets.jsonl"
    lab_io.write_detections(p, dets)
    assert lab_io.read_detections(p) == dets


def test_ground_truth_round_trip_and_header(tmp_path):
    gts = [GroundTruthObject(1, 2, (0.5, 1.0, 3.0, 4.0), True), GroundTruthObject(7, 0, (0, 0, 1, 1))]
    p = tmp_path / "gt.jsonl"
    lab_io.write_ground_truth(p, gts)
    assert json.loads(p.read_text().splitlines()[0]) == {"schema": "ionlab.groundtruth", "version": 1}
    assert lab_io.read_ground_truth(p) == gts
    # the header is optional; an empty file is an empty list
    p.write_text('{"image_id": 1, "class_id": 0, "box": [0, 0, 2, 2]}\n')
    assert lab_io.read_ground_truth(p) == [GroundTruthObject(1, 0, (0, 0, 2, 2))]
    p.write_text("")
    assert lab_io.read_ground_truth(p) == []


@pytest.mark.parametrize("line, fragment", [
    ('{"schema": "ionlab.groundtruth", "version": 1}', "schema mismatch"),
    ('{"schema": "ionlab.detections", "version": 2}', "schema mismatch"),
    ('{"image_id": 1, "class_id": 0, "score": 0.5, "box": [0, 0, 1]}', "4 numbers"),
    ('{"image_id": 1, "class_id": 0, "score": 0.5, "box": [3, 0, 1, 1]}', "x2 < x1"),
    ('{"image_id": "a", "class_id": 0, "score": 0.5, "box": [0, 0, 1, 1]}', "integer"),
    ('{"image_id": 1, "class_id": 0, "score": "high", "box": [0, 0, 1, 1]}', "number"),
    ("[1, 2]", "JSON object"),
    ("{not json", "invalid JSON"),
])
def test_malformed_detection_files(tmp_path, line, fragment):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"image_id": 1, "class_id": 0, "score": 0.5, "box": [0, 0, 1, 1]}\n' + line + "\n")
    with pytest.raises(lab_io.DataFormatError) as e:
        lab_io.read_detections(p)
    assert e.value.line == 2 and fragment in str(e.value)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(lab_io.DataFormatError):
        lab_io.read_detections(tmp_path / "nope.jsonl")
    with pytest.raises(lab_io.DataFormatError):
        lab_io.load_scenes(tmp_path / "nope.npz")


def test_scenes_round_trip(tmp_path):
    scenes = generate_shapes_dataset(5, 3)
    lab_io.save_scenes(tmp_path / "s.npz", scenes)
    back = lab_io.load_scenes(tmp_path / "s.npz")
    for a, b in zip(scenes, back):
        assert a.image_id == b.image_id and a.objects == b.objects
        assert a.image.tobytes() == b.image.tobytes() and a.proposals.tobytes() == b.proposals.tobytes()
        np.testing.assert_array_equal(a.class_map, b.class_map)
    np.savez(tmp_path / "old.npz", version=np.int64(0))
    with pytest.raises(lab_io.DataFormatError):
        lab_io.load_scenes(tmp_path / "old.npz")
    np.savez(tmp_path / "partial.npz", version=np.int64(1))
    with pytest.raises(lab_io.DataFormatError):
        lab_io.load_scenes(tmp_path / "partial.npz")
