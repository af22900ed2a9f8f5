import numpy as np
import pytest

from ionlab.data import SMALL_AREA, DataConfig, generate_shapes_dataset, ground_truth, proposal_recall
from ionlab.postprocess import iou_matrix


@pytest.fixture(scope="module")
def scenes():
    return generate_shapes_dataset(11, 150)


def test_same_seed_same_data():
    a = generate_shapes_dataset(3, 4)
    b = generate_shapes_dataset(3, 4)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.proposals.tobytes() == y.proposals.tobytes()
        assert x.objects == y.objects
    c = generate_shapes_dataset(4, 4)
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_shapes_and_bounds(scenes):
    cfg = DataConfig()
    for sc in scenes:
        assert sc.image.shape == (3, 64, 64) and sc.class_map.shape == (64, 64)
        assert cfg.min_objects <= len(sc.objects) <= cfg.max_objects
        b = sc.gt_boxes
        assert np.all(b >= 0) and np.all(b <= 64)
        assert np.all(b[:, 2] > b[:, 0]) and np.all(b[:, 3] > b[:, 1])
        assert np.all(sc.proposals[:, 2] >= sc.proposals[:, 0]) and np.all(sc.proposals >= 0)
        assert np.all(sc.proposals <= 64)
        assert set(np.unique(sc.gt_classes)) <= {0, 1, 2}


def test_class_map_agrees_with_objects(scenes):
    for sc in scenes[:40]:
        labels = set(np.unique(sc.class_map)) - {0}
        assert labels <= set(sc.gt_classes + 1)
        for o in sc.objects:
            x1, y1, x2, y2 = (int(round(v)) for v in o.box)
            inside = sc.class_map[y1:y2, x1:x2]
            # every object paints pixels of its class inside its box (possibly partly occluded)
            assert (inside == o.class_id + 1).any() or any(
                p is not o and iou_matrix([o.box], [p.box])[0, 0] > 0 for p in sc.objects)


def test_object_overlap_is_limited(scenes):
    cfg = DataConfig()
    for sc in scenes:
        ov = iou_matrix(sc.gt_boxes, sc.gt_boxes)
        np.fill_diagonal(ov, 0)
        assert ov.max() <= cfg.max_overlap + 1e-12


def test_small_objects_are_harder_for_proposals(scenes):
    rec = proposal_recall(scenes)
    assert rec["small"] < rec["large"] and rec["all"] > 0.8
    gts = ground_truth(scenes)
    areas = np.array([(g.box[2] - g.box[0]) * (g.box[3] - g.box[1]) for g in gts])
    assert 0 < np.mean(areas <= SMALL_AREA) < 1


def test_config_validation():
    with pytest.raises(ValueError):
        DataConfig(num_classes=4)
    with pytest.raises(ValueError):
        DataConfig(min_size=50, max_size=40)
    with pytest.raises(ValueError):
        generate_shapes_dataset(0, 0)
