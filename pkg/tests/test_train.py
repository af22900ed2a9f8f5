import math

import numpy as np
import pytest

from ionlab import train as tr
from ionlab.data import DataConfig, generate_shapes_dataset
from ionlab.model import IonModel, ModelConfig, sample_rois
from ionlab.nn_core import finite_diff_grad, relative_error, save_params

TINY_DATA = DataConfig(image_size=32, min_size=8, max_size=20, jitter_per_object=4, random_proposals=10)


def tiny_config(**kw):
    base = dict(backbone_channels=(4, 4, 6, 6, 8), irnn_hidden=3, reduced_channels=4, head_hidden=8, pooled=3,
                scale_init=10.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw):
    base = dict(images_per_update=2, rois_per_image=8, stages=(tr.Stage((), 3, 1e-3, 1e-4),), log_every=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes():
    return generate_shapes_dataset(0, 6, TINY_DATA)


# -------------------------------------------------------------- schedules


def test_lr_endpoints_exact():
    s1, s2 = tr.FULL_SCALE_STAGES[0].schedule, tr.FULL_SCALE_STAGES[1].schedule
    assert tr.lr_at(s1, 0) == 5e-3 and tr.lr_at(s1, s1.total_iters) == 1e-4
    assert tr.lr_at(s2, 0) == 1e-3 and tr.lr_at(s2, s2.total_iters) == 1e-5
    assert tr.lr_at(s1, s1.total_iters // 2) == pytest.approx(math.sqrt(5e-3 * 1e-4), rel=1e-12)
    assert tr.lr_at(s1, 20_000) == pytest.approx(7.0711e-4, abs=1e-8)
    lrs = [tr.lr_at(s1, i) for i in range(0, 40_001, 4000)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        tr.lr_at(s1, 40_001)
    with pytest.raises(ValueError):
        tr.LrSchedule(0.0, 1e-3, 10)


def test_full_scale_stage_freezing():
    assert tr.FULL_SCALE_STAGES[0].frozen == ("conv1", "conv2", "conv3", "conv4", "conv5")
    assert tr.FULL_SCALE_STAGES[1].frozen == ("conv1", "conv2")


def test_clip_examples(rng):
    g, norm = tr.clip_gradient(np.array([3.0, 4.0]), 1.0)
    np.testing.assert_allclose(g, [0.6, 0.8])
    assert norm == 5.0
    g, _ = tr.clip_gradient(np.array([0.3, 0.4]), 1.0)
    np.testing.assert_array_equal(g, [0.3, 0.4])
    for thr in (20.0, 80.0):
        big = {"a": rng.normal(0, 50, (10, 3)), "b": rng.normal(0, 50, 7)}
        clipped, before = tr.clip_gradient(big, thr)
        assert before > thr
        assert abs(tr.global_norm(clipped) - thr) <= 1e-12
    with pytest.raises(ValueError):
        tr.clip_gradient(np.ones(2), 0.0)


def test_update_clip_selects_threshold():
    assert tr.TrainConfig(images_per_update=4).update_clip == 80.0
    assert tr.TrainConfig(images_per_update=1).update_clip == 20.0
    with pytest.raises(ValueError):
        tr.TrainConfig(clip_mode="sometimes")


def test_momentum_trace():
    p = {"w": np.array([1.0])}
    vel = {}
    trace = []
    for _ in range(3):
        tr.sgd_momentum_update(p, {"w": np.array([1.0])}, vel, 0.1, 0.9)
        trace.append(p["w"][0])
    np.testing.assert_allclose(trace, [0.9, 0.71, 0.439])


def test_zero_lr_leaves_params_unchanged(rng):
    p = {"w": rng.normal(size=5)}
    before = p["w"].copy()
    tr.sgd_momentum_update(p, {"w": rng.normal(size=5)}, {}, 0.0, 0.9)
    assert p["w"].tobytes() == before.tobytes()


# ---------------------------------------------------------------- sampling


def test_context1_source_needs_irnn():
    with pytest.raises(ValueError):
        tiny_config(context="gap", sources=(("context1", 16),))


def test_sample_rois_counts(scenes):
    sc = scenes[0]
    s = sample_rois(sc.proposals, sc.gt_boxes, sc.gt_classes, 16, np.random.default_rng(0))
    assert len(s.rois) == 16 and (s.labels > 0).sum() == 4
    assert set(s.labels[s.labels > 0]) <= set(sc.gt_classes + 1)
    assert not s.targets[s.labels == 0].any()
    empty = sample_rois(np.array([[0, 0, 5, 5.0]]), np.zeros((0, 4)), np.zeros(0, int), 4, np.random.default_rng(0))
    assert (empty.labels == 0).all() and len(empty.rois) == 4
    with pytest.raises(ValueError):
        sample_rois(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0, int), 4, np.random.default_rng(0))


# ------------------------------------------------------------- model/grad


@pytest.mark.parametrize("kw", [dict(seg_loss=True), dict(context="none", sources=(("conv5", 16),)),
                                dict(norm_mode="none", scale_mode="fixed"),
                                dict(context="gap", sources=(("conv4", 8), ("context", 16))),
                                dict(sources=(("conv3", 4), ("context1", 16), ("context", 16)), first_step_bias=True)])
def test_full_model_gradient_matches_finite_differences(scenes, kw):
    model = IonModel(tiny_config(**kw))
    sc = scenes[1]
    s = sample_rois(sc.proposals, sc.gt_boxes, sc.gt_classes, 6, np.random.default_rng(1))

    def f(_):
        return model.loss_and_grads(sc, s.rois, s.labels, s.targets, training=False)[0]["total"]

    _, grads = model.loss_and_grads(sc, s.rois, s.labels, s.targets, training=False)
    probe = np.random.default_rng(2)
    for k in ("conv1.w", "conv5.w", "head.fc6.w", "skip.reduce.w"):
        num = finite_diff_grad(f, model.params[k], rng=probe, max_full=0, num_probes=6)
        assert relative_error(grads[k], num) < 1e-4, k


def test_frozen_layers_bitwise_constant(scenes):
    model = IonModel(tiny_config())
    before = {k: v.copy() for k, v in model.params.items()}
    cfg = tiny_train_config(stages=(tr.Stage(("conv1", "conv2"), 2, 1e-2, 1e-3),))
    tr.run_staged_training(model, scenes, cfg)
    for k, v in model.params.items():
        if k.startswith(("conv1.", "conv2.")):
            assert v.tobytes() == before[k].tobytes(), k
    assert any(v.tobytes() != before[k].tobytes() for k, v in model.params.items() if k.startswith("head."))


def test_accumulation_sums_per_image_gradients(scenes):
    model = IonModel(tiny_config())
    cfg = tiny_train_config(images_per_update=3)
    total, _ = tr.accumulate_gradients(model, scenes[:3], cfg, tr.TrainState(5))
    state = tr.TrainState(5)
    parts = [tr.image_gradient(model, sc, cfg, state)[1] for sc in scenes[:3]]
    for k in total:
        np.testing.assert_array_equal(total[k], parts[0][k] + parts[1][k] + parts[2][k])
    # the same image four times: about four times one image's gradient
    rep, _ = tr.accumulate_gradients(model, [scenes[0]] * 4, tiny_train_config(images_per_update=4,
                                                                              rois_per_image=1000),
                                     tr.TrainState(0))
    one = tr.image_gradient(model, scenes[0], tiny_train_config(rois_per_image=1000), tr.TrainState(0))[1]
    for k in ("head.cls_out.w", "conv1.w"):
        # sampling differs between passes; the overall scale does not
        assert np.linalg.norm(rep[k]) / np.linalg.norm(one[k]) == pytest.approx(4.0, rel=0.3)


def test_training_is_deterministic(scenes, tmp_path):
    blobs = []
    for i in range(2):
        model = IonModel(tiny_config(seg_loss=True))
        _, curve = tr.run_staged_training(model, scenes, tiny_train_config(), tr.TrainState(3))
        save_params(tmp_path / f"{i}.bin", model.params, {})
        blobs.append((tmp_path / f"{i}.bin").read_bytes())
        assert len(curve) == 3 and all(np.isfinite(r["total"]) for r in curve)
    assert blobs[0] == blobs[1]


def test_curve_csv(scenes, tmp_path):
    _, curve = tr.run_staged_training(IonModel(tiny_config()), scenes, tiny_train_config())
    tr.write_curve_csv(curve, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 4 and "total" in lines[0] and "lr" in lines[0]


def test_evaluate_model_runs(scenes):
    from ionlab.postprocess import VotingConfig

    out = tr.evaluate_model(IonModel(tiny_config()), scenes[:2], VotingConfig())
    assert 0.0 <= out["ap50"] <= 1.0


def test_measure_scale_sets_fusion_scale(scenes):
    model = IonModel(tiny_config(measure_scale=True))
    expected = model.measure_conv5_norm(scenes)
    tr.run_staged_training(model, scenes, tiny_train_config(stages=(tr.Stage((), 1, 1e-12, 1e-12),)))
    for s in model.skip.scales.values():
        np.testing.assert_allclose(s, expected, rtol=1e-6)
