import numpy as np
import pytest

from ionlab import gradcheck as gc
from ionlab.rfield import RFIELD_OPS, probe_receptive_field

DIFFERENTIABLE_OPS = {
    "conv2d", "deconv_upsample", "relu", "softmax_cross_entropy", "irnn_recurrence", "irnn_accumulator",
    "irnn_block", "l2norm_scale_all", "l2norm_scale_channel", "roi_max_pool", "skip_pool",
    "global_average_pool", "conv_stack", "fc_head", "multitask_loss", "seg_head",
}


def test_registry_covers_every_op_once():
    assert set(gc.REGISTRY) == DIFFERENTIABLE_OPS
    assert len(set(gc.REGISTRY.values())) == len(gc.REGISTRY)


def test_instances_are_away_from_kinks():
    rng = np.random.default_rng(0)
    for name, builder in gc.REGISTRY.items():
        case = builder(rng)
        assert set(case.arrays) == set(case.analytic), name
        assert case.margin > 0, name


def test_quick_pass_and_determinism():
    a = gc.run_gradcheck(["conv2d", "irnn_block"], instances=2)
    b = gc.run_gradcheck(["conv2d", "irnn_block"], instances=2)
    assert all(r.passed for r in a)
    assert [r.max_rel_error for r in a] == [r.max_rel_error for r in b]
    assert "irnn_block" in gc.format_reports(a)


def test_broken_backward_is_caught():
    def broken(rng):
        case = gc.REGISTRY["relu"](rng)
        case.analytic = {k: v * 1.01 for k, v in case.analytic.items()}
        return case

    report = gc.check_op("relu_broken", broken, instances=2)
    assert not report.passed and report.max_rel_error > 1e-3


def test_unknown_op_rejected():
    with pytest.raises(KeyError):
        gc.run_gradcheck(["nope"])


EXPECTED = {
    "conv3x3x2": ((5, 5), False),
    "conv5x5x2": ((9, 9), False),
    "gap": ((15, 15), True),
    "irnn": ((15, 15), True),
    "irnn2dir": ((1, 15), False),
}


@pytest.mark.parametrize("op", RFIELD_OPS)
def test_receptive_fields(op):
    rf = probe_receptive_field(op)
    window, full = EXPECTED[op]
    assert rf.window == window and rf.full_image == full
    if op == "gap":
        assert not rf.spatially_varying
    if op in ("irnn", "irnn2dir"):
        assert rf.spatially_varying
    if op == "irnn2dir":
        assert rf.rows == (7, 7) and rf.affected[7].all()
    assert op in rf.describe()


@pytest.mark.parametrize("seed", [1, 2])
def test_receptive_fields_independent_of_seed_and_size(seed):
    rf = probe_receptive_field("conv3x3x2", 11, 13, 3, seed)
    assert rf.window == (5, 5) and rf.rows == (3, 7) and rf.cols == (4, 8)
    assert probe_receptive_field("irnn", 9, 6, 1, seed).full_image


def test_rfield_rejects_bad_input():
    with pytest.raises(ValueError):
        probe_receptive_field("lstm")
    with pytest.raises(ValueError):
        probe_receptive_field("gap", 0, 5)
