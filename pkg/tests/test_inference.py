import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deeppwml import networks as nw
from deeppwml.inference import (
    InferenceConfigError,
    PipelineModels,
    binarize,
    run_ablation,
    segment_subject,
    tissue_filter,
    write_prediction,
)
from deeppwml.patching import plan_sliding_window
from deeppwml.phantom import BACKGROUND, CSF, GM, WM
from deeppwml.volume import Volume3D, read_volume

TINY = dict(growth=2, init_channels=4)


class StubClassifier(torch.nn.Module):
    """Calls a window positive when its mean intensity exceeds ``cut``."""

    def __init__(self, cut):
        super().__init__()
        self.cut = cut

    def forward(self, x):
        pos = (x.mean(dim=(1, 2, 3, 4)) > self.cut).float()
        return torch.stack([1 - pos, pos], dim=1)


def _models(cut=0.0, fusions=nw.ABLATION_FUSIONS):
    torch.manual_seed(0)
    tseg = nw.build_tseg(nw.NetworkSpec("tseg", out_channels=4, **TINY))
    cmg = nw.build_cmg(nw.NetworkSpec("cmg", depth=1, init_channels=4))
    pseg = {}
    for f in fusions:
        spec = nw.NetworkSpec("pseg", in_channels=nw.fusion_channels(f), variant="dunet_d1", **TINY)
        pseg[nw.fusion_tag(f)] = nw.build_pseg(spec)
    return PipelineModels(tseg, StubClassifier(cut), cmg, pseg)


@pytest.fixture(scope="module")
def volume():
    rng = np.random.default_rng(0)
    return Volume3D(rng.random((64, 64, 64)).astype(np.float32) + np.linspace(-0.1, 0.1, 64)[:, None, None].astype(np.float32))


@pytest.fixture(scope="module")
def plan():
    return plan_sliding_window((64, 64, 64), 32, 16)


def _average_oracle(window_outputs, shape, size=32):
    """Pad every window into a full volume and divide by the per-axis coverage product."""
    total = np.zeros(shape)
    for origin, values in window_outputs:
        pad = [(o, s - o - size) for o, s in zip(origin, shape)]
        total += np.pad(values.astype(np.float64), pad)
    starts = [sorted({o[a] for o, _ in window_outputs}) for a in range(3)]
    axis_counts = [np.array([sum(s <= i < s + size for s in st_) for i in range(n)]) for st_, n in zip(starts, shape)]
    count = axis_counts[0][:, None, None] * axis_counts[1][None, :, None] * axis_counts[2][None, None, :]
    return total / count


def test_all_negative_windows_give_zero_probability(volume, plan):
    pred = segment_subject(volume, _models(cut=10.0), plan)
    assert not any(pred.window_positive)
    assert pred.lesion_prob.data.max() == 0 and pred.lesion_mask.data.max() == 0
    assert pred.cf_map.data.max() == 0


def test_gating_and_averaging_match_oracle(volume, plan):
    pred = segment_subject(volume, _models(cut=0.5), plan, keep_windows=True)
    assert 0 < sum(pred.window_positive) < len(plan.origins)
    for positive, (_, values) in zip(pred.window_positive, pred.window_outputs):
        if not positive:
            assert not values.any()
    oracle = _average_oracle(pred.window_outputs, (64, 64, 64))
    assert np.abs(pred.lesion_prob.data - oracle).max() < 1e-6
    assert pred.coverage.min() >= 1


def test_prediction_type_invariants(volume, plan):
    pred = segment_subject(volume, _models(cut=0.5), plan, threshold=0.4)
    assert pred.cf_map.data.min() >= 0
    assert pred.lesion_prob.data.min() >= 0 and pred.lesion_prob.data.max() <= 1
    assert np.allclose(pred.sp_map.data.sum(0), 1, atol=1e-5)
    assert np.array_equal(pred.tissue_map.data, pred.sp_map.data.argmax(0))
    expected = tissue_filter(binarize(pred.lesion_prob, 0.4), pred.tissue_map)
    assert np.array_equal(pred.lesion_mask.data, expected)


def test_inference_is_bit_identical(volume, plan):
    a = segment_subject(volume, _models(cut=0.5), plan)
    b = segment_subject(volume, _models(cut=0.5), plan)
    for name in ("lesion_prob", "lesion_mask", "sp_map", "cf_map", "tissue_map"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)


def test_ablation_six_in_six_out(volume, plan):
    models = _models(cut=0.5)
    preds = run_ablation(volume, models, nw.ABLATION_FUSIONS, plan)
    assert sorted(preds) == sorted(nw.fusion_tag(f) for f in nw.ABLATION_FUSIONS)
    assert models.pseg["t1+sp+cf"].spec.in_channels == 6
    single = segment_subject(volume, models, plan, ("sp", "cf", "t1"))
    assert np.array_equal(preds["t1+sp+cf"].lesion_prob.data, single.lesion_prob.data)


def test_missing_fusion_network(volume, plan):
    with pytest.raises(InferenceConfigError):
        segment_subject(volume, _models(fusions=[("t1",)]), plan, ("sp", "cf", "t1"))


def test_channel_mismatch(volume, plan):
    models = _models(cut=0.5, fusions=[("sp", "t1")])
    models.pseg["t1+sp+cf"] = models.pseg.pop("t1+sp")
    with pytest.raises(InferenceConfigError, match="channels"):
        segment_subject(volume, models, plan, ("sp", "cf", "t1"))


def test_plan_shape_mismatch(volume):
    with pytest.raises(InferenceConfigError):
        segment_subject(volume, _models(), plan_sliding_window((64, 64, 48)))


def test_full_size_output_shape():
    rng = np.random.default_rng(1)
    vol = Volume3D(rng.random((130, 130, 170)).astype(np.float32))
    plan = plan_sliding_window(vol.shape, 32, 16)
    pred = segment_subject(vol, _models(cut=0.5, fusions=[("sp", "cf", "t1")]), plan)
    for name in ("lesion_prob", "lesion_mask", "cf_map", "tissue_map"):
        assert getattr(pred, name).shape == (130, 130, 170)
    assert pred.sp_map.data.shape == (4, 130, 130, 170)


def test_write_prediction(tmp_path, volume, plan):
    pred = segment_subject(volume, _models(cut=0.5), plan, threshold=0.3)
    summary = json.loads(write_prediction(pred, tmp_path, "pwml-000").read_text())
    assert summary["subject_id"] == "pwml-000" and summary["fusion"] == "t1+sp+cf"
    assert summary["lesion_voxels"] == int(pred.lesion_mask.data.sum())
    back = read_volume(tmp_path / "lesion_mask.nii.gz")
    assert np.array_equal(back.data, pred.lesion_mask.data)
    assert set(p.name for p in tmp_path.iterdir()) == {
        "lesion_prob.nii.gz", "lesion_mask.nii.gz", "tissue_map.nii.gz", "cf_map.nii.gz", "summary.json"
    }


# ---- filter and threshold


def test_tissue_filter_examples():
    mask = np.ones((2, 2, 1), np.uint8)
    tissue = np.array([[[BACKGROUND], [CSF]], [[GM], [WM]]], np.uint8)
    assert tissue_filter(mask, tissue).ravel().tolist() == [0, 0, 1, 1]
    empty = np.zeros_like(mask)
    assert not tissue_filter(empty, tissue).any()
    with pytest.raises(InferenceConfigError):
        tissue_filter(mask, tissue[:1])


@settings(max_examples=50, deadline=None)
@given(
    mask=arrays(np.uint8, (5, 5, 5), elements=st.integers(0, 1)),
    tissue=arrays(np.uint8, (5, 5, 5), elements=st.integers(0, 3)),
)
def test_tissue_filter_is_monotone(mask, tissue):
    out = tissue_filter(mask, tissue)
    assert (out <= mask).all()
    keep = (tissue == GM) | (tissue == WM)
    assert np.array_equal(out[keep], mask[keep])
    assert not out[~keep].any()


def test_binarize_examples():
    assert not binarize(np.full((3, 3, 3), 0.4)).any()
    assert binarize(np.full((3, 3, 3), 0.5)).all()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 4, 4), elements=st.floats(0, 1)), st.floats(0.01, 1))
def test_binarize_idempotent(prob, t):
    once = binarize(prob, t)
    assert np.array_equal(binarize(once, t), once)
