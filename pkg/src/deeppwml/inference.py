"""Test-time pipeline: classify sliding windows, route positives through the CF generator and
lesion network, average overlaps, binarize, and drop lesions sited on background/CSF."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import networks as nw
from .patching import SlidingWindowPlan, crop, reconstruct_average
from .phantom import BACKGROUND, CONNECTIVITY, CSF
from .training import CHANNELS_LAST, POSITIVE_INDEX, run_batched
from .volume import Volume3D, write_volume


class InferenceConfigError(ValueError):
    pass


@dataclass
class PipelineModels:
    tseg: torch.nn.Module
    cls: torch.nn.Module
    cmg: torch.nn.Module
    pseg: dict = field(default_factory=dict)  # fusion tag -> lesion network

    def __post_init__(self):
        for m in (self.tseg, self.cls, self.cmg, *self.pseg.values()):
            m.eval()
            m.to(memory_format=CHANNELS_LAST)


@dataclass
class SubjectPrediction:
    lesion_prob: Volume3D
    lesion_mask: Volume3D
    sp_map: Volume3D
    cf_map: Volume3D
    tissue_map: Volume3D
    coverage: np.ndarray
    fusion: str = ""
    threshold: float = 0.5
    window_positive: list = field(default_factory=list)
    window_outputs: list | None = None


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    data = prob.data if isinstance(prob, Volume3D) else np.asarray(prob)
    return (data >= threshold).astype(np.uint8)


def tissue_filter(lesion_mask, tissue_map) -> np.ndarray:
    mask = np.asarray(lesion_mask.data if isinstance(lesion_mask, Volume3D) else lesion_mask)
    tissue = np.asarray(tissue_map.data if isinstance(tissue_map, Volume3D) else tissue_map)
    if mask.shape != tissue.shape:
        raise InferenceConfigError(f"mask {mask.shape} and tissue map {tissue.shape} disagree")
    out = mask.astype(np.uint8).copy()
    out[(tissue == BACKGROUND) | (tissue == CSF)] = 0
    return out


@dataclass
class _WindowFeatures:
    origins: list
    t1: torch.Tensor
    positive: torch.Tensor
    sp: torch.Tensor
    cf: torch.Tensor  # zeros for negative windows


@torch.no_grad()
def _window_features(t1: np.ndarray, models: PipelineModels, plan: SlidingWindowPlan, batch_size: int) -> _WindowFeatures:
    if tuple(t1.shape) != tuple(plan.volume_shape):
        raise InferenceConfigError(f"plan is for {plan.volume_shape}, volume is {t1.shape}")
    windows = np.stack([crop(t1, o, plan.patch_size) for o in plan.origins]).astype(np.float32)
    x = torch.from_numpy(windows).unsqueeze(1)
    positive = run_batched(models.cls, x, batch_size).argmax(1) == POSITIVE_INDEX
    sp = run_batched(models.tseg, x, batch_size)
    cf = torch.zeros_like(x)
    if positive.any():
        cf[positive] = run_batched(lambda b: models.cmg(b, nw.SwitchState.REMOVE), x[positive], batch_size)
    return _WindowFeatures(list(plan.origins), x, positive, sp, cf)


@torch.no_grad()
def _predict(feats: _WindowFeatures, pseg, fusion, plan, spacing, threshold, batch_size, keep_windows) -> SubjectPrediction:
    tag = nw.fusion_tag(fusion)
    spec = getattr(pseg, "spec", None)
    if spec is not None and spec.in_channels != nw.fusion_channels(fusion):
        raise InferenceConfigError(
            f"lesion network expects {spec.in_channels} channels, fusion {tag} provides {nw.fusion_channels(fusion)}"
        )
    prob = torch.zeros_like(feats.cf)
    pos = feats.positive
    if pos.any():
        fused = nw.fuse(feats.t1[pos], feats.sp[pos], feats.cf[pos], fusion)
        prob[pos] = run_batched(pseg, fused, batch_size)
    prob_np = prob[:, 0].numpy()
    shape = plan.volume_shape
    lesion_prob = reconstruct_average(zip(feats.origins, prob_np), shape, spacing)
    sp_map = reconstruct_average(zip(feats.origins, feats.sp.numpy()), shape, spacing)
    cf_map = reconstruct_average(zip(feats.origins, feats.cf[:, 0].numpy()), shape, spacing)
    tissue = Volume3D(sp_map.data.argmax(0).astype(np.uint8), spacing)
    prob32 = Volume3D(lesion_prob.data.astype(np.float32), spacing)
    mask = tissue_filter(binarize(prob32, threshold), tissue)
    return SubjectPrediction(
        lesion_prob=prob32,
        lesion_mask=Volume3D(mask, spacing),
        sp_map=Volume3D(sp_map.data.astype(np.float32), spacing),
        cf_map=Volume3D(cf_map.data.astype(np.float32), spacing),
        tissue_map=tissue,
        coverage=lesion_prob.meta["coverage"],
        fusion=tag,
        threshold=threshold,
        window_positive=[bool(p) for p in pos],
        window_outputs=list(zip(feats.origins, prob_np)) if keep_windows else None,
    )


def _pseg_for(models: PipelineModels, fusion):
    tag = nw.fusion_tag(fusion)
    if tag not in models.pseg:
        raise InferenceConfigError(f"no lesion network trained for fusion {tag}")
    return models.pseg[tag]


def segment_subject(
    t1,
    models: PipelineModels,
    plan: SlidingWindowPlan,
    fusion=("sp", "cf", "t1"),
    threshold: float = 0.5,
    batch_size: int = 16,
    keep_windows: bool = False,
) -> SubjectPrediction:
    """Full-volume lesion prediction.

    Windows the classifier calls negative contribute zeros to the lesion probability but
    still count towards each voxel's averaging denominator. The tissue network runs on
    every window so the tissue map covers the whole volume.
    """
    vol = t1 if isinstance(t1, Volume3D) else Volume3D(t1)
    pseg = _pseg_for(models, fusion)
    feats = _window_features(vol.data, models, plan, batch_size)
    return _predict(feats, pseg, fusion, plan, vol.spacing, threshold, batch_size, keep_windows)


def run_ablation(t1, models: PipelineModels, fusion_sets, plan: SlidingWindowPlan, threshold=0.5, batch_size=16) -> dict:
    """Predictions for several input fusions; window classification, SP and CF maps are shared."""
    vol = t1 if isinstance(t1, Volume3D) else Volume3D(t1)
    psegs = {nw.fusion_tag(f): _pseg_for(models, f) for f in fusion_sets}
    feats = _window_features(vol.data, models, plan, batch_size)
    return {
        tag: _predict(feats, pseg, tag, plan, vol.spacing, threshold, batch_size, False)
        for tag, pseg in psegs.items()
    }


def write_prediction(pred: SubjectPrediction, out_dir, subject_id: str) -> Path:
    out_dir = Path(out_dir)
    for name in ("lesion_prob", "lesion_mask", "tissue_map", "cf_map"):
        write_volume(getattr(pred, name), out_dir / f"{name}.nii.gz")
    _, n_comp = ndimage.label(pred.lesion_mask.data, structure=CONNECTIVITY)
    summary = {
        "subject_id": subject_id,
        "fusion": pred.fusion,
        "threshold": pred.threshold,
        "lesion_voxels": int(pred.lesion_mask.data.sum()),
        "component_count": int(n_comp),
    }
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path
