"""Voxel-level Dice / TPR / PPV and cohort mean (std) reporting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

METRICS = ("dice", "tpr", "ppv")


class MetricValidationError(ValueError):
    pass


@dataclass
class SubjectScore:
    subject_id: str
    dice: float
    tpr: float
    ppv: float
    pred_voxels: int
    gt_voxels: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    flags: list = field(default_factory=list)


@dataclass
class CohortReport:
    mean: dict
    std: dict
    n_subjects: int
    fusion: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _as_binary(x, name):
    x = np.asarray(x)
    if x.dtype != bool:
        if not np.isin(x, (0, 1)).all():
            raise MetricValidationError(f"{name} must be binary")
        x = x.astype(bool)
    return x


def score_subject(pred, gt, subject_id: str = "") -> SubjectScore:
    """Confusion counts over the whole volume.

    Empty prediction and empty ground truth score 1 on every metric. Empty ground truth
    with a non-empty prediction gives dice = ppv = 0 and tpr = 0, flagged ``tpr_undefined``.
    Empty prediction on a non-empty ground truth gives ppv = 0 (flagged ``ppv_undefined``).
    """
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise MetricValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    flags = []
    if tp + fp + fn == 0:
        dice = tpr = ppv = 1.0
        flags.append("empty")
    else:
        dice = 2 * tp / (2 * tp + fp + fn)
        if tp + fn:
            tpr = tp / (tp + fn)
        else:
            tpr = 0.0
            flags.append("tpr_undefined")
        if tp + fp:
            ppv = tp / (tp + fp)
        else:
            ppv = 0.0
            flags.append("ppv_undefined")
    return SubjectScore(subject_id, dice, tpr, ppv, tp + fp, tp + fn, tp, fp, fn, flags)


def aggregate(scores, fusion: str = "") -> CohortReport:
    """Arithmetic mean and population standard deviation of each metric."""
    scores = list(scores)
    if not scores:
        raise MetricValidationError("cannot aggregate an empty score list")
    mean, std = {}, {}
    for m in METRICS:
        v = np.array([getattr(s, m) for s in scores], dtype=np.float64)
        mean[m] = float(v.mean())
        std[m] = float(v.std())
    return CohortReport(mean, std, len(scores), fusion)


def report_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def format_table(reports, label_width: int | None = None) -> str:
    """Plain-text table with one "mean(std)" cell per metric and one row per report."""
    reports = list(reports)
    label_width = label_width or max([len("Method")] + [len(r.fusion) for r in reports])
    head = f"{'Method':<{label_width}} | " + " | ".join(f"{m.upper():^13}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for r in reports:
        cells = " | ".join(f"{r.mean[m]:.3f}({r.std[m]:.3f})".center(13) for m in METRICS)
        lines.append(f"{r.fusion:<{label_width}} | {cells}")
    return "\n".join(lines) + "\n"
