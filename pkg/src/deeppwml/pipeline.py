"""Experiment lifecycle on disk: generate -> train stages -> infer / ablate -> evaluate."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from pathlib import Path

from . import networks as nw
from .config import ExperimentConfig
from .inference import PipelineModels, run_ablation, segment_subject, write_prediction
from .metrics import aggregate, format_table, report_json, score_subject
from .patching import plan_sliding_window, sample_training_patches
from .phantom import generate_cohort, read_cohort, write_cohort
from .training import REQUIRED_FROZEN, StagingError, split_cohort, train_stage
from .volume import read_volume

log = logging.getLogger(__name__)


class MissingPredictionsError(FileNotFoundError):
    pass


def emit(cfg: ExperimentConfig | None, event: str, **fields):
    """One JSON line to stdout and to ``report_dir/log.jsonl``."""
    rec = {"event": event, **fields}
    line = json.dumps(rec, sort_keys=True)
    print(line, file=sys.stdout, flush=True)
    if cfg is not None:
        path = cfg.path("report_dir") / "log.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as fh:
            fh.write(line + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- data


def generate(cfg: ExperimentConfig) -> Path:
    cfg.validate()
    n_control = int(cfg.cohort.get("n_control", 0))
    n_pwml = int(cfg.cohort.get("n_pwml", 0))
    subjects = generate_cohort(cfg.phantom_config, n_control, n_pwml, cfg.seed)
    manifest = write_cohort(subjects, cfg.path("data_dir"))
    splits = split_subjects(cfg, [(s.subject_id, s.group) for s in subjects])
    (cfg.path("data_dir") / "splits.json").write_text(json.dumps(splits, indent=2, sort_keys=True) + "\n")
    emit(cfg, "generate", subjects=len(subjects), manifest=str(manifest), manifest_sha256=file_digest(manifest))
    return manifest


def split_subjects(cfg: ExperimentConfig, ids_groups) -> dict:
    """Subject-level split done separately per group so both groups appear in every part."""
    out = {"train": [], "val": [], "test": []}
    for group in ("control", "pwml"):
        ids = sorted(sid for sid, g in ids_groups if g == group)
        parts = split_cohort(ids, cfg.ratios, cfg.seed)
        for name, part in zip(("train", "val", "test"), parts):
            out[name].extend(sorted(part))
    return out


def load_splits(cfg: ExperimentConfig) -> dict:
    path = cfg.path("data_dir") / "splits.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run `generate` first")
    return json.loads(path.read_text())


def _subjects(cfg, part: str, group: str):
    ids = set(load_splits(cfg)[part])
    return [s for s in read_cohort(cfg.path("data_dir"), ids) if s.group == group]


def stage_patches(cfg: ExperimentConfig, stage: str) -> dict:
    """Patches for one stage: tissue network on control subjects, everything else on PWML subjects."""
    sc = cfg.sampling_config
    out = {}
    for i, part in enumerate(("train", "val")):
        seed = cfg.seed + 17 * (i + 1)
        patches = []
        if stage == "tseg":
            for s in _subjects(cfg, part, "control"):
                patches += sample_training_patches(s, 0, sc.n_control, seed, jitter=sc.jitter)
        else:
            n_neg = sc.pseg_n_neg if stage == "pseg" else sc.n_neg
            for s in _subjects(cfg, part, "pwml"):
                patches += sample_training_patches(s, sc.n_pos, n_neg, seed, jitter=sc.jitter)
        out[part] = patches
    return out


# ---------------------------------------------------------------- training


def _load_frozen(cfg, names):
    ckdir = cfg.path("checkpoint_dir")
    models = {}
    for name in names:
        if nw.find_checkpoint(ckdir, name) is None:
            raise StagingError(f"missing checkpoint for stage {name!r}; run `train {name}` first")
        models[name], _ = nw.load_checkpoint(ckdir, name)
    return models


def train(cfg: ExperimentConfig, stage: str, fusions=None) -> list:
    """Train one stage (for ``pseg``: one network per configured fusion set)."""
    cfg.validate()
    frozen = _load_frozen(cfg, REQUIRED_FROZEN[stage])
    if stage == "cls" and nw.find_checkpoint(cfg.path("checkpoint_dir"), "tseg") is not None:
        frozen.update(_load_frozen(cfg, ["tseg"]))
    data = stage_patches(cfg, stage)
    emit(cfg, "train_start", stage=stage, n_train=len(data["train"]), n_val=len(data["val"]))
    if stage == "pseg":
        fusions = fusions or cfg.inference_config.fusion_sets
        stage_cfgs = [cfg.stage_config("pseg", f) for f in fusions]
    else:
        stage_cfgs = [cfg.stage_config(stage)]
    log_path = cfg.path("checkpoint_dir") / "metrics.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    results = []
    for sc in stage_cfgs:
        res = train_stage(sc, data, frozen, cfg.path("checkpoint_dir"), log_path)
        emit(
            cfg, "train_done", stage=sc.checkpoint_stage(), best_epoch=res.best_epoch,
            best_val_metric=res.history[res.best_epoch]["val_metric"], checkpoint=str(res.checkpoint),
        )
        results.append(res)
    return results


# ---------------------------------------------------------------- inference


def load_models(cfg: ExperimentConfig, fusions) -> PipelineModels:
    base = _load_frozen(cfg, ["tseg", "cls", "cmg"])
    pseg = {}
    for f in fusions:
        tag = nw.fusion_tag(f)
        pseg[tag] = _load_frozen(cfg, [f"pseg_{tag}"])[f"pseg_{tag}"]
    return PipelineModels(base["tseg"], base["cls"], base["cmg"], pseg)


def prediction_dir(cfg: ExperimentConfig, fusion, subject_id: str) -> Path:
    return cfg.path("report_dir") / "predictions" / nw.fusion_tag(fusion) / subject_id


def _test_subjects(cfg, subject_ids=None):
    ids = set(subject_ids) if subject_ids else set(load_splits(cfg)["test"])
    return read_cohort(cfg.path("data_dir"), ids)


def infer(cfg: ExperimentConfig, subject_ids=None, fusions=None) -> list[Path]:
    cfg.validate()
    inf = cfg.inference_config
    fusions = fusions or [inf.primary_fusion]
    models = load_models(cfg, fusions)
    written = []
    for s in _test_subjects(cfg, subject_ids):
        plan = plan_sliding_window(s.t1.shape, stride=inf.stride)
        if len(fusions) == 1:
            preds = {nw.fusion_tag(fusions[0]): segment_subject(s.t1, models, plan, fusions[0], inf.threshold, inf.batch_size)}
        else:
            preds = run_ablation(s.t1, models, fusions, plan, inf.threshold, inf.batch_size)
        for tag, pred in preds.items():
            out = prediction_dir(cfg, tag, s.subject_id)
            write_prediction(pred, out, s.subject_id)
            written.append(out)
        emit(cfg, "infer", subject_id=s.subject_id, fusions=sorted(preds))
    return written


def ablate(cfg: ExperimentConfig, subject_ids=None) -> list[Path]:
    return infer(cfg, subject_ids, cfg.inference_config.fusion_sets)


# ---------------------------------------------------------------- evaluation


def evaluate(cfg: ExperimentConfig, fusions=None, group: str = "pwml") -> dict:
    """Score every test subject of ``group`` for each fusion set; write JSON and text tables."""
    cfg.validate()
    fusions = [nw.fusion_tag(f) for f in (fusions or cfg.inference_config.fusion_sets)]
    subjects = [s for s in _test_subjects(cfg) if s.group == group]
    missing = [
        f"{tag}/{s.subject_id}"
        for tag in fusions
        for s in subjects
        if not (prediction_dir(cfg, tag, s.subject_id) / "lesion_mask.nii.gz").exists()
    ]
    if missing:
        raise MissingPredictionsError(f"predictions missing for: {', '.join(missing)}")
    reports, per_subject = [], {}
    for tag in fusions:
        scores = []
        for s in subjects:
            pred = read_volume(prediction_dir(cfg, tag, s.subject_id) / "lesion_mask.nii.gz").data
            scores.append(score_subject(pred, s.lesions.data, s.subject_id))
        per_subject[tag] = [vars(sc) for sc in scores]
        reports.append(aggregate(scores, tag))
    out_dir = cfg.path("report_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report_json(reports))
    (out_dir / "scores.json").write_text(json.dumps(per_subject, indent=2, sort_keys=True) + "\n")
    table = format_table(reports)
    (out_dir / "report.txt").write_text(table)
    emit(cfg, "evaluate", n_subjects=len(subjects), report=str(out_dir / "report.json"))
    return {"reports": reports, "table": table, "scores": per_subject}


def run_all(cfg: ExperimentConfig) -> dict:
    generate(cfg)
    for stage in ("tseg", "cls", "cmg", "pseg"):
        train(cfg, stage)
    ablate(cfg)
    return evaluate(cfg)
