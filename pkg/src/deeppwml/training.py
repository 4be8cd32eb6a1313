"""Losses and the staged training procedure (tissue -> classifier -> CF generator -> lesion seg)."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import networks as nw
from .patching import POSITIVE, Patch

log = logging.getLogger(__name__)

NEGATIVE_INDEX, POSITIVE_INDEX = 0, 1
STAGES = ("tseg", "cls", "cmg", "pseg")
REQUIRED_FROZEN = {"tseg": (), "cls": (), "cmg": ("cls",), "pseg": ("tseg", "cmg")}
CHANNELS_LAST = torch.channels_last_3d
_EPS = 1e-7


class StagingError(RuntimeError):
    """A stage was requested before the models it depends on exist."""


class TrainingError(RuntimeError):
    pass


class LossValidationError(ValueError):
    pass


# ---------------------------------------------------------------- losses


def voxel_cross_entropy(pred, target, from_logits: bool = False):
    """Mean per-voxel negative log-likelihood.

    pred: (B, C, X, Y, Z) probabilities (or logits), target: (B, X, Y, Z) integer labels.
    """
    if pred.shape[:1] + pred.shape[2:] != target.shape:
        raise LossValidationError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} disagree")
    target = target.long()
    if from_logits:
        return F.cross_entropy(pred, target)
    logp = torch.log(pred.clamp_min(_EPS))
    return -logp.gather(1, target.unsqueeze(1)).mean()


def categorical_cross_entropy(pred, label, from_logits: bool = False):
    """Mean NLL of (B, 2) class probabilities (or logits) against integer labels."""
    label = torch.as_tensor(label, device=pred.device).long().reshape(-1)
    if pred.ndim == 1:
        pred = pred.unsqueeze(0)
    if pred.shape[0] != label.shape[0]:
        raise LossValidationError("batch size mismatch between pred and label")
    if from_logits:
        return F.cross_entropy(pred, label)
    logp = torch.log(pred.clamp_min(_EPS))
    return -logp.gather(1, label.unsqueeze(1)).mean()


def dice_loss(pred, target, eps: float = 1e-5):
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), pooled over every element given."""
    if pred.shape != target.shape:
        raise LossValidationError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} disagree")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + eps) / (pred.sum() + target.sum() + eps)


@dataclass
class CMGLossWeights:
    l1: float = 1.0
    l2: float = 1.0
    cls: float = 1.0

    def __post_init__(self):
        if min(self.l1, self.l2, self.cls) < 0:
            raise LossValidationError("loss weights must be >= 0")


def cmg_loss(cf, pseudo_pred, flipped_label, weights: CMGLossWeights | None = None, from_logits: bool = False):
    """Sparsity (L1 + L2 of the CF map) plus classification loss of the pseudo patch
    against the flipped label."""
    w = weights or CMGLossWeights()
    cls_term = categorical_cross_entropy(pseudo_pred, flipped_label, from_logits=from_logits)
    return w.l1 * cf.abs().mean() + w.l2 * (cf**2).mean() + w.cls * cls_term


# ---------------------------------------------------------------- pseudo patches

REMOVED, SEEDED = "removed", "seeded"


@dataclass
class PseudoPatch:
    data: object
    direction: str


def transform_patch(patch, cf, direction: str) -> PseudoPatch:
    """Subtract (``removed``) or add (``seeded``) a non-negative CF map."""
    if direction not in (REMOVED, SEEDED):
        raise LossValidationError(f"direction must be {REMOVED!r} or {SEEDED!r}")
    if getattr(patch, "shape", None) != getattr(cf, "shape", None):
        raise LossValidationError("patch and CF map shapes differ")
    if bool((cf < 0).any()):
        raise LossValidationError("CF map has negative entries")
    out = patch - cf if direction == REMOVED else patch + cf
    return PseudoPatch(out, direction)


# ---------------------------------------------------------------- cohort split


def split_cohort(subjects, ratios=(0.7, 0.15, 0.15), seed: int = 0):
    """Subject-level train/val/test partition; val and test sizes are floored, train
    takes the remainder."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    subjects = list(subjects)
    n = len(subjects)
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    val = [subjects[i] for i in order[:n_val]]
    test = [subjects[i] for i in order[n_val:n_val + n_test]]
    train = [subjects[i] for i in order[n_val + n_test:]]
    return train, val, test


# ---------------------------------------------------------------- stage training


@dataclass
class StageConfig:
    stage: str
    lr_initial: float = 1e-3
    lr_final: float = 1e-5
    epochs: int = 20
    batch_size: int = 16
    loss_weights: dict = field(default_factory=lambda: {"l1": 1.0, "l2": 1.0, "cls": 1.0})
    seed: int = 0
    network: dict = field(default_factory=dict)
    fusion: str = "t1+sp+cf"
    warm_start: bool = True
    sparsity_warmup: int = 0  # cmg: epochs over which l1/l2 ramp up from 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.sparsity_warmup < 0:
            raise ValueError("sparsity_warmup must be >= 0")
        if not (0 < self.lr_final <= self.lr_initial):
            raise ValueError("learning rates must satisfy 0 < final <= initial")
        w = CMGLossWeights(**self.loss_weights)
        if self.stage == "cmg" and w.cls <= 0:
            raise ValueError("cmg training needs a positive classification weight")

    def lr_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.lr_initial
        return self.lr_initial + (self.lr_final - self.lr_initial) * epoch / (self.epochs - 1)

    def loss_weights_at(self, epoch: int) -> CMGLossWeights:
        w = CMGLossWeights(**self.loss_weights)
        if self.sparsity_warmup and epoch < self.sparsity_warmup:
            # starts above zero: an unpenalized first epoch grows a diffuse map that the
            # later penalty kills wholesale through the output ReLU
            ramp = (epoch + 1) / (self.sparsity_warmup + 1)
            w = CMGLossWeights(w.l1 * ramp, w.l2 * ramp, w.cls)
        return w

    def network_spec(self) -> nw.NetworkSpec:
        d = dict(self.network)
        d["kind"] = self.stage
        if self.stage == "tseg":
            d.update(in_channels=1, out_channels=4)
        elif self.stage == "cls":
            d.update(in_channels=1, out_channels=2)
        elif self.stage == "cmg":
            d.update(in_channels=1, out_channels=1)
        else:
            d.update(in_channels=nw.fusion_channels(self.fusion), out_channels=1)
            d.setdefault("variant", "dunet_d1")
        return nw.NetworkSpec(**d)

    def checkpoint_stage(self) -> str:
        return f"pseg_{nw.fusion_tag(self.fusion)}" if self.stage == "pseg" else self.stage

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageResult:
    model: torch.nn.Module
    spec: nw.NetworkSpec
    best_epoch: int
    history: list
    checkpoint: Path | None


def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _to_cl(x):
    return x.contiguous(memory_format=CHANNELS_LAST) if x.ndim == 5 else x


def stack(patches: list[Patch], channel: str, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(p.data[channel]) for p in patches])
    return torch.from_numpy(arr).to(dtype)


def labels_of(patches) -> torch.Tensor:
    return torch.tensor([POSITIVE_INDEX if p.label == POSITIVE else NEGATIVE_INDEX for p in patches])


@torch.no_grad()
def run_batched(fn, x: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    outs = [fn(_to_cl(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
    return torch.cat(outs).contiguous()


def fused_inputs(t1: torch.Tensor, tseg, cmg, fusion, batch_size: int = 16) -> torch.Tensor:
    """Channel-wise (t1, SP map, CF map at switch=remove) input for the lesion network."""
    names = nw.parse_fusion(fusion)
    sp = run_batched(tseg, t1, batch_size) if "sp" in names else None
    cf = run_batched(lambda x: cmg(x, nw.SwitchState.REMOVE), t1, batch_size) if "cf" in names else None
    return nw.fuse(t1, sp, cf, names)


def _freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _tissue_dice(pred_labels, target, classes=(1, 2, 3)):
    scores = []
    for c in classes:
        p, t = pred_labels == c, target == c
        denom = p.sum() + t.sum()
        if denom > 0:
            scores.append(float(2 * (p & t).sum()) / float(denom))
    return float(np.mean(scores)) if scores else 1.0


class _StageRunner:
    def __init__(self, cfg: StageConfig, frozen: dict):
        self.cfg = cfg
        self.frozen = frozen
        self.epoch = 0

    def prepare(self, patches):
        raise NotImplementedError

    def loss(self, model, batch):
        raise NotImplementedError

    def evaluate(self, model, data):
        raise NotImplementedError

    def score(self, val_loss, val_metric):
        """Higher is better; picks the checkpointed epoch."""
        return val_metric


class _TsegRunner(_StageRunner):
    def prepare(self, patches):
        return {"x": stack(patches, "t1").unsqueeze(1), "y": stack(patches, "tissue", torch.long)}

    def loss(self, model, b):
        return voxel_cross_entropy(model.logits(_to_cl(b["x"])), b["y"], from_logits=True)

    def evaluate(self, model, d):
        probs = run_batched(model, d["x"])
        loss = float(voxel_cross_entropy(probs, d["y"]))
        return loss, _tissue_dice(probs.argmax(1).numpy(), d["y"].numpy())


class _ClsRunner(_StageRunner):
    def prepare(self, patches):
        return {"x": stack(patches, "t1").unsqueeze(1), "y": labels_of(patches)}

    def loss(self, model, b):
        return categorical_cross_entropy(model.logits(_to_cl(b["x"])), b["y"], from_logits=True)

    def evaluate(self, model, d):
        probs = run_batched(model, d["x"])
        return float(categorical_cross_entropy(probs, d["y"])), float((probs.argmax(1) == d["y"]).float().mean())


class _CmgRunner(_StageRunner):
    def prepare(self, patches):
        x = stack(patches, "t1").unsqueeze(1)
        cls = self.frozen["cls"]
        decided = run_batched(cls, x).argmax(1)
        # the classifier's own decision picks the switch: positive -> remove (0), negative -> seed (1)
        switch = (decided == NEGATIVE_INDEX).float()
        return {"x": x, "switch": switch, "flipped": 1 - decided}

    def _pseudo(self, model, x, switch):
        cf = model(_to_cl(x), switch)
        sign = (2 * switch - 1).view(-1, 1, 1, 1, 1)
        return cf, x + sign * cf

    def loss(self, model, b):
        cf, pseudo = self._pseudo(model, b["x"], b["switch"])
        logits = self.frozen["cls"].logits(_to_cl(pseudo))
        return cmg_loss(cf, logits, b["flipped"], self.cfg.loss_weights_at(self.epoch), from_logits=True)

    @torch.no_grad()
    def evaluate(self, model, d):
        losses, flips, n = [], 0, 0
        cls = self.frozen["cls"]
        w = CMGLossWeights(**self.cfg.loss_weights)
        for i in range(0, len(d["x"]), 16):
            x, s, f = d["x"][i:i + 16], d["switch"][i:i + 16], d["flipped"][i:i + 16]
            cf, pseudo = self._pseudo(model, x, s)
            probs = cls(_to_cl(pseudo))
            losses.append(float(cmg_loss(cf, probs, f, w)) * len(x))
            flips += int((probs.argmax(1) == f).sum())
            n += len(x)
        return sum(losses) / n, flips / n

    def score(self, val_loss, val_metric):
        # a map that darkens the whole patch flips every decision; the full-weight loss
        # also charges for the sparsity it gives up
        return -val_loss


class _PsegRunner(_StageRunner):
    def prepare(self, patches):
        t1 = stack(patches, "t1").unsqueeze(1)
        x = fused_inputs(t1, self.frozen["tseg"], self.frozen["cmg"], self.cfg.fusion)
        return {"x": x, "y": stack(patches, "lesion").unsqueeze(1)}

    def loss(self, model, b):
        return dice_loss(model(_to_cl(b["x"])), b["y"])

    def evaluate(self, model, d):
        probs = run_batched(model, d["x"])
        pred = probs >= 0.5
        y = d["y"].bool()
        inter = float((pred & y).sum())
        denom = float(pred.sum() + y.sum())
        return float(dice_loss(probs, d["y"])), (2 * inter / denom if denom else 1.0)


_RUNNERS = {"tseg": _TsegRunner, "cls": _ClsRunner, "cmg": _CmgRunner, "pseg": _PsegRunner}


def train_stage(
    cfg: StageConfig,
    data: dict,
    frozen_models: dict | None = None,
    checkpoint_dir=None,
    log_path=None,
) -> StageResult:
    """Train one stage with Adam and a linearly decaying learning rate.

    ``data`` holds ``"train"`` and ``"val"`` patch lists. ``frozen_models`` maps stage
    names to already trained networks; they are put in eval mode with gradients off and
    are verified unchanged afterwards. The best-validation-metric weights are returned and,
    when ``checkpoint_dir`` is given, saved as ``{stage}.{epoch}.ckpt``.
    """
    frozen_models = dict(frozen_models or {})
    missing = [s for s in REQUIRED_FROZEN[cfg.stage] if frozen_models.get(s) is None]
    if missing:
        raise StagingError(f"stage {cfg.stage!r} needs trained {', '.join(missing)} first")
    if not data.get("train") or not data.get("val"):
        raise TrainingError("both train and val patch lists must be non-empty")
    for m in frozen_models.values():
        if m is not None:
            _freeze(m).to(memory_format=CHANNELS_LAST)
    frozen_hashes = {k: nw.parameter_hash(m) for k, m in frozen_models.items() if m is not None}

    set_determinism(cfg.seed)
    spec = cfg.network_spec()
    model = nw.build(spec)
    if cfg.stage == "cls" and cfg.warm_start and frozen_models.get("tseg") is not None:
        tseg = frozen_models["tseg"]
        if nw.encoder_matches(spec, tseg.spec):
            model.encoder.load_state_dict(tseg.encoder.state_dict())
    model = model.to(memory_format=CHANNELS_LAST)

    runner = _RUNNERS[cfg.stage](cfg, frozen_models)
    train = runner.prepare(data["train"])
    val = runner.prepare(data["val"])
    n = len(next(iter(train.values())))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_initial)
    rng = np.random.default_rng(cfg.seed)
    stage_name = cfg.checkpoint_stage()
    log_file = open(log_path, "a") if log_path else None

    history, best = [], None
    try:
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            runner.epoch = epoch
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(order[start:start + cfg.batch_size])
                if len(idx) < 2 and n >= 2:
                    continue  # batch norm needs more than one sample
                batch = {k: v[idx] for k, v in train.items()}
                loss = runner.loss(model, batch)
                if not torch.isfinite(loss):
                    raise TrainingError(f"{stage_name}: non-finite loss {loss.item()} at epoch {epoch}, batch offset {start}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
            model.eval()
            val_loss, val_metric = runner.evaluate(model, val)
            rec = {
                "stage": stage_name,
                "epoch": epoch,
                "train_loss": total / n,
                "val_loss": val_loss,
                "val_metric": val_metric,
                "lr": lr,
            }
            history.append(rec)
            log.info(json.dumps(rec))
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            score = runner.score(val_loss, val_metric)
            if best is None or score > best[0]:
                best = (score, epoch, copy.deepcopy(model.state_dict()), val_metric)
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best[2])
    model.eval()
    for k, m in frozen_models.items():
        if m is not None and nw.parameter_hash(m) != frozen_hashes[k]:
            raise TrainingError(f"frozen model {k!r} changed during {stage_name} training")
    ckpt = None
    if checkpoint_dir is not None:
        ckpt = nw.save_checkpoint(
            model, spec, checkpoint_dir, stage_name, best[1], cfg.seed,
            extra={"val_metric": best[3], "fusion": nw.fusion_tag(cfg.fusion) if cfg.stage == "pseg" else None},
        )
    return StageResult(model, spec, best[1], history, ckpt)
