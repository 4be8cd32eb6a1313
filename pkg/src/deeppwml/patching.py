"""Training-patch sampling, sliding-window plans and overlap-averaged reconstruction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .phantom import WM, PhantomSubject, _ventricle_mask
from .volume import Volume3D

PATCH_SIZE = 32
POSITIVE, NEGATIVE, UNLABELED = "positive", "negative", "unlabeled"


class PatchValidationError(ValueError):
    pass


class InfeasibleSamplingError(RuntimeError):
    pass


@dataclass
class Patch:
    data: dict[str, np.ndarray]
    origin: tuple[int, int, int]
    label: str = UNLABELED
    subject_id: str = ""

    def __post_init__(self):
        shapes = {v.shape for v in self.data.values()}
        if len(shapes) > 1:
            raise PatchValidationError(f"channels disagree in shape: {shapes}")
        if "lesion" in self.data and self.label != UNLABELED:
            if (self.label == POSITIVE) != bool(np.any(self.data["lesion"])):
                raise PatchValidationError("label inconsistent with lesion channel")


def label_patch(lesion_crop: np.ndarray) -> str:
    crop = np.asarray(lesion_crop)
    if crop.dtype != bool and not np.isin(crop, (0, 1)).all():
        raise PatchValidationError("lesion crop must be binary")
    return POSITIVE if np.count_nonzero(crop) > 0 else NEGATIVE


def crop(volume: np.ndarray, origin, size: int = PATCH_SIZE) -> np.ndarray:
    x, y, z = origin
    return volume[..., x:x + size, y:y + size, z:z + size]


def _extract(subject: PhantomSubject, origin, size) -> Patch:
    les = crop(subject.lesions.data, origin, size)
    return Patch(
        data={
            "t1": crop(subject.t1.data, origin, size).astype(np.float32),
            "tissue": crop(subject.tissue.data, origin, size),
            "lesion": les,
        },
        origin=tuple(int(o) for o in origin),
        label=label_patch(les),
        subject_id=subject.subject_id,
    )


def _origin_around(center, shape, size, rng, jitter):
    shift = rng.integers(-jitter, jitter + 1, 3) if jitter > 0 else np.zeros(3, dtype=int)
    origin = np.asarray(center) + shift - size // 2
    return tuple(int(np.clip(o, 0, s - size)) for o, s in zip(origin, shape))


def sample_training_patches(
    subject: PhantomSubject,
    n_pos: int,
    n_neg: int,
    seed: int,
    size: int = PATCH_SIZE,
    jitter: int = 15,
    max_tries: int = 500,
) -> list[Patch]:
    """Sample labelled patches from one subject.

    Positives are centred on a random lesion voxel plus uniform jitter; the default of
    15 lets that voxel land anywhere in a 32^3 window, as it can at inference. Half of the
    negatives are centred near the ventricles (where lesions live) and half anywhere
    in the brain, so position alone does not separate the classes; when no lesion-free
    window fits there, the search widens to the whole volume.
    """
    shape = subject.t1.shape
    if any(s < size for s in shape):
        raise PatchValidationError(f"volume {shape} smaller than patch size {size}")
    lesions = subject.lesions.data.astype(bool)
    if n_pos > 0 and not lesions.any():
        raise InfeasibleSamplingError(f"{subject.subject_id}: no lesion voxels, cannot sample positives")
    rng = np.random.default_rng([int(seed), subject.seed])
    patches = []

    lesion_vox = np.argwhere(lesions)
    for _ in range(n_pos):
        for _ in range(max_tries):
            origin = _origin_around(lesion_vox[rng.integers(len(lesion_vox))], shape, size, rng, jitter)
            p = _extract(subject, origin, size)
            if p.label == POSITIVE:
                patches.append(p)
                break
        else:
            raise InfeasibleSamplingError(f"{subject.subject_id}: could not place a positive patch")

    tissue = subject.tissue.data
    brain = np.argwhere(tissue > 0)
    near = np.argwhere((tissue == WM) & (ndimage.distance_transform_edt(~_ventricle_mask(tissue)) <= 10))
    if len(near) == 0:
        near = brain
    anywhere = np.argwhere(np.ones(shape, dtype=bool)[::4, ::4, ::4]) * 4
    for k in range(n_neg):
        pools = (near, brain, anywhere) if k % 2 == 0 else (brain, anywhere)
        for pool in pools:
            hit = _sample_negative(subject, lesions, pool, shape, size, rng, jitter, max_tries)
            if hit is not None:
                patches.append(hit)
                break
        else:
            raise InfeasibleSamplingError(f"{subject.subject_id}: could not place a negative patch")
    return patches


def _sample_negative(subject, lesions, pool, shape, size, rng, jitter, max_tries):
    for _ in range(max_tries):
        origin = _origin_around(pool[rng.integers(len(pool))], shape, size, rng, jitter)
        if not crop(lesions, origin, size).any():
            return _extract(subject, origin, size)
    return None


@dataclass
class SlidingWindowPlan:
    volume_shape: tuple[int, int, int]
    patch_size: int = PATCH_SIZE
    stride: int = 16
    origins: list[tuple[int, int, int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "volume_shape": list(self.volume_shape),
                "patch_size": self.patch_size,
                "stride": self.stride,
                "origins": [list(o) for o in self.origins],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SlidingWindowPlan":
        d = json.loads(text)
        return cls(tuple(d["volume_shape"]), d["patch_size"], d["stride"], [tuple(o) for o in d["origins"]])

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.volume_shape, dtype=np.int32)
        for o in self.origins:
            crop(count, o, self.patch_size)[...] += 1
        return count


def _axis_starts(dim: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, dim - size + 1, stride))
    if starts[-1] != dim - size:
        starts.append(dim - size)
    return starts


def plan_sliding_window(volume_shape, patch_size: int = PATCH_SIZE, stride: int = 16) -> SlidingWindowPlan:
    volume_shape = tuple(int(s) for s in volume_shape)
    if len(volume_shape) != 3:
        raise PatchValidationError("volume_shape must have three entries")
    if not 1 <= stride <= patch_size:
        raise PatchValidationError(f"stride must be in [1, patch_size={patch_size}] for full coverage, got {stride}")
    if any(patch_size > s for s in volume_shape):
        raise PatchValidationError(f"patch size {patch_size} exceeds volume shape {volume_shape}")
    axes = [_axis_starts(s, patch_size, stride) for s in volume_shape]
    origins = [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]
    return SlidingWindowPlan(volume_shape, patch_size, stride, origins)


def _order_ties(items):
    """Sort runs sharing an origin by their values' bytes, in place."""
    i = 0
    while i < len(items):
        j = i + 1
        while j < len(items) and items[j][0] == items[i][0]:
            j += 1
        if j - i > 1:
            items[i:j] = sorted(items[i:j], key=lambda ov: ov[1].tobytes())
        i = j


def reconstruct_average(patch_values, volume_shape, spacing=None) -> Volume3D:
    """Average overlapping window outputs into a full volume.

    ``patch_values`` is a sequence of ``(origin, array)`` where array is ``(s, s, s)`` or
    ``(C, s, s, s)``. Voxels no window touches are 0 and listed in ``meta["uncovered"]``.
    Sums are float64, so float32 window values that agree on a voxel average back to
    exactly that value.
    """
    # canonical order makes the float sums independent of input order
    patch_values = sorted(
        ((tuple(int(o) for o in origin), np.asarray(v)) for origin, v in patch_values), key=lambda ov: ov[0]
    )
    _order_ties(patch_values)
    if not patch_values:
        raise PatchValidationError("no patches to reconstruct from")
    volume_shape = tuple(int(s) for s in volume_shape)
    lead = np.asarray(patch_values[0][1]).shape[:-3]
    total = np.zeros(lead + volume_shape, dtype=np.float64)
    count = np.zeros(volume_shape, dtype=np.int64)
    for origin, values in patch_values:
        size = values.shape[-1]
        if any(o < 0 or o + size > s for o, s in zip(origin, volume_shape)):
            raise PatchValidationError(f"window at {origin} leaves the volume {volume_shape}")
        crop(total, origin, size)[...] += values
        crop(count, origin, size)[...] += 1
    covered = count > 0
    out = np.where(covered, total / np.maximum(count, 1), 0.0)
    vol = Volume3D(out, spacing) if spacing is not None else Volume3D(out)
    vol.meta["coverage"] = count
    vol.meta["uncovered"] = int((~covered).sum())
    return vol
