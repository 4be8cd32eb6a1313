"""Synthetic infant-brain phantoms with tissue labels and punctate WM lesions.

Geometry is a stack of deformed concentric ellipsoids (background, outer CSF shell,
GM ribbon, WM interior) with two lateral ventricles carved out of the WM. Lesions are
small bright ellipsoidal blobs placed in WM close to the ventricles.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import DEFAULT_SPACING, Volume3D, read_volume, write_volume

BACKGROUND, CSF, GM, WM = 0, 1, 2, 3
TISSUE_NAMES = ("background", "csf", "gm", "wm")
GROUPS = ("control", "pwml")

# 26-connectivity; lesions are kept at least one voxel apart under it
CONNECTIVITY = np.ones((3, 3, 3), dtype=bool)


class PhantomConfigError(ValueError):
    pass


def _default_means():
    return {"background": 0.0, "csf": 0.2, "gm": 0.6, "wm": 0.45, "lesion": 0.9}


@dataclass
class PhantomConfig:
    volume_shape: tuple[int, int, int] = (130, 130, 170)
    voxel_spacing: tuple[float, float, float] = DEFAULT_SPACING
    lesion_count_range: tuple[int, int] = (2, 8)
    lesion_size_range: tuple[int, int] = (3, 40)
    lesion_max_distance: float = 10.0
    intensity_means: dict = field(default_factory=_default_means)
    intensity_noise_sigma: float = 0.04
    bias_amplitude: float = 0.08
    deformation_amplitude: float = 0.06
    blur_sigma: float = 0.6
    rng_seed: int = 0

    def __post_init__(self):
        self.volume_shape = tuple(int(s) for s in self.volume_shape)
        self.voxel_spacing = tuple(float(s) for s in self.voxel_spacing)
        self.lesion_count_range = tuple(int(v) for v in self.lesion_count_range)
        self.lesion_size_range = tuple(int(v) for v in self.lesion_size_range)
        self.validate()

    def validate(self):
        if len(self.volume_shape) != 3 or any(s < 64 for s in self.volume_shape):
            raise PhantomConfigError(f"volume_shape must be three entries >= 64, got {self.volume_shape}")
        if len(self.voxel_spacing) != 3 or any(s <= 0 for s in self.voxel_spacing):
            raise PhantomConfigError(f"invalid voxel_spacing {self.voxel_spacing}")
        lo, hi = self.lesion_size_range
        if lo < 1 or hi < lo:
            raise PhantomConfigError(f"invalid lesion_size_range {self.lesion_size_range}")
        clo, chi = self.lesion_count_range
        if clo < 1 or chi < clo:
            raise PhantomConfigError(f"invalid lesion_count_range {self.lesion_count_range}")
        if not self.intensity_means:
            raise PhantomConfigError("intensity_means is empty")
        missing = {*TISSUE_NAMES, "lesion"} - set(self.intensity_means)
        if missing:
            raise PhantomConfigError(f"intensity_means missing {sorted(missing)}")
        m = self.intensity_means
        if not (m["wm"] < m["gm"] and m["wm"] < m["lesion"]):
            raise PhantomConfigError("intensity ordering requires wm < gm and wm < lesion")
        if self.intensity_noise_sigma < 0:
            raise PhantomConfigError("intensity_noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise PhantomConfigError(f"unknown phantom config keys {sorted(unknown)}")
        return cls(**known)


@dataclass
class PhantomSubject:
    t1: Volume3D
    tissue: Volume3D
    lesions: Volume3D
    subject_id: str
    group: str
    seed: int = 0


def _smooth_field(rng, shape, coarse=6):
    """Random field in roughly [-1, 1], smooth at the scale of shape/coarse."""
    grid = rng.uniform(-1.0, 1.0, size=(coarse,) * 3)
    zoom = [s / coarse for s in shape]
    out = ndimage.zoom(grid, zoom, order=3, mode="nearest")
    return out[: shape[0], : shape[1], : shape[2]]


def _tissue_geometry(config: PhantomConfig, rng) -> np.ndarray:
    shape = config.volume_shape
    center = np.array([(s - 1) / 2.0 for s in shape])
    semi = np.array([0.45 * s for s in shape])
    center = center + rng.uniform(-0.02, 0.02, 3) * np.array(shape)
    semi = semi * rng.uniform(0.95, 1.0, 3)
    coords = np.indices(shape, dtype=np.float32)
    u = [(coords[i] - center[i]) / semi[i] for i in range(3)]
    radius = np.sqrt(u[0] ** 2 + u[1] ** 2 + u[2] ** 2)
    deform = 1.0 + config.deformation_amplitude * _smooth_field(rng, shape)
    radius = radius * deform

    tissue = np.full(shape, WM, dtype=np.uint8)
    tissue[radius > 0.78] = GM
    tissue[radius > 0.92] = CSF
    tissue[radius > 1.0] = BACKGROUND

    # two lateral ventricles (elongated along axis 1)
    offset = rng.uniform(0.14, 0.2)
    v_semi = np.array([0.09, 0.32, 0.14]) * rng.uniform(0.9, 1.1, 3)
    for side in (-1.0, 1.0):
        v = np.sqrt(
            ((u[0] - side * offset) / v_semi[0]) ** 2
            + ((u[1] + 0.05) / v_semi[1]) ** 2
            + (u[2] / v_semi[2]) ** 2
        ) * deform
        tissue[v <= 1.0] = CSF
    return tissue


def _ventricle_mask(tissue: np.ndarray) -> np.ndarray:
    csf = tissue == CSF
    labels, n = ndimage.label(csf, structure=CONNECTIVITY)
    # outer CSF shell touches background; ventricles do not
    near_bg = ndimage.binary_dilation(tissue == BACKGROUND, structure=CONNECTIVITY)
    shell_ids = np.unique(labels[near_bg & csf])
    return csf & ~np.isin(labels, shell_ids)


def _place_lesions(config: PhantomConfig, tissue: np.ndarray, rng) -> np.ndarray:
    shape = tissue.shape
    wm = tissue == WM
    ventricles = _ventricle_mask(tissue)
    dist = ndimage.distance_transform_edt(~ventricles, sampling=1.0)
    zone = np.argwhere(wm & (dist <= config.lesion_max_distance))
    if len(zone) == 0:
        raise PhantomConfigError("no WM voxels near the ventricles; cannot place lesions")

    lo, hi = config.lesion_size_range
    n_target = int(rng.integers(config.lesion_count_range[0], config.lesion_count_range[1] + 1))
    lesions = np.zeros(shape, dtype=bool)
    forbidden = np.zeros(shape, dtype=bool)
    placed = 0
    for _ in range(200 * n_target):
        if placed >= n_target:
            break
        size = int(rng.integers(lo, hi + 1))
        r_eq = (3.0 * size / (4.0 * np.pi)) ** (1.0 / 3.0)
        radii = r_eq * rng.uniform(0.75, 1.3, 3)
        c = zone[rng.integers(len(zone))]
        ext = int(np.ceil(radii.max())) + 1
        lo_b = np.maximum(c - ext, 0)
        hi_b = np.minimum(c + ext + 1, shape)
        sl = tuple(slice(a, b) for a, b in zip(lo_b, hi_b))
        local = np.indices(hi_b - lo_b, dtype=np.float32)
        d2 = sum(((local[i] + lo_b[i] - c[i]) / radii[i]) ** 2 for i in range(3))
        blob = (d2 <= 1.0) & wm[sl]
        if not blob.any():
            continue
        comps, _ = ndimage.label(blob, structure=CONNECTIVITY)
        cid = comps[tuple(c - lo_b)]
        if cid == 0:
            continue
        blob = comps == cid
        n_vox = int(blob.sum())
        if not lo <= n_vox <= hi:
            continue
        if (forbidden[sl] & blob).any():
            continue
        lesions[sl] |= blob
        grown = ndimage.binary_dilation(blob, structure=CONNECTIVITY, iterations=2)
        forbidden[sl] |= grown
        placed += 1
    if placed == 0:
        raise PhantomConfigError("failed to place any lesion")
    return lesions


def _render_t1(config: PhantomConfig, tissue, lesions, rng) -> np.ndarray:
    means = config.intensity_means
    lut = np.array([means[name] for name in TISSUE_NAMES], dtype=np.float32)
    img = lut[tissue]
    img[lesions] = means["lesion"]
    if config.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, config.blur_sigma)
    bias = 1.0 + config.bias_amplitude * _smooth_field(rng, tissue.shape, coarse=4)
    img = img * bias
    img = img + rng.normal(0.0, config.intensity_noise_sigma, size=img.shape)
    return img.astype(np.float32)


def generate_subject(config: PhantomConfig, group: str, seed: int, subject_id: str | None = None) -> PhantomSubject:
    config.validate()
    if group not in GROUPS:
        raise PhantomConfigError(f"group must be one of {GROUPS}, got {group!r}")
    rng = np.random.default_rng([config.rng_seed, int(seed), GROUPS.index(group)])
    tissue = _tissue_geometry(config, rng)
    if group == "pwml":
        lesions = _place_lesions(config, tissue, rng)
    else:
        lesions = np.zeros(tissue.shape, dtype=bool)
    t1 = _render_t1(config, tissue, lesions, rng)
    sp = config.voxel_spacing
    return PhantomSubject(
        t1=Volume3D(t1, sp),
        tissue=Volume3D(tissue, sp),
        lesions=Volume3D(lesions.astype(np.uint8), sp),
        subject_id=subject_id or f"{group}-s{seed}",
        group=group,
        seed=int(seed),
    )


def generate_cohort(config: PhantomConfig, n_control: int, n_pwml: int, seed: int) -> list[PhantomSubject]:
    if n_control < 0 or n_pwml < 0:
        raise ValueError("subject counts must be >= 0")
    seeds = np.random.SeedSequence(int(seed)).generate_state(n_control + n_pwml, dtype=np.uint32)
    subjects = []
    for i in range(n_control):
        subjects.append(generate_subject(config, "control", int(seeds[i]), f"control-{i:03d}"))
    for j in range(n_pwml):
        subjects.append(generate_subject(config, "pwml", int(seeds[n_control + j]), f"pwml-{j:03d}"))
    return subjects


def write_cohort(subjects: list[PhantomSubject], root) -> Path:
    """Write subjects as NIfTI files plus ``manifest.json`` under ``root``."""
    root = Path(root)
    entries = []
    for s in subjects:
        paths = {}
        for name in ("t1", "tissue", "lesions"):
            rel = f"{s.subject_id}/{name}.nii.gz"
            write_volume(getattr(s, name), root / rel)
            paths[name] = rel
        entries.append({"subject_id": s.subject_id, "group": s.group, "paths": paths, "seed": s.seed})
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return manifest


def read_cohort(root, subject_ids=None) -> list[PhantomSubject]:
    root = Path(root)
    entries = json.loads((root / "manifest.json").read_text())
    out = []
    for e in entries:
        if subject_ids is not None and e["subject_id"] not in subject_ids:
            continue
        vols = {k: read_volume(root / p) for k, p in e["paths"].items()}
        out.append(PhantomSubject(vols["t1"], vols["tissue"], vols["lesions"], e["subject_id"], e["group"], e["seed"]))
    return out
