"""Volume container and NIfTI-1 serialization."""

from __future__ import annotations

import gzip
import io
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

DEFAULT_SPACING = (0.9375, 0.9375, 1.0)


class VolumeFormatError(ValueError):
    """Raised when a volume file cannot be decoded."""


@dataclass
class Volume3D:
    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"volume must be 3D (or 3D + channels), got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three entries")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _affine(spacing) -> np.ndarray:
    return np.diag([*spacing, 1.0]).astype(np.float64)


def to_nifti_bytes(volume: Volume3D) -> bytes:
    """Encode as an uncompressed NIfTI-1 single file.

    Label maps (bool / integer data) are stored as uint8, everything else as float32.
    """
    data = volume.data
    if data.dtype == bool or np.issubdtype(data.dtype, np.integer):
        if data.size and (data.min() < 0 or data.max() > 255):
            raise ValueError("integer volumes must fit in uint8")
        data = data.astype(np.uint8)
    else:
        data = data.astype(np.float32)
    img = nib.Nifti1Image(data, _affine(volume.spacing))
    img.header.set_zooms(volume.spacing + (1.0,) * (data.ndim - 3))
    img.header.set_xyzt_units("mm")
    return img.to_bytes()


def write_volume(volume: Volume3D, path) -> Path:
    path = Path(path)
    raw = to_nifti_bytes(volume)
    if path.name.endswith(".gz"):
        # mtime pinned so identical volumes give identical file bytes
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return path


def read_volume(path) -> Volume3D:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"{path}: cannot read ({exc})") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, OSError, zlib.error) as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return from_nifti_bytes(raw, source=str(path))


def from_nifti_bytes(raw: bytes, source: str = "<bytes>") -> Volume3D:
    if len(raw) < 348:
        raise VolumeFormatError(
            f"{source}: header truncated at offset {len(raw)}, need 348 bytes"
        )
    hdr_size = int.from_bytes(raw[:4], "little")
    if hdr_size != 348 and int.from_bytes(raw[:4], "big") != 348:
        raise VolumeFormatError(f"{source}: field sizeof_hdr at offset 0 is {hdr_size}, expected 348")
    if raw[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{source}: field magic at offset 344 is {raw[344:348]!r}")
    try:
        header = nib.Nifti1Header.from_fileobj(io.BytesIO(raw))
    except Exception as exc:
        raise VolumeFormatError(f"{source}: invalid header ({exc})") from exc
    shape = header.get_data_shape()
    offset = int(header.get_data_offset())
    itemsize = header.get_data_dtype().itemsize
    expected = offset + int(np.prod(shape)) * itemsize
    if len(raw) < expected:
        raise VolumeFormatError(
            f"{source}: voxel data truncated, expected {expected} bytes "
            f"(vox_offset={offset}, shape={shape}), got {len(raw)}"
        )
    img = nib.Nifti1Image.from_bytes(raw)
    data = np.asanyarray(img.dataobj)
    if header.get_data_dtype() == np.float32:
        data = data.astype(np.float32, copy=False)
    spacing = tuple(float(z) for z in header.get_zooms()[:3])
    return Volume3D(np.ascontiguousarray(data), spacing)

