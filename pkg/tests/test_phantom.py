import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from scipy import ndimage

from deeppwml.phantom import (
    CONNECTIVITY,
    GM,
    WM,
    PhantomConfig,
    PhantomConfigError,
    generate_cohort,
    generate_subject,
    read_cohort,
    write_cohort,
)
from deeppwml.volume import Volume3D, VolumeFormatError, read_volume, write_volume

SMALL = dict(volume_shape=(64, 64, 64))


def test_default_config_matches_acquisition_geometry():
    cfg = PhantomConfig()
    assert cfg.volume_shape == (130, 130, 170)
    assert cfg.voxel_spacing == (0.9375, 0.9375, 1.0)
    assert cfg.lesion_size_range == (3, 40)


def test_control_subject_is_lesion_free(control_subject):
    assert control_subject.lesions.data.sum() == 0
    assert control_subject.group == "control"


def test_generation_is_deterministic(small_config):
    a = generate_subject(small_config, "pwml", 7)
    b = generate_subject(small_config, "pwml", 7)
    for name in ("t1", "tissue", "lesions"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)


def test_seed_changes_output(small_config):
    a = generate_subject(small_config, "pwml", 7)
    b = generate_subject(small_config, "pwml", 8)
    assert not np.array_equal(a.t1.data, b.t1.data)


def test_lesions_brighter_than_white_matter(small_config):
    s = generate_subject(small_config, "pwml", 3)
    les = s.lesions.data.astype(bool)
    wm = (s.tissue.data == WM) & ~les
    assert s.t1.data[les].mean() > s.t1.data[wm].mean()


def test_shapes_and_spacing_agree(pwml_subject):
    s = pwml_subject
    assert s.t1.shape == s.tissue.shape == s.lesions.shape == (64, 64, 64)
    assert s.t1.spacing == s.tissue.spacing == s.lesions.spacing


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**31 - 1), group=st.sampled_from(["control", "pwml"]))
def test_subject_invariants(seed, group):
    cfg = PhantomConfig(**SMALL)
    s = generate_subject(cfg, group, seed)
    les = s.lesions.data.astype(bool)
    tissue = s.tissue.data
    if group == "control":
        assert not les.any()
    else:
        assert les.any()
        assert (tissue[les] == WM).all()
        labels, n = ndimage.label(les, structure=CONNECTIVITY)
        sizes = ndimage.sum(les, labels, range(1, n + 1))
        lo, hi = cfg.lesion_size_range
        assert ((sizes >= lo) & (sizes <= hi)).all()
        assert s.t1.data[les].mean() > s.t1.data[(tissue == WM) & ~les].mean()
    t1 = s.t1.data
    assert t1[(tissue == WM) & ~les].mean() < t1[tissue == GM].mean()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(volume_shape=(63, 64, 64)),
        dict(intensity_means={}),
        dict(lesion_size_range=(0, 5)),
        dict(intensity_means={"background": 0, "csf": 0.2, "gm": 0.4, "wm": 0.5, "lesion": 0.8}),
    ],
)
def test_invalid_config_rejected(kwargs):
    with pytest.raises(PhantomConfigError):
        PhantomConfig(**kwargs)


def test_unknown_group_rejected(small_config):
    with pytest.raises(PhantomConfigError):
        generate_subject(small_config, "patients", 1)


def test_cohort_cardinality(small_config):
    subjects = generate_cohort(small_config, 4, 4, seed=1)
    assert len(subjects) == 8
    assert sum(s.group == "control" for s in subjects) == 4
    assert len({s.subject_id for s in subjects}) == 8


def test_single_pwml_cohort(small_config):
    (s,) = generate_cohort(small_config, 0, 1, seed=1)
    assert s.group == "pwml"


def test_cohort_sized_like_clinical_study(small_config):
    subjects = generate_cohort(small_config, 52, 47, seed=1)
    groups = [s.group for s in subjects]
    assert groups.count("control") == 52 and groups.count("pwml") == 47
    assert len({s.subject_id for s in subjects}) == 99


def test_cohort_seeds_derived_from_cohort_seed(small_config):
    a = generate_cohort(small_config, 1, 1, seed=5)
    b = generate_cohort(small_config, 1, 1, seed=5)
    c = generate_cohort(small_config, 1, 1, seed=6)
    assert [s.seed for s in a] == [s.seed for s in b]
    assert [s.seed for s in a] != [s.seed for s in c]


# ---- NIfTI round trip


def test_roundtrip_t1(tmp_path, pwml_subject):
    path = write_volume(pwml_subject.t1, tmp_path / "t1.nii.gz")
    back = read_volume(path)
    assert np.array_equal(back.data, pwml_subject.t1.data)
    assert back.data.dtype == np.float32
    assert back.spacing == (0.9375, 0.9375, 1.0)


def test_roundtrip_label_map_is_uint8(tmp_path, pwml_subject):
    back = read_volume(write_volume(pwml_subject.tissue, tmp_path / "tissue.nii.gz"))
    assert back.data.dtype == np.uint8
    assert np.array_equal(back.data, pwml_subject.tissue.data)


def test_uncompressed_roundtrip(tmp_path):
    v = Volume3D(np.arange(64, dtype=np.float32).reshape(4, 4, 4), (1.0, 2.0, 3.0))
    back = read_volume(write_volume(v, tmp_path / "v.nii"))
    assert np.array_equal(back.data, v.data) and back.spacing == (1.0, 2.0, 3.0)


def test_written_bytes_are_stable(tmp_path, pwml_subject):
    a = write_volume(pwml_subject.t1, tmp_path / "a.nii.gz").read_bytes()
    b = write_volume(pwml_subject.t1, tmp_path / "b.nii.gz").read_bytes()
    assert a == b


@pytest.mark.parametrize("suffix", [".nii.gz", ".nii"])
def test_truncated_file_is_format_error(tmp_path, pwml_subject, suffix):
    path = write_volume(pwml_subject.t1, tmp_path / f"t1{suffix}")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(VolumeFormatError):
        read_volume(path)


def test_truncated_header_reports_offset(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(VolumeFormatError, match="offset 100"):
        read_volume(path)


def test_bad_magic_reports_field(tmp_path):
    v = Volume3D(np.zeros((4, 4, 4), np.float32))
    path = write_volume(v, tmp_path / "v.nii")
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"xxxx"
    path.write_bytes(bytes(raw))
    with pytest.raises(VolumeFormatError, match="magic"):
        read_volume(path)


def test_cohort_manifest_roundtrip(tmp_path, small_config):
    subjects = generate_cohort(small_config, 1, 1, seed=2)
    manifest = write_cohort(subjects, tmp_path)
    entries = json.loads(manifest.read_text())
    assert {e["subject_id"] for e in entries} == {s.subject_id for s in subjects}
    assert all(set(e) == {"subject_id", "group", "paths", "seed"} for e in entries)
    back = read_cohort(tmp_path)
    for a, b in zip(subjects, back):
        assert np.array_equal(a.lesions.data, b.lesions.data)
        assert a.seed == b.seed and a.group == b.group
