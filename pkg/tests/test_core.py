import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from slicesr.core import (
    Frame,
    FrameSequence,
    InterpolationSample,
    TargetCoordinate,
    Volume,
    extract_slice,
    list_frame_dirs,
    load_frame_sequence,
    load_volume,
    normalize_intensities,
    resolve_data_path,
    save_frame_sequence,
    save_volume,
    to_grayscale,
)
from slicesr.errors import BoundsError, FormatError, ShapeError

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_normalize_examples():
    assert normalize_intensities([2, 4, 6]).tolist() == [0.0, 0.5, 1.0]
    assert normalize_intensities([5, 5, 5]).tolist() == [0.0, 0.0, 0.0]


def test_normalize_random_spans_unit_interval(rng):
    out = normalize_intensities(rng.normal(size=(7, 9, 3)) * 50 + 3)
    assert out.min() == 0.0 and out.max() == 1.0


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6), elements=finite))
def test_normalize_is_idempotent(arr):
    once = normalize_intensities(arr)
    assert 0.0 <= once.min() and once.max() <= 1.0
    np.testing.assert_allclose(normalize_intensities(once), once, atol=1e-6)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_normalize_rejects_non_finite(bad):
    with pytest.raises(ValueError, match="non-finite"):
        normalize_intensities([0.0, bad, 1.0])


def test_frame_and_volume_validate():
    with pytest.raises(ShapeError):
        Frame(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        Frame(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        FrameSequence.from_array(np.zeros((1, 4, 4)))
    with pytest.raises(ShapeError):
        FrameSequence((Frame(np.zeros((2, 2))), Frame(np.zeros((3, 3)))))


def test_core_types_are_read_only():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1.0


def test_volume_anisotropy_flag():
    assert Volume(np.zeros((2, 2, 2)), (0.4, 0.4, 4.0)).is_lr_along_z
    assert not Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)).is_lr_along_z


def test_target_coordinate():
    assert TargetCoordinate(1, 4).t == 0.25
    assert TargetCoordinate.from_fraction(0.4, 5).k == pytest.approx(2.0)
    for k, n in [(-1, 4), (5, 4), (1, 1)]:
        with pytest.raises(ValueError):
            TargetCoordinate(k, n)


def test_interpolation_sample_shapes():
    a, b = Frame(np.zeros((4, 4))), Frame(np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        InterpolationSample(a, b, TargetCoordinate(1, 2))


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz", ".raw"])
def test_volume_round_trip_is_bit_exact(tmp_path, rng, suffix):
    v = Volume(rng.random((8, 8, 8)), (0.4, 0.4, 4.0), "s")
    back = load_volume(save_volume(v, tmp_path / f"vol{suffix}"))
    assert np.array_equal(back.voxels, v.voxels)
    np.testing.assert_allclose(back.spacing, (0.4, 0.4, 4.0), atol=1e-6)
    assert back.subject_id == "vol"


def test_load_volume_normalizes_out_of_range(tmp_path, rng):
    import nibabel as nib

    data = (rng.random((5, 5, 5)) * 1000).astype(np.float32)
    nib.save(nib.Nifti1Image(data, np.eye(4)), str(tmp_path / "a.nii"))
    v = load_volume(tmp_path / "a.nii")
    assert v.voxels.min() == 0.0 and v.voxels.max() == 1.0


def test_truncated_raw_is_format_error(tmp_path, rng):
    path = save_volume(Volume(rng.random((4, 4, 4))), tmp_path / "v.raw")
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError):
        load_volume(path)


def test_malformed_headers(tmp_path):
    (tmp_path / "h.raw").write_bytes(b"not json\n\x00\x00")
    with pytest.raises(FormatError):
        load_volume(tmp_path / "h.raw")
    (tmp_path / "g.nii").write_bytes(b"garbage" * 10)
    with pytest.raises(FormatError):
        load_volume(tmp_path / "g.nii")
    (tmp_path / "v.txt").write_text("x")
    with pytest.raises(FormatError):
        load_volume(tmp_path / "v.txt")


def test_non_3d_payload_is_shape_error(tmp_path):
    header = json.dumps({"shape": [4, 4], "spacing": [1, 1, 1]}).encode() + b"\n"
    (tmp_path / "flat.raw").write_bytes(header + np.zeros(16, "<f4").tobytes())
    with pytest.raises(ShapeError):
        load_volume(tmp_path / "flat.raw")


def test_extract_slice_examples():
    x, y, z = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
    v = Volume((x + y) / 14.0)
    np.testing.assert_array_equal(extract_slice(v, "z", 0).pixels, ((x + y) / 14.0)[:, :, 0].astype(np.float32))
    assert extract_slice(v, "x", 7).shape == (8, 8)
    with pytest.raises(BoundsError):
        extract_slice(v, "z", 8)


@given(st.sampled_from("xyz"), st.integers(2, 5), st.integers(2, 5), st.integers(2, 5))
@settings(max_examples=30)
def test_slices_restack_to_volume(axis, a, b, c):
    data = np.random.default_rng(a * 100 + b * 10 + c).random((a, b, c))
    v = Volume(data)
    ax = "xyz".index(axis)
    stacked = np.stack([extract_slice(v, axis, i).pixels for i in range(v.shape[ax])], axis=ax)
    assert np.array_equal(stacked, v.voxels)


def _write_png(path, array):
    Image.fromarray(array).save(path)


def test_load_frame_sequence_resizes_and_orders(tmp_path, rng):
    for i in range(5):
        size = (20, 30) if i % 2 else (40, 60)  # mixed sizes are fine before resize
        _write_png(tmp_path / f"f{i:03d}.png", (rng.random(size) * 255).astype(np.uint8))
    seq = load_frame_sequence(tmp_path, resize_to=(9, 16))
    assert len(seq) == 5 and seq.frame_shape == (9, 16)
    assert seq.as_array().min() == 0.0 and seq.as_array().max() == 1.0


def test_load_frame_sequence_full_length(tmp_path):
    for i in range(180):
        _write_png(tmp_path / f"{i:04d}.png", np.full((12, 20), i, dtype=np.uint8))
    seq = load_frame_sequence(tmp_path, resize_to=(90, 160))
    assert len(seq) == 180 and seq.frame_shape == (90, 160)
    # lexicographic order is temporal order
    assert np.all(np.diff(seq.as_array()[:, 0, 0]) > 0)


def test_load_frame_sequence_errors(tmp_path):
    with pytest.raises(ValueError):
        load_frame_sequence(tmp_path)
    _write_png(tmp_path / "only.png", np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError):
        load_frame_sequence(tmp_path)


def test_grayscale_uses_bt601_weights():
    red = np.zeros((2, 2, 3))
    red[..., 0] = 200
    assert to_grayscale(red)[0, 0] == pytest.approx(0.299 * 200)
    assert to_grayscale(np.ones((1, 1, 3)))[0, 0] == pytest.approx(1.0)


def test_frame_sequence_png_round_trip(tmp_path, rng):
    seq = FrameSequence.from_array(np.round(rng.random((3, 6, 7)) * 255) / 255)
    save_frame_sequence(seq, tmp_path / "clip")
    back = load_frame_sequence(tmp_path / "clip", resize_to=None)
    np.testing.assert_allclose(back.as_array(), normalize_intensities(seq.as_array()), atol=1e-6)
    assert list_frame_dirs(tmp_path) == [tmp_path / "clip"]


def test_resolve_data_path(tmp_path, monkeypatch):
    monkeypatch.setenv("SLICESR_DATA_ROOT", str(tmp_path))
    assert resolve_data_path("a/b") == tmp_path / "a/b"
    assert resolve_data_path("/abs") == resolve_data_path("/abs", root="elsewhere")
    monkeypatch.delenv("SLICESR_DATA_ROOT")
    assert str(resolve_data_path("a")) == "a"
