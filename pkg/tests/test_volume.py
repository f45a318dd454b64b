import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quizreg.volume import (
    LandmarkError,
    LandmarkSet,
    Volume,
    VolumeError,
    crop_resize,
    load_landmarks,
    load_volume,
    resample_to_reference,
    save_landmarks,
    save_volume,
)


def _write_header(path, dims):
    header = {"dims": dims, "spacing": [1, 1, 1], "origin": [0, 0, 0], "dtype": "f32", "order": "zyx"}
    path.write_text(json.dumps(header))


def test_load_volume_size_arithmetic(tmp_path):
    _write_header(tmp_path / "v.qvol", [4, 4, 4])
    (tmp_path / "v.raw").write_bytes(np.arange(64, dtype="<f4").tobytes())
    vol = load_volume(tmp_path / "v.qvol")
    assert vol.dims == (4, 4, 4)
    # x varies fastest
    assert vol.data[0, 0, 1] == 1.0 and vol.data[0, 1, 0] == 4.0 and vol.data[1, 0, 0] == 16.0


def test_load_volume_payload_mismatch(tmp_path):
    _write_header(tmp_path / "v.qvol", [4, 4, 4])
    (tmp_path / "v.raw").write_bytes(b"\0" * 255)
    with pytest.raises(VolumeError, match="payload size mismatch"):
        load_volume(tmp_path / "v.qvol")


def test_load_volume_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "absent.qvol")


def test_load_volume_rejects_bad_spacing_and_nan(tmp_path):
    header = {"dims": [2, 2, 2], "spacing": [1, 0, 1], "origin": [0, 0, 0], "dtype": "f32", "order": "zyx"}
    (tmp_path / "a.qvol").write_text(json.dumps(header))
    (tmp_path / "a.raw").write_bytes(np.zeros(8, "<f4").tobytes())
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "a.qvol")
    _write_header(tmp_path / "b.qvol", [2, 2, 2])
    data = np.zeros(8, "<f4")
    data[3] = np.nan
    (tmp_path / "b.raw").write_bytes(data.tobytes())
    with pytest.raises(VolumeError, match="non-finite"):
        load_volume(tmp_path / "b.qvol")


def test_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.normal(size=(5, 6, 7)).astype(np.float32), (0.7, 1.25, 5.0), (-3.5, 2.0, 10.125))
    save_volume(vol, tmp_path / "r.qvol")
    back = load_volume(tmp_path / "r.qvol")
    assert back == vol
    assert back.data.tobytes() == vol.data.tobytes()


def test_payload_size_128_cube(tmp_path):
    save_volume(Volume(np.zeros((128, 128, 128), np.float32)), tmp_path / "big.qvol")
    assert (tmp_path / "big.raw").stat().st_size == 8_388_608


def test_nan_volume_rejected_before_writing(tmp_path):
    data = np.zeros((3, 3, 3), np.float32)
    vol = Volume(data)
    vol.data[1, 1, 1] = np.nan
    with pytest.raises(VolumeError):
        save_volume(vol, tmp_path / "n.qvol")
    assert not (tmp_path / "n.qvol").exists()


def test_volume_invariants():
    with pytest.raises(VolumeError):
        Volume(np.zeros((1, 4, 4)))
    with pytest.raises(VolumeError):
        Volume(np.zeros((4, 4, 4)), spacing=(1, -1, 1))


def test_resample_identity():
    rng = np.random.default_rng(1)
    vol = Volume(rng.random((6, 7, 8)).astype(np.float32), (2.0, 1.5, 1.0), (1.0, 2.0, 3.0))
    out = resample_to_reference(vol, vol.dims, vol.spacing)
    np.testing.assert_allclose(out.data, vol.data, atol=1e-6)


def test_resample_constant_interior():
    vol = Volume(np.full((8, 8, 8), 3.25, np.float32), (1.0, 1.0, 1.0))
    out = resample_to_reference(vol, (11, 9, 13), (0.6, 0.8, 0.5))
    # voxels whose trilinear support lies inside the source
    zz, yy, xx = np.meshgrid(np.arange(11) * 0.6, np.arange(9) * 0.8, np.arange(13) * 0.5, indexing="ij")
    inside = (zz <= 7) & (yy <= 7) & (xx <= 7)
    np.testing.assert_allclose(out.data[inside], 3.25, atol=1e-6)


def test_resample_ramp_upsampling():
    z, y, x = np.meshgrid(*(np.arange(8.0),) * 3, indexing="ij")
    ramp = lambda zz, yy, xx: 0.5 * xx + 0.25 * yy - 0.125 * zz + 1.0
    vol = Volume(ramp(z, y, x).astype(np.float32))
    out = resample_to_reference(vol, (16, 16, 16), (0.5, 0.5, 0.5))
    z2, y2, x2 = np.meshgrid(*(np.arange(16) * 0.5,) * 3, indexing="ij")
    inside = (z2 <= 7) & (y2 <= 7) & (x2 <= 7)
    np.testing.assert_allclose(out.data[inside], ramp(z2, y2, x2)[inside], atol=1e-5)


def test_resample_outside_is_zero():
    vol = Volume(np.ones((4, 4, 4), np.float32))
    out = resample_to_reference(vol, (4, 4, 4), (1, 1, 1), target_origin=(10, 10, 10))
    assert not out.data.any()


def test_resample_invalid_target():
    vol = Volume(np.ones((4, 4, 4), np.float32))
    with pytest.raises(VolumeError):
        resample_to_reference(vol, (1, 4, 4), (1, 1, 1))
    with pytest.raises(VolumeError):
        resample_to_reference(vol, (4, 4, 4), (1, 0, 1))


def test_crop_resize_identity():
    rng = np.random.default_rng(2)
    vol = Volume(rng.random((10, 12, 14)).astype(np.float32), (1.0, 2.0, 3.0))
    out = crop_resize(vol, vol.dims)
    np.testing.assert_allclose(out.data, vol.data, atol=1e-6)
    assert out.spacing == vol.spacing and out.origin == vol.origin


def test_crop_resize_halving_doubles_spacing():
    vol = Volume(np.random.default_rng(3).random((64, 64, 64)).astype(np.float32), (1.25, 1.25, 1.25))
    out = crop_resize(vol, (32, 32, 32))
    assert out.dims == (32, 32, 32)
    assert out.spacing == (2.5, 2.5, 2.5)


def test_crop_resize_centre_impulse():
    data = np.zeros((33, 33, 33), np.float32)
    data[16, 16, 16] = 1.0
    # an odd target keeps a sample on the centre voxel; trilinear resizing has no anti-aliasing
    out = crop_resize(Volume(data), (17, 17, 17))
    assert out.data.max() > 0
    peak = np.array(np.unravel_index(np.argmax(out.data), out.dims))
    assert np.all(np.abs(peak - 8) <= 1)


@pytest.mark.parametrize("dims,target", [((40, 50, 60), (16, 16, 16)), ((30, 30, 90), (8, 8, 16))])
def test_crop_resize_preserves_world_centre(dims, target):
    vol = Volume(np.zeros(dims, np.float32), (1.5, 0.5, 2.0), (4.0, -7.0, 11.0))
    out = crop_resize(vol, target)
    centre = lambda v: np.array(v.origin) + (np.array(v.dims) - 1) / 2 * np.array(v.spacing)
    assert np.all(np.abs(centre(out) - centre(vol)) <= 0.5 * np.array(out.spacing))


def test_crop_resize_invalid_target():
    with pytest.raises(VolumeError):
        crop_resize(Volume(np.zeros((4, 4, 4), np.float32)), (4, 1, 4))


def test_landmarks_load_two_rows(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("name,x,y,z\na,1,2,3\nb,0.5,0.25,4\n")
    lms = load_landmarks(p)
    assert len(lms) == 2 and lms.names == ["a", "b"]
    np.testing.assert_array_equal(lms.points[1], [0.5, 0.25, 4])


def test_landmarks_duplicate_names(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("name,x,y,z\na,1,2,3\na,0,0,0\n")
    with pytest.raises(LandmarkError, match="duplicate"):
        load_landmarks(p)


def test_landmarks_malformed_and_bounds(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("name,x,y,z\na,1,2\n")
    with pytest.raises(LandmarkError):
        load_landmarks(p)
    p.write_text("name,x,y,z\na,1,2,oops\n")
    with pytest.raises(LandmarkError):
        load_landmarks(p)
    p.write_text("name,x,y,z\na,9.5,2,3\n")
    assert len(load_landmarks(p)) == 1
    with pytest.raises(LandmarkError, match="outside"):
        load_landmarks(p, dims=(10, 10, 9))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_landmark_round_trip(tmp_path_factory, n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1e3, 1e3, size=(n, 3))
    lms = LandmarkSet([f"p{i}" for i in range(n)], pts)
    path = tmp_path_factory.mktemp("lm") / "l.csv"
    save_landmarks(lms, path)
    back = load_landmarks(path)
    assert back.names == lms.names
    assert np.max(np.abs(back.points - pts)) < 1e-6
