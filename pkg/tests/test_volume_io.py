import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrseg import nifti
from corrseg.nifti import NiftiFormatError
from corrseg.volume_io import (
    MEDIASTINAL,
    BoundingBox,
    Volume,
    WindowPreset,
    apply_window,
    crop,
    load_mask,
    load_volume,
    save_mask,
    save_volume,
    window_normalize,
)


def make_volume(shape=(4, 4, 4), spacing=(1.0, 1.0, 1.0), seed=0):
    rng = np.random.default_rng(seed)
    grid = rng.integers(-1000, 1000, size=shape).astype(np.int16)
    return Volume(id="fixture", grid=grid, spacing=spacing)


class TestLoadSave:
    def test_round_trip_identity(self, tmp_path):
        vol = make_volume()
        save_volume(vol, tmp_path / "fixture.nii.gz")
        loaded = load_volume(tmp_path / "fixture.nii.gz")
        assert np.array_equal(loaded.grid, vol.grid)
        assert loaded.spacing == pytest.approx(vol.spacing)
        assert loaded.id == "fixture"

    def test_uncompressed_extension(self, tmp_path):
        vol = make_volume()
        save_volume(vol, tmp_path / "fixture.nii")
        loaded = load_volume(tmp_path / "fixture.nii")
        assert np.array_equal(loaded.grid, vol.grid)
        assert loaded.id == "fixture"

    def test_two_mm_slice_thickness(self, tmp_path):
        vol = make_volume(spacing=(0.9, 0.9, 2.0))
        save_volume(vol, tmp_path / "thick.nii.gz")
        loaded = load_volume(tmp_path / "thick.nii.gz")
        assert loaded.spacing[2] == pytest.approx(2.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nope.nii.gz")

    def test_corrupt_payload(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"definitely not a nifti header" * 20)
        with pytest.raises(NiftiFormatError):
            load_volume(path)

    def test_truncated_gzip(self, tmp_path):
        good = tmp_path / "good.nii.gz"
        save_volume(make_volume(), good)
        bad = tmp_path / "bad.nii.gz"
        bad.write_bytes(good.read_bytes()[:40])
        with pytest.raises(NiftiFormatError):
            load_volume(bad)

    def test_2d_payload_rejected(self, tmp_path):
        # hand-build a header claiming dim[0] == 2
        vol = make_volume()
        save_volume(vol, tmp_path / "v.nii")
        raw = bytearray((tmp_path / "v.nii").read_bytes())
        struct.pack_into("<h", raw, 40, 2)  # dim[0]
        path = tmp_path / "flat.nii"
        path.write_bytes(bytes(raw))
        with pytest.raises(NiftiFormatError, match="3D"):
            load_volume(path)

    def test_4d_with_singleton_tail_is_3d(self, tmp_path):
        vol = make_volume()
        save_volume(vol, tmp_path / "v.nii")
        raw = bytearray((tmp_path / "v.nii").read_bytes())
        struct.pack_into("<hh", raw, 40, 4, vol.shape[0])  # dim[0]=4, dim[4] stays 1
        path = tmp_path / "v4.nii"
        path.write_bytes(bytes(raw))
        loaded = load_volume(path)
        assert loaded.grid.shape == vol.shape

    def test_big_endian_read(self, tmp_path):
        vol = make_volume(shape=(3, 5, 2))
        blob = nifti.to_bytes(vol.grid, spacing=vol.spacing, compress=False)
        header = np.frombuffer(blob[:348], dtype=np.uint8)
        # rebuild the same header big-endian by round-tripping the fields
        fields = struct.unpack("<" + nifti._HEADER_FMT, bytes(header))
        swapped = struct.pack(">" + nifti._HEADER_FMT, *fields)
        data_be = vol.grid.astype(vol.grid.dtype.newbyteorder(">"))
        path = tmp_path / "be.nii"
        path.write_bytes(swapped + b"\x00" * 4 + np.asfortranarray(data_be).tobytes(order="F"))
        loaded = load_volume(path)
        assert np.array_equal(loaded.grid, vol.grid)


class TestMasks:
    def test_all_zero_round_trip(self, tmp_path):
        vol = make_volume()
        mask = np.zeros(vol.shape, dtype=bool)
        save_mask(mask, vol, tmp_path / "m.nii.gz")
        assert not load_mask(tmp_path / "m.nii.gz").any()

    def test_single_voxel(self, tmp_path):
        vol = make_volume()
        mask = np.zeros(vol.shape, dtype=bool)
        mask[1, 2, 3] = True
        save_mask(mask, vol, tmp_path / "m.nii.gz")
        loaded = load_mask(tmp_path / "m.nii.gz")
        assert loaded[1, 2, 3]
        assert loaded.sum() == 1

    def test_wrong_shape_rejected(self, tmp_path):
        vol = make_volume()
        with pytest.raises(ValueError, match="match"):
            save_mask(np.zeros((2, 2, 2), dtype=bool), vol, tmp_path / "m.nii.gz")

    @given(seed=st.integers(0, 2**16))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_bit_exact(self, seed, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("masks")
        vol = make_volume(seed=seed)
        mask = np.random.default_rng(seed).random(vol.shape) > 0.5
        save_mask(mask, vol, tmp / f"m{seed}.nii.gz")
        assert np.array_equal(load_mask(tmp / f"m{seed}.nii.gz"), mask)


class TestWindowing:
    def test_window_bounds(self):
        vol = Volume(id="w", grid=np.array([[[-125.0, 250.0, 1000.0]]]))
        out = window_normalize(vol, MEDIASTINAL)
        assert out[0, 0, 0] == 0.0
        assert out[0, 0, 1] == 1.0
        assert out[0, 0, 2] == 1.0  # clamped

    def test_invalid_preset(self):
        with pytest.raises(ValueError):
            WindowPreset("bad", 10.0, 10.0)

    @given(
        values=st.lists(st.floats(-2000, 4000, allow_nan=False), min_size=2, max_size=30)
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_and_idempotent(self, values):
        arr = np.array(values, dtype=np.float32).reshape(1, 1, -1)
        out = apply_window(arr, MEDIASTINAL.lower, MEDIASTINAL.upper)
        order = np.argsort(arr.ravel(), kind="stable")
        assert (np.diff(out.ravel()[order]) >= -1e-6).all()
        # applying the window to an already-normalized grid in a [0,1] window
        again = apply_window(out, 0.0, 1.0)
        assert np.allclose(again, out)


class TestCrop:
    def test_full_box_identity(self):
        vol = make_volume()
        box = BoundingBox.full(vol.shape)
        cropped = crop(vol, box)
        assert np.array_equal(cropped.grid, vol.grid)

    def test_single_voxel(self):
        vol = make_volume()
        box = BoundingBox((2, 2, 2), (2, 2, 2))
        cropped = crop(vol, box)
        assert cropped.grid.shape == (1, 1, 1)
        assert cropped.grid[0, 0, 0] == vol.grid[2, 2, 2]

    def test_out_of_range(self):
        vol = make_volume()
        with pytest.raises(ValueError, match="exceeds"):
            crop(vol, BoundingBox((0, 0, 0), (10, 3, 3)))

    def test_offset_origin(self):
        vol = make_volume(shape=(6, 6, 6))
        box = BoundingBox((1, 2, 3), (4, 5, 5))
        cropped = crop(vol, box)
        assert cropped.grid[0, 0, 0] == vol.grid[1, 2, 3]
        assert cropped.grid.shape == box.shape


class TestTypes:
    def test_volume_invariants(self):
        with pytest.raises(ValueError):
            Volume(id="x", grid=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            Volume(id="x", grid=np.zeros((2, 2, 2)), spacing=(0.0, 1.0, 1.0))
        bad = np.zeros((2, 2, 2))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Volume(id="x", grid=bad)

    def test_box_invariants(self):
        with pytest.raises(ValueError):
            BoundingBox((3, 0, 0), (2, 5, 5))
        box = BoundingBox((0, 1, 2), (3, 4, 5))
        assert box.shape == (4, 4, 4)
        assert box.contains_point((0, 1, 2))
        assert not box.contains_point((4, 1, 2))
