"""
Volume pipeline tests: cropping, cube standardization, the .pfda container
and the two-site phantom generator.

Usage:
    pytest tests/test_volume_pipeline.py -v
"""

import struct

import numpy as np
import pytest

from model.models import CropBox, PhantomSpec, SiteParams
from model.volume import MaskVolume, Volume
from services.volume_pipeline import (
    HEADER,
    crop_roi,
    generate_phantom_dataset,
    load_case,
    load_cases,
    load_manifest,
    load_volume,
    save_volume,
    standardize_cube,
    synth_phantom,
    zscore_volume,
)
from utils.errors import (
    BoundsError,
    ConfigurationError,
    InvariantError,
    ShapeError,
    VolumeFormatError,
)

TARGET_SITE = SiteParams(intensity_gain=1.3, intensity_offset=50.0, noise_sigma=5.0, blur_sigma=1.0)


@pytest.fixture
def cube4():
    data = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    mask = (data % 3 == 0).astype(np.uint8)
    return Volume(data, (1.0, 0.5, 2.0)), MaskVolume(mask, (1.0, 0.5, 2.0))


class TestVolumeTypes:
    def test_rejects_non_finite_intensities(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(InvariantError):
            Volume(data)

    def test_rejects_non_positive_spacing(self):
        with pytest.raises(InvariantError):
            Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_rejects_non_binary_mask(self):
        with pytest.raises(InvariantError):
            MaskVolume(np.full((2, 2, 2), 2, dtype=np.uint8))

    def test_rejects_non_3d_grid(self):
        with pytest.raises(ShapeError):
            Volume(np.zeros((4, 4)))


class TestCropRoi:
    def test_identity_crop(self, cube4):
        v, m = cube4
        cv, cm = crop_roi(v, m, CropBox(origin=(0, 0, 0), size=(4, 4, 4)))
        assert cv == v
        assert cm == m

    def test_interior_block(self, cube4):
        v, m = cube4
        cv, cm = crop_roi(v, m, CropBox(origin=(1, 1, 1), size=(2, 2, 2)))
        np.testing.assert_array_equal(cv.data, v.data[1:3, 1:3, 1:3])
        np.testing.assert_array_equal(cm.data, m.data[1:3, 1:3, 1:3])
        assert cv.spacing == v.spacing

    def test_crop_copies(self, cube4):
        v, m = cube4
        cv, _ = crop_roi(v, m, CropBox(origin=(0, 0, 0), size=(2, 2, 2)))
        cv.data[0, 0, 0] = -1.0
        assert v.data[0, 0, 0] == 0.0

    def test_out_of_bounds_names_axis(self, cube4):
        v, m = cube4
        with pytest.raises(BoundsError) as err:
            crop_roi(v, m, CropBox(origin=(0, 3, 0), size=(2, 2, 2)))
        assert err.value.axis == "y"

    def test_out_of_bounds_all_axes(self, cube4):
        v, m = cube4
        with pytest.raises(BoundsError) as err:
            crop_roi(v, m, CropBox(origin=(3, 3, 3), size=(2, 2, 2)))
        assert err.value.axis == "z"

    def test_misaligned_pair(self, cube4):
        v, _ = cube4
        with pytest.raises(ShapeError):
            crop_roi(v, MaskVolume(np.zeros((4, 4, 3), dtype=np.uint8), v.spacing), CropBox(origin=(0, 0, 0), size=(1, 1, 1)))


class TestStandardizeCube:
    def test_even_pad_is_symmetric(self):
        v = Volume(np.ones((190, 2, 2), dtype=np.float32))
        out = standardize_cube(v, 192)
        assert out.shape == (192, 192, 192)
        assert out.data[0].sum() == 0
        assert out.data[191].sum() == 0
        assert out.data[1, 95:97, 95:97].sum() == 4

    def test_odd_pad_goes_trailing(self):
        line = np.arange(1, 3, dtype=np.float32).reshape(2, 1, 1)
        out = standardize_cube(Volume(line), 5)
        np.testing.assert_array_equal(out.data[:, 2, 2], [0, 1, 2, 0, 0])

    def test_center_crop_matches_symmetric_offset(self):
        line = np.arange(5, dtype=np.float32).reshape(5, 1, 1)
        out = standardize_cube(Volume(line), 3)
        np.testing.assert_array_equal(out.data[:, 1, 1], [1, 2, 3])

    def test_odd_crop_removes_trailing(self):
        line = np.arange(6, dtype=np.float32).reshape(6, 1, 1)
        out = standardize_cube(Volume(line), 3)
        np.testing.assert_array_equal(out.data[:, 1, 1], [1, 2, 3])

    def test_identity_and_idempotence(self, cube4):
        v, m = cube4
        assert standardize_cube(v, 4) == v
        once = standardize_cube(m, 7)
        assert standardize_cube(once, 7) == once

    def test_mask_stays_binary_and_count_preserved_by_padding(self, cube4):
        _, m = cube4
        padded = standardize_cube(m, 9)
        assert isinstance(padded, MaskVolume)
        assert padded.voxel_count == m.voxel_count
        assert standardize_cube(m, 2).voxel_count <= m.voxel_count

    def test_crop_then_standardize_is_cube(self, cube4):
        v, m = cube4
        cv, cm = crop_roi(v, m, CropBox(origin=(0, 1, 2), size=(3, 2, 1)))
        assert standardize_cube(cv, 5).shape == (5, 5, 5)
        assert standardize_cube(cm, 5).shape == (5, 5, 5)


class TestPfdaContainer:
    def test_round_trip_volume_and_mask(self, tmp_path, cube4):
        v, m = cube4
        assert load_volume(save_volume(v, tmp_path / "v.pfda")) == v
        assert load_volume(save_volume(m, tmp_path / "m.pfda")) == m

    def test_header_layout(self, tmp_path, cube4):
        v, _ = cube4
        blob = save_volume(v, tmp_path / "v.pfda").read_bytes()
        magic, version, code, d, h, w, sz, sy, sx = HEADER.unpack_from(blob, 0)
        assert (magic, version, code) == (b"PFDA", 1, 1)
        assert (d, h, w) == (4, 4, 4)
        assert (sz, sy, sx) == (1.0, 0.5, 2.0)
        assert len(blob) == HEADER.size + 64 * 4

    def test_truncated_payload(self, tmp_path, cube4):
        v, _ = cube4
        path = save_volume(v, tmp_path / "v.pfda")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(VolumeFormatError, match="payload length"):
            load_volume(path)

    def test_zero_spacing_header(self, tmp_path):
        path = tmp_path / "bad.pfda"
        header = struct.pack("<4sIB3I3d", b"PFDA", 1, 1, 1, 1, 1, 0.0, 1.0, 1.0)
        path.write_bytes(header + np.zeros(1, dtype="<f4").tobytes())
        with pytest.raises(InvariantError):
            load_volume(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pfda"
        path.write_bytes(struct.pack("<4sIB3I3d", b"NOPE", 1, 1, 1, 1, 1, 1.0, 1.0, 1.0) + b"\0" * 4)
        with pytest.raises(VolumeFormatError, match="magic"):
            load_volume(path)

    def test_non_finite_payload(self, tmp_path):
        path = tmp_path / "nan.pfda"
        header = struct.pack("<4sIB3I3d", b"PFDA", 1, 1, 1, 1, 1, 1.0, 1.0, 1.0)
        path.write_bytes(header + np.array([np.inf], dtype="<f4").tobytes())
        with pytest.raises(InvariantError):
            load_volume(path)


class TestPhantom:
    def test_deterministic(self):
        a = synth_phantom(7, TARGET_SITE, 16)
        b = synth_phantom(7, TARGET_SITE, 16)
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_sites_share_mask_and_shift_intensity(self):
        v_src, m_src = synth_phantom(11, SiteParams(), 24)
        v_tgt, m_tgt = synth_phantom(11, TARGET_SITE, 24)
        assert m_src == m_tgt
        assert v_tgt.data.mean() - v_src.data.mean() >= 50.0

    def test_foreground_fraction(self):
        fractions = [synth_phantom(seed, SiteParams(), 24)[1].data.mean() for seed in range(100)]
        assert min(fractions) >= 0.02
        assert max(fractions) <= 0.15

    def test_side_too_small(self):
        with pytest.raises(ConfigurationError):
            synth_phantom(0, SiteParams(), 15)

    def test_zscore(self):
        v, _ = synth_phantom(2, TARGET_SITE, 16)
        z = zscore_volume(v)
        assert abs(float(z.data.mean())) < 1e-4
        assert abs(float(z.data.std()) - 1.0) < 1e-4


class TestPhantomDataset:
    def test_layout_and_reload(self, tmp_path):
        spec = PhantomSpec(n_train=2, n_val=1, side=16, seed=1)
        manifest = generate_phantom_dataset(tmp_path, spec)
        assert len(manifest) == 6
        assert (tmp_path / "source" / "case_0000" / "volume.pfda").exists()
        assert (tmp_path / "target" / "case_0002" / "mask.pfda").exists()

        reloaded = load_manifest(tmp_path)
        assert list(reloaded.columns) == ["case_id", "site", "split"]
        train = load_cases(tmp_path, "target", "train")
        assert [c.case_id for c in train] == ["case_0000", "case_0001"]
        case = load_case(tmp_path, "source", "case_0002", "val")
        assert case.volume.shape == (16, 16, 16)
        assert case.mask.voxel_count > 0

    def test_sites_hold_different_anatomy(self, tmp_path):
        generate_phantom_dataset(tmp_path, PhantomSpec(n_train=1, n_val=1, side=16))
        src = load_case(tmp_path, "source", "case_0000")
        tgt = load_case(tmp_path, "target", "case_0000")
        assert src.mask != tgt.mask
