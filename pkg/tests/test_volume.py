import struct

import numpy as np
import pytest

from ricekit.errors import DegenerateInputError, InvalidDoseError, VolumeFormatError
from ricekit.volume import (Volume, center_crop_pad, read_volume, resample_isotropic,
                            scale_fraction_dose, scale_values, stack_channels,
                            write_volume, zscore)
from ricekit.combos import ModalityCombo


def rand_volume(rng, shape=(5, 6, 7), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return Volume(rng.standard_normal(shape).astype(np.float32), spacing, origin)


class TestVolumeType:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2)), (1, 1, 1), (0, 0, 0))
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), (1, 0.0, 1), (0, 0, 0))
        bad = np.zeros((2, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Volume(bad, (1, 1, 1), (0, 0, 0))

    def test_values_are_immutable(self):
        v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), (0, 0, 0))
        with pytest.raises(ValueError):
            v.values[0, 0, 0] = 1.0


class TestVolumeIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        v = rand_volume(rng, (4, 3, 5), spacing=(0.7, 1.0, 2.0), origin=(-1.0, 0.5, 3.0))
        write_volume(v, tmp_path / "vol")
        r = read_volume(tmp_path / "vol")
        assert r.values.tobytes() == v.values.tobytes()
        assert r.shape == v.shape and r.spacing_mm == v.spacing_mm and r.origin_mm == v.origin_mm

    def test_half_encodes_little_endian(self, tmp_path):
        v = Volume(np.array([[[0.5]]], dtype=np.float32), (1, 1, 1), (0, 0, 0))
        write_volume(v, tmp_path / "half")
        payload = (tmp_path / "half.raw").read_bytes()
        assert payload == struct.pack("<f", 0.5) == b"\x00\x00\x00?"

    def test_write_is_deterministic(self, tmp_path):
        v = rand_volume(np.random.default_rng(1))
        write_volume(v, tmp_path / "a")
        write_volume(v, tmp_path / "b")
        assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_x_fastest_order(self, tmp_path):
        vals = np.arange(8, dtype=np.float32).reshape(2, 2, 2)  # [x, y, z]
        write_volume(Volume(vals, (1, 1, 1), (0, 0, 0)), tmp_path / "o")
        raw = np.frombuffer((tmp_path / "o.raw").read_bytes(), dtype="<f4")
        # index = x + nx*(y + ny*z)
        for x in range(2):
            for y in range(2):
                for z in range(2):
                    assert raw[x + 2 * (y + 2 * z)] == vals[x, y, z]

    def test_payload_size_mismatch_rejected(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), (0, 0, 0))
        write_volume(v, tmp_path / "bad")
        (tmp_path / "bad.raw").write_bytes(b"\x00" * 28)  # 7 floats for a 8-voxel header
        with pytest.raises(VolumeFormatError, match="payload"):
            read_volume(tmp_path / "bad")

    def test_unsupported_dtype_rejected(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), (0, 0, 0))
        write_volume(v, tmp_path / "d")
        header = (tmp_path / "d.json").read_text().replace("f32le", "f64le")
        (tmp_path / "d.json").write_text(header)
        with pytest.raises(VolumeFormatError, match="dtype"):
            read_volume(tmp_path / "d")

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(VolumeFormatError, match="missing"):
            read_volume(tmp_path / "nope")

    def test_nonfinite_payload_rejected(self, tmp_path):
        v = Volume(np.zeros((1, 1, 1), dtype=np.float32), (1, 1, 1), (0, 0, 0))
        write_volume(v, tmp_path / "n")
        (tmp_path / "n.raw").write_bytes(struct.pack("<f", float("inf")))
        with pytest.raises(VolumeFormatError, match="non-finite"):
            read_volume(tmp_path / "n")


class TestResample:
    def test_self_resample_is_bit_identical(self):
        rng = np.random.default_rng(2)
        v = rand_volume(rng, (6, 5, 4), spacing=(1.0, 1.0, 1.0))
        r = resample_isotropic(v, 1.0)
        assert r.values.tobytes() == v.values.tobytes()
        assert r.shape == v.shape

    def test_output_size_formula(self):
        v = Volume(np.zeros((4, 4, 4), dtype=np.float32), (1.0, 1.0, 2.0), (0, 0, 0))
        r = resample_isotropic(v, 1.0)
        assert r.shape == (4, 4, 8)
        assert r.spacing_mm == (1.0, 1.0, 1.0)

    def test_linear_ramp_interpolates_exactly(self):
        n = 8
        ramp = np.broadcast_to(np.arange(n, dtype=np.float32)[:, None, None], (n, n, n))
        v = Volume(np.ascontiguousarray(ramp), (1.0, 1.0, 1.0), (0, 0, 0))
        r = resample_isotropic(v, 0.5)
        # interior sample points (source position within bounds): value == 0.5*i
        for i in range(r.shape[0]):
            u = 0.5 * i
            if u <= n - 1:
                assert abs(float(r.values[i, 0, 0]) - u) < 1e-6

    def test_boundary_clamps(self):
        v = Volume(np.arange(27, dtype=np.float32).reshape(3, 3, 3), (2.0, 2.0, 2.0), (0, 0, 0))
        r = resample_isotropic(v, 1.0)
        assert r.shape == (6, 6, 6)
        assert np.isfinite(r.values).all()

    def test_rejects_bad_spacing(self):
        v = rand_volume(np.random.default_rng(3))
        with pytest.raises(ValueError):
            resample_isotropic(v, 0.0)


class TestZscore:
    def test_three_values(self):
        v = Volume(np.array([1.0, 2.0, 3.0], dtype=np.float32).reshape(3, 1, 1), (1, 1, 1), (0, 0, 0))
        z = zscore(v)
        expected = np.array([-1.22474487, 0.0, 1.22474487])
        np.testing.assert_allclose(z.values[:, 0, 0], expected, atol=1e-6)

    def test_idempotent_statistics(self):
        rng = np.random.default_rng(4)
        v = rand_volume(rng, (8, 8, 8))
        z1 = zscore(v)
        z2 = zscore(z1)
        assert abs(float(z2.values.mean())) < 1e-6
        assert abs(float(z2.values.std()) - 1.0) < 1e-6

    def test_constant_volume_is_degenerate(self):
        v = Volume(np.full((4, 4, 4), 3.0, dtype=np.float32), (1, 1, 1), (0, 0, 0))
        with pytest.raises(DegenerateInputError):
            zscore(v)

    def test_masked_statistics(self):
        rng = np.random.default_rng(5)
        v = rand_volume(rng, (6, 6, 6))
        mask_arr = np.zeros((6, 6, 6), dtype=np.float32)
        mask_arr[:3] = 1.0
        mask = Volume(mask_arr, v.spacing_mm, v.origin_mm)
        z = zscore(v, mask)
        region = z.values[mask_arr != 0]
        assert abs(float(region.mean())) < 1e-5
        assert abs(float(region.std()) - 1.0) < 1e-5
        # transformation applies everywhere, not only under the mask
        outside = z.values[mask_arr == 0]
        assert not np.allclose(outside, v.values[mask_arr == 0])

    def test_mask_shape_mismatch(self):
        v = rand_volume(np.random.default_rng(6), (4, 4, 4))
        mask = Volume(np.ones((3, 3, 3), dtype=np.float32), (1, 1, 1), (0, 0, 0))
        with pytest.raises(ValueError):
            zscore(v, mask)


class TestCropPad:
    def test_crop_window(self):
        vals = np.zeros((100, 100, 100), dtype=np.float32)
        vals[18, 18, 18] = 1.0
        vals[81, 81, 81] = 2.0
        v = Volume(vals, (1, 1, 1), (0, 0, 0))
        c = center_crop_pad(v, (64, 64, 64))
        # retained range is [18, 81] inclusive per axis
        assert c.values[0, 0, 0] == 1.0
        assert c.values[63, 63, 63] == 2.0
        assert c.origin_mm == (18.0, 18.0, 18.0)

    def test_identity_when_target_matches(self):
        v = rand_volume(np.random.default_rng(7), (5, 5, 5))
        c = center_crop_pad(v, (5, 5, 5))
        assert c.values.tobytes() == v.values.tobytes()

    def test_symmetric_zero_pad(self):
        v = Volume(np.ones((60, 60, 60), dtype=np.float32), (1, 1, 1), (0, 0, 0))
        c = center_crop_pad(v, (64, 64, 64))
        assert c.shape == (64, 64, 64)
        assert (c.values[:2] == 0).all() and (c.values[-2:] == 0).all()
        assert (c.values[2:62, 2:62, 2:62] == 1).all()
        assert c.origin_mm == (-2.0, -2.0, -2.0)

    def test_idempotent_for_equal_target(self):
        v = rand_volume(np.random.default_rng(8), (9, 5, 12))
        once = center_crop_pad(v, (7, 7, 7))
        twice = center_crop_pad(once, (7, 7, 7))
        assert twice.values.tobytes() == once.values.tobytes()

    def test_shape_contract_random(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            shape = tuple(int(s) for s in rng.integers(1, 20, size=3))
            target = tuple(int(s) for s in rng.integers(1, 20, size=3))
            v = Volume(rng.standard_normal(shape).astype(np.float32), (1, 1, 1), (0, 0, 0))
            assert center_crop_pad(v, target).shape == target


class TestDoseOps:
    def test_fraction_scaling(self):
        v = Volume(np.full((2, 2, 2), 2.0, dtype=np.float32), (1, 1, 1), (0, 0, 0))
        assert float(scale_fraction_dose(v, 30).values[0, 0, 0]) == 60.0

    def test_single_fraction_identity(self):
        v = Volume(np.full((2, 2, 2), 1.5, dtype=np.float32), (1, 1, 1), (0, 0, 0))
        assert scale_fraction_dose(v, 1).values.tobytes() == v.values.tobytes()

    def test_negative_dose_rejected(self):
        v = Volume(np.full((2, 2, 2), -0.1, dtype=np.float32), (1, 1, 1), (0, 0, 0))
        with pytest.raises(InvalidDoseError):
            scale_fraction_dose(v, 10)

    def test_integer_multiplier_linearity(self):
        rng = np.random.default_rng(10)
        v = Volume(rng.uniform(0, 3, size=(4, 4, 4)).astype(np.float32), (1, 1, 1), (0, 0, 0))
        ab = scale_fraction_dose(v, 6)
        a_then_b = scale_fraction_dose(scale_fraction_dose(v, 2), 3)
        assert ab.values.tobytes() == a_then_b.values.tobytes()

    def test_scale_values(self):
        v = Volume(np.full((2, 2, 2), 40.0, dtype=np.float32), (1, 1, 1), (0, 0, 0))
        assert float(scale_values(v, 1 / 80.0).values[0, 0, 0]) == 0.5


class TestStackChannels:
    def make_volumes(self, rng):
        return {name: rand_volume(rng, (4, 4, 4)) for name in ("post_op", "event", "dose")}

    def test_canonical_order_and_exact_values(self):
        rng = np.random.default_rng(11)
        vols = self.make_volumes(rng)
        sample = stack_channels(vols, ModalityCombo(7))
        assert sample.shape == (3, 4, 4, 4)
        assert np.array_equal(sample[2], vols["dose"].values)
        assert np.array_equal(sample[0], vols["post_op"].values)

    def test_single_channel(self):
        vols = self.make_volumes(np.random.default_rng(12))
        sample = stack_channels(vols, ModalityCombo(3))
        assert sample.shape == (1, 4, 4, 4)
        assert np.array_equal(sample[0], vols["dose"].values)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(13)
        vols = self.make_volumes(rng)
        vols["event"] = rand_volume(rng, (5, 4, 4))
        with pytest.raises(ValueError, match="shape"):
            stack_channels(vols, ModalityCombo(4))

    def test_spacing_mismatch_rejected(self):
        rng = np.random.default_rng(14)
        vols = self.make_volumes(rng)
        vols["dose"] = rand_volume(rng, (4, 4, 4), spacing=(2.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="spacing"):
            stack_channels(vols, ModalityCombo(7))
