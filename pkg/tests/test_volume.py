import json
import math
import struct

import numpy as np
import pytest
from PIL import Image

from ageatlas.errors import BadMagicError, LengthMismatchError, NonFiniteError, ShapeError
from ageatlas.volume import (
    HOT_COLORMAP,
    GridPoint,
    Volume3,
    export_slice,
    gaussian_kernel,
    gaussian_smooth,
    overlay_image,
    overlay_slice,
    read_dfield,
    read_dfield_metadata,
    read_vol,
    resample,
    resize_array,
    slice_image,
    trilinear_sample,
    write_dfield,
    write_panel_grid,
    write_vol,
)


class TestVolume3:
    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume3(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_rejects_non_finite(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            Volume3(data)

    def test_data_is_read_only(self):
        v = Volume3(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0


class TestTrilinearSample:
    def test_exact_at_lattice_point(self, ramp_volume):
        assert trilinear_sample(ramp_volume, GridPoint(1, 2, 3)) == pytest.approx(321.0)

    def test_midpoint_of_two_voxels(self):
        data = np.zeros((2, 1, 1))
        data[1, 0, 0] = 1.0
        assert trilinear_sample(Volume3(data), (0.5, 0.0, 0.0)) == pytest.approx(0.5)

    def test_outside_is_background(self, ramp_volume):
        assert trilinear_sample(ramp_volume, (-5, 0, 0)) == 0.0
        assert trilinear_sample(ramp_volume, (0, 0, 3.01)) == 0.0

    def test_upper_boundary_is_inside(self, ramp_volume):
        assert trilinear_sample(ramp_volume, (3, 3, 3)) == pytest.approx(333.0)

    def test_linear_between_neighbours(self, rng):
        v = Volume3(rng.random((5, 5, 5)))
        for _ in range(20):
            base = rng.integers(0, 4, size=3)
            axis = int(rng.integers(0, 3))
            t = float(rng.random())
            p = base.astype(float)
            p[axis] += t
            q = base.copy()
            q[axis] += 1
            expected = (1 - t) * v.data[tuple(base)] + t * v.data[tuple(q)]
            assert trilinear_sample(v, p) == pytest.approx(expected, abs=1e-5)


class TestResample:
    def test_identity_dims(self, rng):
        v = Volume3(rng.random((5, 6, 7)))
        out = resample(v, v.dims)
        np.testing.assert_allclose(out.data, v.data, atol=1e-6)
        assert out.spacing == v.spacing

    def test_constant_volume(self):
        v = Volume3(np.full((4, 5, 6), 0.25))
        np.testing.assert_allclose(resample(v, (7, 3, 2)).data, 0.25, atol=1e-6)

    def test_downsample_matches_direct_sampling(self, ramp_volume):
        out = resample(ramp_volume, (2, 2, 2))
        for i, j, k in np.ndindex(2, 2, 2):
            source = (i * 3.0, j * 3.0, k * 3.0)
            expected = trilinear_sample(ramp_volume, source)
            assert out.data[i, j, k] == pytest.approx(expected, abs=1e-4)

    def test_spacing_keeps_extent(self, ramp_volume):
        out = resample(ramp_volume, (7, 4, 2))
        assert out.spacing == pytest.approx((0.5, 1.0, 3.0))

    def test_resize_array_2d(self):
        out = resize_array(np.array([[0.0, 1.0], [2.0, 3.0]]), (3, 3))
        assert out[1, 1] == pytest.approx(1.5)

    def test_resize_rank_mismatch(self):
        with pytest.raises(ShapeError):
            resize_array(np.zeros((2, 2)), (2, 2, 2))


class TestGaussianSmooth:
    def test_sigma_zero_is_identity(self, rng):
        v = Volume3(rng.random((4, 4, 4)))
        assert gaussian_smooth(v, 0) is v

    def test_constant_preserved(self):
        v = Volume3(np.full((6, 6, 6), 3.0))
        np.testing.assert_allclose(gaussian_smooth(v, 1.5).data, 3.0, atol=1e-5)

    def test_impulse_matches_dense_convolution(self):
        data = np.zeros((11, 11, 11))
        data[5, 5, 5] = 1.0
        out = gaussian_smooth(Volume3(data), 1.0)
        k = gaussian_kernel(1.0)
        dense = np.einsum("i,j,k->ijk", k, k, k)
        center = dense[len(k) // 2, len(k) // 2, len(k) // 2]
        assert out.data[5, 5, 5] == pytest.approx(center, rel=1e-5)

    def test_kernel_radius_and_mass(self):
        k = gaussian_kernel(1.5)
        assert len(k) == 2 * math.ceil(4.5) + 1
        assert k.sum() == pytest.approx(1.0)

    def test_mean_preserved_in_padded_interior(self, rng):
        data = np.zeros((20, 20, 20))
        data[6:14, 6:14, 6:14] = rng.random((8, 8, 8))
        out = gaussian_smooth(Volume3(data), 2.0)
        assert out.data.sum() == pytest.approx(data.sum(), rel=1e-3)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_smooth(Volume3(np.zeros((2, 2, 2))), -1.0)


class TestVolFiles:
    def test_round_trip_is_bit_exact(self, tmp_path, rng):
        for i in range(25):
            dims = tuple(int(n) for n in rng.integers(1, 6, size=3))
            v = Volume3(rng.normal(size=dims).astype(np.float32), tuple(rng.uniform(0.5, 2.0, 3)))
            back = read_vol(write_vol(v, tmp_path / f"v{i}.vol"))
            assert back.dims == v.dims
            assert back.spacing == pytest.approx(v.spacing)
            assert back.data.tobytes() == v.data.tobytes()

    def test_payload_is_x_fastest(self, tmp_path, ramp_volume):
        raw = write_vol(ramp_volume, tmp_path / "r.vol").read_bytes()
        (length,) = struct.unpack("<I", raw[8:12])
        values = np.frombuffer(raw[12 + length :], dtype="<f4")
        assert values[:4].tolist() == [0.0, 1.0, 2.0, 3.0]
        assert values[4] == 10.0

    def test_bad_magic(self, tmp_path, ramp_volume):
        path = write_vol(ramp_volume, tmp_path / "r.vol")
        path.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
        with pytest.raises(BadMagicError, match="bad magic"):
            read_vol(path)

    def test_length_mismatch(self, tmp_path):
        header = json.dumps({"dims": [2, 2, 2], "spacing": [1, 1, 1], "dtype": "f32"}).encode()
        body = np.zeros(7, dtype="<f4").tobytes()
        path = tmp_path / "short.vol"
        path.write_bytes(b"VOLF0001" + struct.pack("<I", len(header)) + header + body)
        with pytest.raises(LengthMismatchError, match="length mismatch"):
            read_vol(path)

    def test_non_finite_payload(self, tmp_path):
        header = json.dumps({"dims": [1, 1, 2], "spacing": [1, 1, 1], "dtype": "f32"}).encode()
        body = np.array([0.0, np.inf], dtype="<f4").tobytes()
        path = tmp_path / "inf.vol"
        path.write_bytes(b"VOLF0001" + struct.pack("<I", len(header)) + header + body)
        with pytest.raises(NonFiniteError):
            read_vol(path)

    def test_dfield_round_trip(self, tmp_path, rng):
        components = rng.normal(size=(3, 2, 3, 4)).astype(np.float32)
        path = write_dfield(components, (1.0, 2.0, 1.0), tmp_path / "u.dfield")
        back, spacing = read_dfield(path)
        assert back.tobytes() == components.tobytes()
        assert spacing == (1.0, 2.0, 1.0)
        assert read_dfield_metadata(path) == {}

    def test_dfield_metadata(self, tmp_path):
        path = write_dfield(np.zeros((3, 2, 2, 2)), (1, 1, 1), tmp_path / "u.dfield", {"k": 0.5})
        assert read_dfield_metadata(path) == {"k": 0.5}
        with pytest.raises(ValueError, match="dims"):
            write_dfield(np.zeros((3, 2, 2, 2)), (1, 1, 1), tmp_path / "v.dfield", {"dims": [1]})

    def test_vol_reader_rejects_dfield(self, tmp_path):
        path = write_dfield(np.zeros((3, 1, 1, 1)), (1, 1, 1), tmp_path / "u.dfield")
        with pytest.raises(BadMagicError):
            read_vol(path)


class TestSlices:
    def test_known_values_rescale(self):
        data = np.array([[0.0, 1 / 3], [2 / 3, 1.0]]).reshape(2, 1, 2)
        img = slice_image(Volume3(data), axis=1, index=0)
        assert sorted(img.ravel().tolist()) == [0, 85, 170, 255]

    def test_constant_export_is_uniform(self, tmp_path):
        path = export_slice(Volume3(np.full((3, 4, 5), 2.0)), 2, 1, tmp_path / "c.pgm")
        pixels = np.asarray(Image.open(path))
        assert pixels.shape == (4, 3)
        assert np.unique(pixels).size == 1
        assert path.read_bytes()[:2] == b"P5"

    def test_zero_cam_overlay(self, rng):
        base = Volume3(rng.random((4, 5, 6)))
        cam = Volume3(np.zeros((4, 5, 6)))
        out = overlay_image(base, cam, 2, 3, alpha=0.5)
        gray = slice_image(base, 2, 3).astype(float)
        expected = np.rint(0.5 * gray[..., None] + 0.5 * HOT_COLORMAP[0])
        np.testing.assert_allclose(out, expected, atol=1)

    def test_overlay_file(self, tmp_path, rng):
        base = Volume3(rng.random((4, 5, 6)))
        path = overlay_slice(base, base, 0, 2, tmp_path / "o.ppm")
        assert Image.open(path).mode == "RGB"

    def test_index_out_of_range(self, rng):
        with pytest.raises(IndexError):
            slice_image(Volume3(rng.random((2, 2, 2))), 0, 2)

    def test_dims_mismatch(self):
        with pytest.raises(ShapeError):
            overlay_image(Volume3(np.zeros((2, 2, 2))), Volume3(np.zeros((2, 2, 3))), 0, 0)

    def test_panel_grid_pads_short_rows(self, tmp_path):
        red = np.zeros((2, 3, 3), dtype=np.uint8)
        red[..., 0] = 255
        path = write_panel_grid([[red, red], [red[:1]]], tmp_path / "g.ppm", gap=1)
        sheet = np.asarray(Image.open(path))
        assert sheet.shape == (5, 7, 3)
        assert (sheet[3, :3, 0] == 255).all()
        assert not sheet[4].any()
        assert not sheet[3:, 4:].any()
        with pytest.raises(ValueError):
            write_panel_grid([[]], tmp_path / "empty.ppm")
