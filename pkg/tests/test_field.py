import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import lpmv

from conftest import random_unit
from liprf.field import (VoxelField, eval_color, eval_sh_basis, lift_affine_color_map,
                         map_sh, n_sh_coeffs, sample_field)

SH_CONST = 0.28209479177387814


def reference_sh_basis(direction, degree):
    """Independent oracle: associated-Legendre route in spherical coordinates.

    Real basis with the Condon-Shortley phase folded back out, matching
    the Cartesian polynomial convention of the implementation.
    """
    x, y, z = direction
    theta = np.arccos(np.clip(z, -1.0, 1.0))
    phi = np.arctan2(y, x)
    out = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            am = abs(m)
            norm = np.sqrt((2 * l + 1) / (4 * np.pi)
                           * np.math.factorial(l - am) / np.math.factorial(l + am))
            p = lpmv(am, l, np.cos(theta)) * (-1.0) ** am  # undo CS phase
            if m == 0:
                out.append(norm * p)
            elif m > 0:
                out.append(np.sqrt(2.0) * norm * np.cos(m * phi) * p)
            else:
                out.append(np.sqrt(2.0) * norm * np.sin(am * phi) * p)
    return np.array(out)


class TestShBasis:
    def test_constant_component(self, rng):
        for _ in range(20):
            d = random_unit(rng)
            assert eval_sh_basis(d, 2)[0] == pytest.approx(SH_CONST, abs=1e-12)

    def test_degree_zero_length(self):
        assert eval_sh_basis([0.0, 0.0, 1.0], 0).shape == (1,)

    def test_matches_legendre_oracle(self, rng):
        for degree in (0, 1, 2):
            for _ in range(50):
                d = random_unit(rng)
                got = eval_sh_basis(d, degree)
                want = reference_sh_basis(d, degree)
                np.testing.assert_allclose(got, want, atol=1e-12)

    def test_z_axis_values(self):
        got = eval_sh_basis(np.array([0.0, 0.0, 1.0]), 2)
        want = reference_sh_basis(np.array([0.0, 0.0, 1.0]), 2)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_rejects_non_unit(self):
        with pytest.raises(ValueError, match="unit"):
            eval_sh_basis([1.0, 1.0, 0.0], 2)

    def test_batched_matches_single(self, rng):
        dirs = random_unit(rng, 9)
        batch = eval_sh_basis(dirs, 2)
        for i, d in enumerate(dirs):
            np.testing.assert_array_equal(batch[i], eval_sh_basis(d, 2))


class TestSampling:
    def test_vertex_exact(self, small_field):
        fld = small_field
        pos = fld.vertex_positions().reshape(8, 8, 8, 3)
        s = sample_field(fld, pos[3, 5, 2])
        assert s.density == pytest.approx(fld.density[3, 5, 2], abs=1e-12)
        np.testing.assert_allclose(s.sh, fld.sh[3, 5, 2], atol=1e-12)

    def test_cell_center_is_corner_mean(self, small_field):
        fld = small_field
        pos = fld.vertex_positions().reshape(8, 8, 8, 3)
        center = 0.5 * (pos[2, 2, 2] + pos[3, 3, 3])
        s = sample_field(fld, center)
        corners = fld.density[2:4, 2:4, 2:4]
        assert s.density == pytest.approx(corners.mean(), rel=1e-12)

    def test_outside_is_zero(self, small_field):
        s = sample_field(small_field, np.array([2.0, 0.0, 0.0]))
        assert s.density == 0.0
        assert not s.inside
        assert np.all(s.sh == 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
    def test_trilinear_exact_on_linear_fields(self, x, y, z):
        # coefficients varying linearly per axis are reproduced exactly
        fld = VoxelField.zeros((5, 6, 7), np.array([-1.0, -1.0, -1.0]),
                               np.array([1.0, 1.0, 1.0]))
        pos = fld.vertex_positions()
        lin = (0.7 * pos[:, 0] - 0.3 * pos[:, 1] + 0.1 * pos[:, 2] + 0.25)
        fld.sh[..., 0, 0] = lin.reshape(5, 6, 7)
        got = sample_field(fld, np.array([x, y, z])).sh[0, 0]
        want = 0.7 * x - 0.3 * y + 0.1 * z + 0.25
        assert got == pytest.approx(want, abs=1e-6)


class TestEvalColor:
    def test_zero_sh_gives_offset(self, rng):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        for _ in range(5):
            c = eval_color(fld, rng.uniform(-1, 1, 3), random_unit(rng))
            np.testing.assert_allclose(c, [0.5, 0.5, 0.5], atol=1e-12)

    def test_constant_column_algebra(self, rng):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        rgb = np.array([0.1, 0.2, 0.3])
        fld.sh[..., :, 0] = 2.0 * np.sqrt(np.pi) * rgb
        c = eval_color(fld, np.zeros(3), random_unit(rng))
        np.testing.assert_allclose(c, fld.v + rgb, atol=1e-12)

    def test_direction_dependence_above_degree_zero(self, small_field, rng):
        x = np.array([0.1, -0.2, 0.3])
        c1 = eval_color(small_field, x, np.array([0.0, 0.0, 1.0]))
        c2 = eval_color(small_field, x, np.array([1.0, 0.0, 0.0]))
        assert np.linalg.norm(c1 - c2) > 1e-6

    def test_linear_in_coefficients(self, small_field, rng):
        other = small_field.copy()
        other.sh[:] = rng.normal(0.0, 0.3, size=other.sh.shape)
        summed = small_field.copy()
        summed.sh = small_field.sh + other.sh
        x = rng.uniform(-0.9, 0.9, 3)
        d = random_unit(rng)
        lhs = eval_color(summed, x, d)
        rhs = eval_color(small_field, x, d) + eval_color(other, x, d) - summed.v
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)


class TestMapSh:
    def test_identity_bit_exact(self, small_field):
        out = map_sh(small_field, lambda sh, pos: sh)
        np.testing.assert_array_equal(out.sh, small_field.sh)
        np.testing.assert_array_equal(out.density, small_field.density)

    def test_halving(self, small_field):
        out = map_sh(small_field, lambda sh, pos: 0.5 * sh)
        np.testing.assert_array_equal(out.sh, 0.5 * small_field.sh)

    def test_source_unmodified(self, small_field):
        before = small_field.sh.copy()
        map_sh(small_field, lambda sh, pos: sh * 0.0)
        np.testing.assert_array_equal(small_field.sh, before)

    def test_nonfinite_rejected(self, small_field):
        with pytest.raises(ValueError, match="finite"):
            map_sh(small_field, lambda sh, pos: sh * np.inf)

    def test_affine_lift_matches_pixel_map(self, small_field, rng):
        # coefficient-space affine lift reproduces the pixel-space map
        matrix = rng.standard_normal((3, 3))
        shift = rng.standard_normal(3)
        fld2 = map_sh(small_field,
                      lift_affine_color_map(matrix, shift, small_field.v,
                                            small_field.n_coeffs))
        for _ in range(20):
            x = rng.uniform(-0.9, 0.9, 3)
            d = random_unit(rng)
            want = matrix @ eval_color(small_field, x, d) + shift
            got = eval_color(fld2, x, d)
            np.testing.assert_allclose(got, want, atol=1e-10)
