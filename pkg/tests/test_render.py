import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_unit
from liprf.field import VoxelField, eval_sh_basis, lift_affine_color_map, map_sh
from liprf.render import (Ray, generate_ray, pixel_directions, ray_box_intersection,
                          render_color, render_depth, render_view, render_weights, vrr)
from liprf.scene_io import Camera


def make_camera(width=8, height=8, focal=10.0, position=(0.0, 0.0, -3.0)):
    pose = np.concatenate([np.eye(3), np.asarray(position, dtype=float)[:, None]], axis=1)
    return Camera(width=width, height=height, focal=focal,
                  cx=width / 2.0, cy=height / 2.0, pose=pose)


def probe_ray(origin, direction, bounds_min, bounds_max, n_samples=16):
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    t_near, t_far, hit = ray_box_intersection(origin, direction, bounds_min, bounds_max)
    assert hit
    return Ray(np.asarray(origin, dtype=float), direction, t_near, t_far, n_samples)


def oracle_weights(sigma, t):
    """Direct per-sample transliteration of the compositing weights."""
    T = len(sigma)
    w = np.zeros(T)
    for i in range(T):
        acc = 0.0
        for k in range(i):
            acc += sigma[k] * (t[k + 1] - t[k])
        w[i] = (1.0 - np.exp(-sigma[i] * (t[i + 1] - t[i]))) * np.exp(-acc)
    return w


class TestGenerateRay:
    def test_principal_point_matches_viewing_axis(self):
        cam = make_camera(width=9, height=9)  # center pixel (4,4) has center (4.5,4.5)
        ray = generate_ray(cam, 4, 4, np.array([-0.5] * 3), np.array([0.5] * 3))
        np.testing.assert_allclose(ray.direction, cam.viewing_axis, atol=1e-6)

    def test_unit_box_intersection(self):
        cam = make_camera(width=9, height=9)
        ray = generate_ray(cam, 4, 4, np.array([-0.5] * 3), np.array([0.5] * 3))
        assert ray.t_near == pytest.approx(2.5, abs=1e-9)
        assert ray.t_far == pytest.approx(3.5, abs=1e-9)

    def test_wide_fov_corner_is_unit(self):
        cam = make_camera(width=32, height=32, focal=8.0)  # very wide field of view
        ray = generate_ray(cam, 0, 31, np.array([-0.5] * 3), np.array([0.5] * 3))
        assert np.linalg.norm(ray.direction) == pytest.approx(1.0, abs=1e-9)

    def test_miss_has_zero_samples(self):
        cam = make_camera()
        pose = cam.pose.copy()
        pose[:, :3] = -np.eye(3)  # flip: looking away from the box
        pose[1, 1] = 1.0
        away = Camera(width=8, height=8, focal=10.0, cx=4.0, cy=4.0, pose=pose)
        ray = generate_ray(away, 4, 4, np.array([-0.5] * 3), np.array([0.5] * 3))
        assert ray.n_samples == 0

    def test_pixel_out_of_frame_rejected(self):
        cam = make_camera()
        with pytest.raises(ValueError, match="outside"):
            generate_ray(cam, 8, 0, np.array([-0.5] * 3), np.array([0.5] * 3))


class TestRenderWeights:
    def test_empty_field_all_background(self):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        ray = probe_ray([0, 0, -2.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max)
        cache = render_weights(ray, fld)
        assert np.all(cache.weights == 0.0)
        assert cache.w_bg == 1.0

    def test_opaque_first_sample(self):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        fld.density[:] = 1e6
        ray = probe_ray([0, 0, -2.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max)
        cache = render_weights(ray, fld)
        assert cache.weights[0] == pytest.approx(1.0, abs=1e-9)
        assert np.all(cache.weights[1:] <= 1e-9)

    def test_matches_double_loop_oracle(self, small_field, rng):
        for _ in range(20):
            origin = 3.0 * random_unit(rng)
            target = rng.uniform(-0.5, 0.5, 3)
            ray = probe_ray(origin, target - origin, small_field.bounds_min,
                            small_field.bounds_max, n_samples=32)
            cache = render_weights(ray, small_field)
            np.testing.assert_allclose(cache.weights,
                                       oracle_weights(cache.sigma, cache.t),
                                       atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 10_000))
    def test_weights_partition_unity(self, n_samples, seed):
        rng = np.random.default_rng(seed)
        fld = VoxelField.zeros((5, 5, 5), [-1, -1, -1], [1, 1, 1])
        fld.density[:] = rng.uniform(0.0, 50.0, size=fld.density.shape)
        ray = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.4, 0.4, 3) - 3.0 * random_unit(rng),
                        fld.bounds_min, fld.bounds_max, n_samples)
        cache = render_weights(ray, fld)
        assert np.all(cache.weights >= 0.0)
        assert cache.weights.sum() + cache.w_bg == pytest.approx(1.0, abs=1e-9)

    def test_requires_samples(self, small_field):
        ray = Ray(np.zeros(3), np.array([0, 0, 1.0]), 0.0, 0.0, 0)
        with pytest.raises(ValueError, match="sample"):
            render_weights(ray, small_field)


class TestRenderColor:
    def test_empty_field_is_background(self):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        ray = probe_ray([0, 0, -2.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max)
        np.testing.assert_allclose(render_color(ray, fld, (0.2, 0.4, 0.6)),
                                   [0.2, 0.4, 0.6], atol=1e-12)

    def test_opaque_constant_region(self):
        fld = VoxelField.zeros((16, 16, 16), [-1, -1, -1], [1, 1, 1])
        fld.density[:] = 500.0
        rgb = np.array([0.7, 0.2, 0.4])
        fld.sh[..., :, 0] = (rgb - 0.5) * 2.0 * np.sqrt(np.pi)
        ray = probe_ray([0, 0, -2.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max,
                        n_samples=64)
        np.testing.assert_allclose(render_color(ray, fld), rgb, atol=1e-3)

    def test_affine_map_commutes_with_render(self, small_field, rng):
        # rendering the lifted field equals mapping the rendered color,
        # provided the background color is mapped the same way
        matrix = rng.standard_normal((3, 3)) * 0.5
        shift = rng.standard_normal(3) * 0.2
        mapped = map_sh(small_field,
                        lift_affine_color_map(matrix, shift, small_field.v,
                                              small_field.n_coeffs))
        bg = np.array([1.0, 1.0, 1.0])
        bg_mapped = matrix @ bg + shift
        for _ in range(10):
            ray = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                            small_field.bounds_min, small_field.bounds_max, 24)
            want = matrix @ render_color(ray, small_field, bg) + shift
            got = render_color(ray, mapped, bg_mapped)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_miss_ray_returns_background(self, small_field):
        ray = Ray(np.array([0, 0, -3.0]), np.array([0.0, 0.0, 1.0]), 0.0, 0.0, 0)
        np.testing.assert_allclose(render_color(ray, small_field, (0.1, 0.5, 0.9)),
                                   [0.1, 0.5, 0.9])


class TestRenderDepth:
    def test_empty_field_reports_far(self):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        ray = probe_ray([0, 0, -2.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max)
        assert render_depth(ray, fld) == pytest.approx(ray.t_far, abs=1e-12)

    def test_opaque_front_reports_first_midpoint(self):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        fld.density[:] = 1e7
        ray = probe_ray([0, 0, -2.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max,
                        n_samples=10)
        width = (ray.t_far - ray.t_near) / 10
        assert render_depth(ray, fld) == pytest.approx(ray.t_near + width / 2, abs=1e-6)

    def test_two_surface_depth_between(self, rng):
        fld = VoxelField.zeros((32, 32, 32), [-1, -1, -1], [1, 1, 1])
        # a semi-transparent slab in front of an opaque one
        fld.density[:, :, 4:8] = 8.0
        fld.density[:, :, 24:28] = 200.0
        ray = probe_ray([0, 0, -3.0], [0, 0, 1.0], fld.bounds_min, fld.bounds_max,
                        n_samples=128)
        z_hit = render_depth(ray, fld) - 3.0  # ray starts at z = -3 along +z
        zs = np.linspace(-1, 1, 32)
        assert zs[4] < z_hit < zs[28]

    def test_composited_depth_matches_oracle(self, small_field, rng):
        for _ in range(5):
            ray = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                            small_field.bounds_min, small_field.bounds_max, 32)
            cache = render_weights(ray, small_field)
            mids = 0.5 * (cache.t[:-1] + cache.t[1:])
            want = float(cache.weights @ mids + cache.w_bg * ray.t_far)
            assert render_depth(ray, small_field) == pytest.approx(want, abs=1e-12)


class TestRenderView:
    def test_matches_per_pixel_path(self, small_field):
        cam = make_camera(width=6, height=5, focal=7.0)
        image = render_view(cam, small_field, n_samples=16)
        for v in range(5):
            for u in range(6):
                ray = generate_ray(cam, u, v, small_field.bounds_min,
                                   small_field.bounds_max, 16)
                want = np.clip(render_color(ray, small_field), 0.0, 1.0)
                np.testing.assert_allclose(image[v, u], want, atol=1e-10)

    def test_depth_output_matches(self, small_field):
        cam = make_camera(width=4, height=4, focal=5.0)
        _, depth = render_view(cam, small_field, n_samples=16, with_depth=True)
        ray = generate_ray(cam, 2, 1, small_field.bounds_min, small_field.bounds_max, 16)
        assert depth[1, 2] == pytest.approx(render_depth(ray, small_field), abs=1e-10)


class TestVrr:
    def test_identical_rays_zero(self, small_field):
        ray = probe_ray([0, 0, -2.5], [0, 0.02, 1.0], small_field.bounds_min,
                        small_field.bounds_max)
        assert vrr(ray, ray, small_field) == 0.0

    def test_empty_field_zero(self, rng):
        fld = VoxelField.zeros((4, 4, 4), [-1, -1, -1], [1, 1, 1])
        r1 = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                       fld.bounds_min, fld.bounds_max)
        r2 = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                       fld.bounds_min, fld.bounds_max)
        assert vrr(r1, r2, fld) == 0.0

    def test_definitional(self, small_field, rng):
        r1 = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                       small_field.bounds_min, small_field.bounds_max)
        r2 = probe_ray(3.0 * random_unit(rng), rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                       small_field.bounds_min, small_field.bounds_max)
        want = np.linalg.norm(render_color(r1, small_field) - render_color(r2, small_field))
        assert vrr(r1, r2, small_field) == pytest.approx(want, abs=1e-12)

    def test_sample_count_mismatch_rejected(self, small_field, rng):
        r1 = probe_ray([0, 0, -2.0], [0, 0, 1.0], small_field.bounds_min,
                       small_field.bounds_max, 8)
        r2 = probe_ray([0, 0, -2.0], [0, 0.1, 1.0], small_field.bounds_min,
                       small_field.bounds_max, 16)
        with pytest.raises(ValueError, match="mismatch"):
            vrr(r1, r2, small_field)

    def test_pseudometric_on_random_triples(self, small_field, rng):
        def rand_ray():
            return probe_ray(3.0 * random_unit(rng),
                             rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                             small_field.bounds_min, small_field.bounds_max, 16)

        for _ in range(20):
            a, b, c = rand_ray(), rand_ray(), rand_ray()
            dab = vrr(a, b, small_field)
            dba = vrr(b, a, small_field)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab >= 0.0
            assert dab <= vrr(a, c, small_field) + vrr(c, b, small_field) + 1e-9

    def test_superposition_linearity(self, small_field, rng):
        # with fixed geometry the rendered color is linear in the coefficients
        f1 = small_field
        f2 = small_field.copy()
        f2.sh[:] = rng.normal(0.0, 0.3, size=f2.sh.shape)
        mix = small_field.copy()
        mix.sh = 0.3 * f1.sh + 0.7 * f2.sh
        bg = np.zeros(3)
        for _ in range(5):
            ray = probe_ray(3.0 * random_unit(rng),
                            rng.uniform(-0.5, 0.5, 3) - 3.0 * random_unit(rng),
                            f1.bounds_min, f1.bounds_max, 16)
            got = render_color(ray, mix, bg)
            want = (0.3 * render_color(ray, f1, bg) + 0.7 * render_color(ray, f2, bg))
            np.testing.assert_allclose(got, want, atol=1e-6)
