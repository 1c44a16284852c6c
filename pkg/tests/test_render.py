"""Renderer tests: analytic slabs, quadrature oracles, blur compositor."""

import numpy as np
import pytest

from evsharp import autodiff as ad
from evsharp import field, geom, render


def make_field(density_bias=0.0, seed=0):
    cfg = field.FieldConfig(grid_levels=(4, 8), density_width=16, color_width=16)
    p = field.init_params(cfg, 1, seed=seed)
    p.arrays["den_w2"][:] = 0.0
    p.arrays["den_b2"][0] = density_bias
    return p


def cam():
    return geom.CameraIntrinsics(fx=40.0, fy=40.0, cx=16.0, cy=12.0,
                                 width=32, height=24)


def inside_pose():
    # mid-cube camera looking toward +z
    return geom.Pose(np.array([1.0, 0, 0, 0]), np.array([0.5, 0.5, 0.1]))


class TestSampleRay:
    def test_bin_centers(self):
        ray = geom.Ray(np.zeros(3), np.array([0, 0, 1.0]))
        d = render.sample_ray(ray, 1.0, 2.0, 2)
        assert np.allclose(d, [1.25, 1.75])

    def test_stratified_draws_stay_in_bins(self):
        rng = np.random.default_rng(0)
        ray = geom.Ray(np.zeros(3), np.array([0, 0, 1.0]))
        for _ in range(20):
            d = render.sample_ray(ray, 1.0, 3.0, 8, stratified=True, rng=rng)
            edges = np.linspace(1.0, 3.0, 9)
            assert np.all(d >= edges[:-1]) and np.all(d < edges[1:])

    def test_stratified_mean_is_bin_center(self):
        rng = np.random.default_rng(1)
        frac = render.sample_fractions(10_000, 4, stratified=True, rng=rng)
        centers = (np.arange(4) + 0.5) / 4
        sigma_mean = (1.0 / 4) / np.sqrt(12 * 10_000)
        assert np.abs(frac.mean(axis=0) - centers).max() < 3 * sigma_mean

    def test_degenerate_bounds_rejected(self):
        ray = geom.Ray(np.zeros(3), np.array([0, 0, 1.0]))
        with pytest.raises(ValueError):
            render.sample_ray(ray, 2.0, 1.0, 4)


class TestVolumeRender:
    def _samples(self, sigma, color, near=0.1, far=1.1, n=256):
        depths = near + (np.arange(n) + 0.5) / n * (far - near)
        deltas = render.deltas_from_depths(depths, far)
        return render.RaySamples(depths, deltas,
                                 np.full(n, sigma),
                                 np.tile(color, (n, 1)))

    def test_empty_space_is_black(self):
        out = render.volume_render(self._samples(0.0, np.array([1.0, 0.5, 0.2])))
        assert np.allclose(out.color, 0) and out.opacity == 0

    def test_homogeneous_slab_analytic(self):
        sigma, length = 2.5, 1.0
        c = np.array([0.8, 0.4, 0.1])
        out = render.volume_render(self._samples(sigma, c, near=0.1,
                                                 far=0.1 + length, n=256))
        want = c * (1.0 - np.exp(-sigma * length))
        assert np.abs(out.color - want).max() < 1e-3
        assert out.opacity == pytest.approx(1.0 - np.exp(-sigma * length), abs=1e-3)

    def test_piecewise_scene_matches_fine_quadrature(self):
        # piecewise-constant density/color with breakpoints on a 1/16 lattice;
        # sampling at segment starts makes each segment see one piece only
        rng = np.random.default_rng(2)
        sigmas = rng.uniform(0.0, 6.0, size=16)
        colors = rng.uniform(0.0, 1.0, size=(16, 3))

        def evaluate(n):
            depths = 0.05 + np.arange(n) / n * 0.95
            deltas = render.deltas_from_depths(depths, 1.0)
            piece = (np.arange(n) * 16) // n  # exact piece-per-segment lattice
            s = render.RaySamples(depths, deltas, sigmas[piece], colors[piece])
            return render.volume_render(s)

        coarse, fine = evaluate(64), evaluate(64 * 16)
        assert np.abs(coarse.color - fine.color).max() < 1e-3
        assert abs(coarse.opacity - fine.opacity) < 1e-3

    def test_negative_density_rejected(self):
        s = self._samples(1.0, np.array([1.0, 1, 1]))
        s.density[3] = -0.1
        with pytest.raises(ValueError):
            render.volume_render(s)

    def test_transmittance_weights_and_empty_insertion(self):
        rng = np.random.default_rng(3)
        n = 32
        depths = np.sort(rng.uniform(0.1, 1.0, size=n))
        deltas = render.deltas_from_depths(depths, 1.05)
        density = rng.uniform(0, 8, size=n)
        color = rng.uniform(size=(n, 3))
        out = render.volume_render(render.RaySamples(depths, deltas, density, color))
        assert 0.0 <= out.opacity <= 1.0

        # transmittance non-increasing
        tau = density * deltas
        transmittance = np.exp(-(np.cumsum(tau) - tau))
        assert np.all(np.diff(transmittance) <= 1e-15)

        # adding an empty sample (alpha = 0) anywhere changes nothing;
        # existing samples keep their own segment lengths
        at = 11
        t_new = 0.5 * (depths[at] + depths[at + 1])
        depths2 = np.insert(depths, at + 1, t_new)
        deltas2 = np.insert(deltas, at + 1, depths[at + 1] - t_new)
        density2 = np.insert(density, at + 1, 0.0)
        color2 = np.insert(color, at + 1, [0.3, 0.3, 0.3], axis=0)
        out2 = render.volume_render(render.RaySamples(depths2, deltas2, density2, color2))
        assert np.abs(out2.color - out.color).max() < 1e-12
        assert abs(out2.opacity - out.opacity) < 1e-12

    def test_integrate_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        n = 8
        deltas = rng.uniform(0.01, 0.1, size=(2, n))

        def f(vs):
            color, opacity, _ = render.integrate(
                ad.softplus(vs[0]), ad.sigmoid(vs[1]), ad.sigmoid(vs[1] * 0.5),
                ad.sigmoid(-vs[1]), deltas)
            return ad.sum(color) + ad.sum(opacity)

        err = ad.grad_check(f, [rng.normal(size=(2, n)), rng.normal(size=(2, n))])
        assert err < 1e-5


class TestRenderPixel:
    def test_zero_density_field_is_black(self):
        p = make_field(density_bias=-40.0)
        out = render.render_pixel(p, cam(), inside_pose(), 5, 5, np.zeros(32),
                                  n_samples=32)
        assert np.abs(out.color).max() < 1e-12
        assert out.opacity < 1e-12

    def test_opaque_field_returns_field_color(self):
        p = make_field(density_bias=60.0)
        out = render.render_pixel(p, cam(), inside_pose(), 16, 12, np.zeros(32),
                                  n_samples=128)
        assert abs(out.opacity - 1.0) < 1e-6
        assert np.abs(out.color - 0.5).max() < 1e-6  # zero color head


class TestRenderBlur:
    def test_static_trajectory_equals_sharp(self):
        p = make_field(density_bias=1.0, seed=3)
        pose = inside_pose()
        rng = np.random.default_rng(5)
        blur = render.render_blur(p, cam(), (pose, pose), 0.5, 0.2, 4,
                                  10, 10, np.zeros(32), rng, n_samples=32)
        sharp = render.render_pixel(p, cam(), pose, 10, 10, np.zeros(32),
                                    n_samples=32)
        assert np.abs(blur - sharp.color).max() < 1e-12

    def test_single_sample_matches_interpolated_render(self):
        p = make_field(density_bias=1.0, seed=3)
        p0 = inside_pose()
        p1 = geom.Pose(p0.rotation, p0.translation + [0.05, 0, 0])
        t_mid, tau = 0.5, 0.2
        blur = render.render_blur(p, cam(), (p0, p1), t_mid, tau, 1,
                                  12, 9, np.zeros(32),
                                  np.random.default_rng(42), n_samples=32)
        t = render.blur_sample_times(t_mid, tau, 1, np.random.default_rng(42))[0]
        alpha = (t - (t_mid - tau / 2)) / tau
        pose = geom.interp_pose(p0, p1, alpha)
        sharp = render.render_pixel(p, cam(), pose, 12, 9, np.zeros(32),
                                    n_samples=32)
        assert np.abs(blur - sharp.color).max() < 1e-14

    def test_mean_of_individual_renders_exactly(self):
        p = make_field(density_bias=1.0, seed=7)
        p0 = inside_pose()
        p1 = geom.Pose(p0.rotation, p0.translation + [0.03, 0.02, 0])
        t_mid, tau, n = 1.0, 0.3, 4
        blur = render.render_blur(p, cam(), (p0, p1), t_mid, tau, n, 7, 7,
                                  np.zeros(32), np.random.default_rng(9),
                                  n_samples=32)
        times = render.blur_sample_times(t_mid, tau, n, np.random.default_rng(9))
        parts = [render.render_pixel(
            p, cam(), pose, 7, 7, np.zeros(32), n_samples=32).color
            for pose in render.blur_poses((p0, p1), t_mid, tau, times)]
        assert np.array_equal(blur, np.mean(parts, axis=0))
        # permutation invariance of the mean
        assert np.abs(blur - np.mean(parts[::-1], axis=0)).max() < 1e-15

    def test_dense_time_oracle(self):
        # moving camera across a high-contrast field: n=64 vs 1024-sample mean
        rng = np.random.default_rng(11)
        p = make_field(density_bias=4.0, seed=5)
        p.arrays["col_w2"] = rng.normal(size=p.arrays["col_w2"].shape)
        for li in range(2):
            p.arrays[f"grid{li}"] = 0.5 * rng.normal(size=p.arrays[f"grid{li}"].shape)
        p0 = inside_pose()
        p1 = geom.Pose(p0.rotation, p0.translation + [0.04, 0.0, 0.0])
        k = cam()
        diffs = []
        for (x, y) in [(4, 4), (10, 12), (16, 8), (22, 18), (28, 12)]:
            got = render.render_blur(p, k, (p0, p1), 0.5, 0.4, 64, x, y,
                                     np.zeros(32), np.random.default_rng(100 + x),
                                     n_samples=24)
            want = render.render_blur(p, k, (p0, p1), 0.5, 0.4, 1024, x, y,
                                      np.zeros(32), np.random.default_rng(7_000 + y),
                                      n_samples=24)
            diffs.append(np.abs(got - want).max())
        assert np.mean(diffs) < 2e-2


class TestRayBoxBounds:
    def test_inside_origin(self):
        near, far = render.ray_box_bounds(np.array([0.5, 0.5, 0.5]),
                                          np.array([0.0, 0.0, 1.0]))
        assert near == pytest.approx(1e-6)
        assert far == pytest.approx(0.5)

    def test_diagonal(self):
        d = np.ones(3) / np.sqrt(3)
        near, far = render.ray_box_bounds(np.array([0.1, 0.1, 0.1]), d)
        assert far == pytest.approx(0.9 * np.sqrt(3), rel=1e-9)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(12)
        o = rng.uniform(0.2, 0.8, size=(10, 3))
        d = rng.normal(size=(10, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        near, far = render.ray_box_bounds(o, d)
        for i in range(10):
            n1, f1 = render.ray_box_bounds(o[i], d[i])
            assert near[i] == pytest.approx(n1)
            assert far[i] == pytest.approx(f1)
