import numpy as np
import pytest

from utrice.appearance import SH_C0
from utrice.camera import Camera, RayBatch, generate_rays, look_at
from utrice.constants import RESPONSE_EPS, T_MIN
from utrice.geometry import Ray, TriangleSoup
from utrice.reference import ray_hits_reference, trace_rays_reference
from utrice.tracer import TracerScene, render_image

from conftest import quad_stack_soup, random_rays, random_soup


def brute_force_k_closest(frames, origin, direction, t_start, k):
    ids, t, rho = ray_hits_reference(frames, origin, direction, t_start=t_start)
    return ids[:k], t[:k], rho[:k]


class TestKClosest:
    def test_quad_stack_oracle(self, warm_kernels):
        soup = quad_stack_soup(10)
        scene = TracerScene(soup)
        ray = Ray(np.array([0.15, -0.1, 0.0]), np.array([0.0, 0, 1.0]))
        buf = scene.trace_k_closest(ray, t_start=0.0, k=4)
        ids, t, rho = brute_force_k_closest(scene.frames, ray.origin,
                                            ray.direction, 0.0, 4)
        assert len(buf) == 4
        assert np.array_equal(buf.tri, scene.frames.tri_index[ids])
        assert np.array_equal(buf.t, t)
        assert np.array_equal(buf.rho, rho)
        assert np.all(np.diff(buf.t) >= 0)

    def test_random_scene_oracle(self, warm_kernels):
        rng = np.random.default_rng(0)
        soup = random_soup(150, rng)
        scene = TracerScene(soup)
        for _ in range(100):
            o, d = random_rays(1, rng)
            t_start = rng.uniform(0.0, 2.0)
            k = int(rng.integers(1, 12))
            buf = scene.trace_k_closest(Ray(o[0], d[0]), t_start, k)
            ids, t, rho = brute_force_k_closest(scene.frames, o[0], d[0],
                                                t_start, k)
            assert np.array_equal(buf.tri, scene.frames.tri_index[ids])
            assert np.array_equal(buf.t, t)

    def test_miss_returns_empty(self, warm_kernels):
        soup = quad_stack_soup(3)
        scene = TracerScene(soup)
        buf = scene.trace_k_closest(Ray(np.array([10.0, 10, 0]),
                                        np.array([0.0, 0, 1.0])), 0.0, 4)
        assert len(buf) == 0

    def test_t_start_past_everything(self, warm_kernels):
        soup = quad_stack_soup(3)
        scene = TracerScene(soup)
        ray = Ray(np.array([0.2, -0.3, 0]), np.array([0.0, 0, 1.0]))
        assert len(scene.trace_k_closest(ray, t_start=100.0, k=4)) == 0
        # exactly at the last hit depth: ties at t_start are excluded
        full = scene.trace_k_closest(ray, 0.0, 16)
        assert len(scene.trace_k_closest(ray, float(full.t[-1]), 4)) == 0


class TestTraceRay:
    def test_single_hit_blending(self, warm_kernels):
        soup = quad_stack_soup(1)
        soup.sh[:, :, 0] = np.array([0.3, -0.2, 0.6])[None] / SH_C0
        scene = TracerScene(soup)
        # through the first triangle's incenter region only
        state, rec = scene.trace_ray(
            Ray(np.array([0.2, -0.5, 0]), np.array([0.0, 0, 1.0])),
            record=True)
        n = int(rec.count[0])
        assert n >= 1
        alpha = rec.alpha[0, 0]
        color = np.clip(np.array([0.3, -0.2, 0.6]) + 0.5, 0, 1)
        if n == 1:
            assert np.allclose(state.rgb, alpha * color, atol=1e-12)
            assert abs(state.transmittance - (1 - alpha)) < 1e-12

    def test_two_hit_blending_formula(self, warm_kernels):
        soup = quad_stack_soup(2)
        scene = TracerScene(soup)
        ray = Ray(np.array([0.2, -0.25, 0]), np.array([0.0, 0, 1.0]))
        state, rec = scene.trace_ray(ray, record=True)
        n = int(rec.count[0])
        basis_color = []
        from utrice.appearance import sh_eval
        for j in range(n):
            tri = int(rec.tri[0, j])
            basis_color.append(sh_eval(soup.sh[tri][None], ray.direction[None])[0])
        expect = np.zeros(3)
        t = 1.0
        for j in range(n):
            a = rec.alpha[0, j]
            expect += t * a * basis_color[j]
            t *= 1 - a
        assert np.allclose(state.rgb, expect, atol=1e-12)
        if n == 2:
            a1, a2 = rec.alpha[0, :2]
            c1, c2 = basis_color
            assert np.allclose(state.rgb, a1 * c1 + (1 - a1) * a2 * c2,
                               atol=1e-12)

    def test_matches_brute_force_oracle(self, warm_kernels):
        rng = np.random.default_rng(1)
        for trial in range(15):
            soup = random_soup(int(rng.integers(5, 300)), rng)
            scene = TracerScene(soup)
            o, d = random_rays(200, rng)
            out = scene.trace_rays(RayBatch(o, d), workers=1)
            rgb, dep, nrm, tr = trace_rays_reference(scene.frames, o, d)
            assert np.abs(out.rgb - rgb).max() < 1e-6
            assert np.abs(out.transmittance - tr).max() < 1e-6
            assert np.abs(out.depth - dep).max() < 1e-6
            assert np.abs(out.normal - nrm).max() < 1e-6

    def test_k_independence_bitwise(self, warm_kernels):
        rng = np.random.default_rng(2)
        soup = random_soup(250, rng)
        o, d = random_rays(400, rng)
        outs = [TracerScene(soup, k=k).trace_rays(RayBatch(o, d), workers=1)
                for k in (4, 8, 16)]
        for other in outs[1:]:
            assert np.array_equal(outs[0].rgb, other.rgb)
            assert np.array_equal(outs[0].transmittance, other.transmittance)

    def test_transmittance_monotone(self, warm_kernels):
        rng = np.random.default_rng(3)
        soup = random_soup(200, rng)
        scene = TracerScene(soup)
        o, d = random_rays(100, rng)
        out = scene.trace_rays(RayBatch(o, d), record=True, workers=1)
        assert np.all(out.transmittance >= 0.0)
        assert np.all(out.transmittance <= 1.0)
        for r in range(100):
            n = int(out.records.count[r])
            t = 1.0
            for j in range(n):
                t_next = t * (1 - out.records.alpha[r, j])
                assert t_next <= t
                t = t_next

    def test_determinism(self, warm_kernels):
        rng = np.random.default_rng(4)
        soup = random_soup(120, rng)
        o, d = random_rays(300, rng)
        a = TracerScene(soup).trace_rays(RayBatch(o, d), workers=1)
        b = TracerScene(soup).trace_rays(RayBatch(o, d), workers=1)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth, b.depth)

    def test_response_filter_matches_contract(self, warm_kernels):
        # every recorded hit satisfies rho > RESPONSE_EPS and t > T_MIN
        rng = np.random.default_rng(5)
        soup = random_soup(100, rng)
        scene = TracerScene(soup)
        o, d = random_rays(200, rng)
        out = scene.trace_rays(RayBatch(o, d), record=True, workers=1)
        live = out.records.tri >= 0
        assert np.all(out.records.rho[live] > RESPONSE_EPS)
        assert np.all(out.records.t[live] > T_MIN)


class TestRenderImage:
    def _camera(self, res=24):
        R, t = look_at((0, 0, -4.0), (0, 0, 0))
        f = res * 1.2
        return Camera(R, t, f, f, res / 2, res / 2, res, res)

    def test_empty_scene_is_background(self, warm_kernels):
        soup = TriangleSoup(np.zeros((0, 3, 3)), np.zeros((0, 3, 16)),
                            np.zeros(0), np.zeros(0))
        scene = TracerScene(soup)
        img = render_image(scene, self._camera(), background=(0.2, 0.4, 0.6))
        assert np.allclose(img.rgb, [0.2, 0.4, 0.6])
        assert np.allclose(img.transmittance, 1.0)

    def test_solid_triangle_band0_color(self, warm_kernels):
        # one large nearly-opaque triangle with sigma -> 0 covering the frame
        v = np.array([[[-40.0, -40, 0], [40.0, -40, 0], [0.0, 60, 0]]])
        sh = np.zeros((1, 3, 16))
        color = np.array([0.8, 0.3, 0.55])
        sh[0, :, 0] = (color - 0.5) / SH_C0
        soup = TriangleSoup(v, sh, np.array([9.0]), np.array([0.01]))
        scene = TracerScene(soup)
        img = render_image(scene, self._camera())
        center = img.rgb[8:16, 8:16]
        assert np.abs(center - color).max() < 2e-3

    def test_spp_center_sampling_identical(self, warm_kernels):
        rng = np.random.default_rng(6)
        soup = random_soup(40, rng)
        scene = TracerScene(soup)
        cam = self._camera()
        img1 = render_image(scene, cam, spp=1, sampling="center")
        img2 = render_image(scene, cam, spp=2, sampling="center")
        assert np.array_equal(img1.rgb, img2.rgb)

    def test_stats_plumbing(self, warm_kernels):
        soup = quad_stack_soup(4)
        scene = TracerScene(soup)
        cam = self._camera()
        R, t = look_at((0, 0, -3.0), (0, 0, 1.0))
        cam = Camera(R, t, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        img, out = render_image(scene, cam, stats=True)
        assert out.hit_mask.any()
        assert out.omega_max[out.hit_mask].max() > 0.0


class TestCamera:
    def test_aperture_zero_equals_pinhole(self):
        cam = Camera(np.eye(3), np.zeros(3), 30, 30, 16, 16, 32, 32,
                     aperture=0.0, focal_distance=2.0)
        rays0 = generate_rays(cam, "center", 1)
        cam2 = Camera(np.eye(3), np.zeros(3), 30, 30, 16, 16, 32, 32)
        rays1 = generate_rays(cam2, "center", 1)
        assert np.array_equal(rays0.origins, rays1.origins)
        assert np.array_equal(rays0.directions, rays1.directions)

    def test_center_pixel_is_optical_axis(self):
        cam = Camera(np.eye(3), np.zeros(3), 40, 40, 16, 16, 32, 32)
        rays = generate_rays(cam, "center", 1)
        idx = 16 * 32 + 16
        # pixel center (16.5, 16.5) is half a pixel off cx=16; use cx=16.5
        cam2 = Camera(np.eye(3), np.zeros(3), 40, 40, 16.5, 16.5, 32, 32)
        rays2 = generate_rays(cam2, "center", 1)
        assert np.allclose(rays2.directions[idx], [0, 0, 1], atol=1e-12)

    def test_pinhole_origin_is_camera_center(self):
        rng = np.random.default_rng(7)
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        t = rng.normal(size=3)
        cam = Camera(q, t, 30, 30, 12, 12, 24, 24)
        rays = generate_rays(cam, "center", 1)
        assert np.allclose(rays.origins, cam.center[None, :], atol=1e-12)

    def test_directions_unit(self):
        cam = Camera(np.eye(3), np.zeros(3), 30, 30, 16, 16, 32, 32,
                     aperture=0.3, focal_distance=2.5)
        rays = generate_rays(cam, "jittered", 2, np.random.default_rng(0))
        norms = np.linalg.norm(rays.directions, axis=-1)
        assert np.abs(norms - 1).max() < 1e-12

    def test_thin_lens_focus_point(self):
        # all lens samples of one pixel converge at the in-focus point
        cam = Camera(np.eye(3), np.zeros(3), 30, 30, 16, 16, 32, 32,
                     aperture=0.4, focal_distance=3.0)
        rng = np.random.default_rng(1)
        rays = generate_rays(cam, "center", 8, rng)
        pix = 5 * 32 + 9
        sel = slice(pix * 8, pix * 8 + 8)
        o = rays.origins[sel]
        d = rays.directions[sel]
        # solve for depth where spread is minimal: should be ~focal plane
        t_hit = 3.0 / d[:, 2]
        pts = o + d * t_hit[:, None]
        assert np.ptp(pts, axis=0).max() < 1e-9

    def test_bad_rotation_rejected(self):
        with pytest.raises(ValueError):
            Camera(np.eye(3) * 1.01, np.zeros(3), 30, 30, 16, 16, 32, 32)

    def test_bad_intrinsics_rejected(self):
        with pytest.raises(ValueError):
            Camera(np.eye(3), np.zeros(3), -1, 30, 16, 16, 32, 32)
        with pytest.raises(ValueError):
            Camera(np.eye(3), np.zeros(3), 30, 30, 16, 16, 0, 32)
