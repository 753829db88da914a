"""Shared scene builders for the test suite."""

import numpy as np
import pytest

from utrice.camera import Camera, look_at
from utrice.geometry import TriangleSoup


def random_soup(n, rng, spread=1.0, tri_scale=0.35, sigma_range=(0.2, 3.0)):
    """n random triangles scattered in a box, random appearance."""
    centers = rng.uniform(-spread, spread, size=(n, 3))
    verts = centers[:, None, :] + rng.normal(scale=tri_scale, size=(n, 3, 3))
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rng.normal(scale=0.6, size=(n, 3))
    sh[:, :, 1:] = rng.normal(scale=0.05, size=(n, 3, 15))
    logit = rng.normal(scale=1.5, size=n)
    sigma = rng.uniform(*sigma_range, size=n)
    return TriangleSoup(verts, sh, logit, sigma)


def random_rays(n, rng, spread=3.0):
    origins = rng.uniform(-spread, spread, size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return origins, dirs


def random_triangle(rng, min_cross=0.3):
    """Non-degenerate random triangle vertex array (3, 3)."""
    while True:
        v = rng.normal(size=(3, 3))
        if np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])) > min_cross:
            return v


def quad_stack_soup(n_quads=10, spacing=0.5, half=1.0):
    """Axis-aligned square quads (2 triangles each) stacked along +z."""
    tris = []
    for i in range(n_quads):
        z = (i + 1) * spacing
        a = (-half, -half, z)
        b = (half, -half, z)
        c = (half, half, z)
        d = (-half, half, z)
        tris.append((a, b, c))
        tris.append((a, c, d))
    verts = np.array(tris, dtype=np.float64)
    n = len(tris)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = np.linspace(-0.8, 0.8, n)[:, None]
    return TriangleSoup(verts, sh, np.full(n, 0.5), np.full(n, 0.8))


def ring_camera(index, count, res=32, radius=3.0, fov_mult=1.2):
    ang = 2 * np.pi * index / count
    eye = np.array([radius * np.cos(ang), radius * np.sin(ang),
                    0.8 * np.sin(2 * ang + 0.3)])
    R, t = look_at(eye, (0, 0, 0))
    f = res * fov_mult
    return Camera(R, t, f, f, res / 2, res / 2, res, res)


@pytest.fixture(scope="session")
def warm_kernels():
    """Force numba JIT (or cache load) before any timed assertions."""
    from utrice.camera import RayBatch
    from utrice.tracer import TracerScene
    from utrice.autograd import backward_rays
    import numpy as np

    rng = np.random.default_rng(0)
    soup = random_soup(8, rng)
    scene = TracerScene(soup)
    origins, dirs = random_rays(4, rng)
    rays = RayBatch(origins, dirs)
    out = scene.trace_rays(rays, stats=True, record=True, workers=1)
    backward_rays(scene, rays, out, np.ones((4, 3)), workers=1)
    return True
