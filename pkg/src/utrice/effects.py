"""Single-bounce ray-tracing effects over an optimized scene.

The effect surface is an analytic config object (mirror plane or
refractive sphere), not learned geometry. A primary ray that hits the
surface composites the triangle scene up to the surface, then spawns
exactly one reflected or refracted ray; that secondary ray never bounces
again (the instrumented counter records at most one bounce per ray).
Misses shade from an equirectangular environment map or a constant
background color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, RayBatch, generate_rays
from .constants import T_MIN
from .images import EnvironmentMap
from .tracer import Image, TracerScene


def reflect(d: np.ndarray, n: np.ndarray) -> np.ndarray:
    """Mirror directions d (..., 3) about unit normals n (..., 3)."""
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def refract(d: np.ndarray, n: np.ndarray, eta: float) -> np.ndarray:
    """Snell refraction with relative index eta = n_in / n_out.

    Normals must oppose the incoming direction. Total internal reflection
    falls back to the mirrored direction.
    """
    cos_i = -np.sum(d * n, axis=-1, keepdims=True)
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    tir = (k < 0.0)[..., 0]
    out = eta * d + (eta * cos_i - np.sqrt(np.maximum(k, 0.0))) * n
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    refl = reflect(d, n)
    out[tir] = refl[tir]
    return out


@dataclass
class MirrorPlane:
    point: np.ndarray
    normal: np.ndarray
    mode: str = "reflect"

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)

    def intersect(self, origins, dirs):
        """(t, surface normal facing the ray); t = inf on miss."""
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.point - origins) @ self.normal) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > T_MIN), t, np.inf)
        n = np.broadcast_to(self.normal, dirs.shape).copy()
        flip = denom > 0.0
        n[flip] *= -1.0
        return t, n


@dataclass
class RefractSphere:
    center: np.ndarray
    radius: float
    eta: float = 1.5
    mode: str = "refract"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        t = np.where(t0 > T_MIN, t0, t1)
        t = np.where((disc > 0.0) & (t > T_MIN), t, np.inf)
        p = origins + t[..., None] * dirs
        n = (p - self.center) / self.radius
        flip = np.sum(n * dirs, axis=-1) > 0.0
        n[flip] *= -1.0
        return t, n


def _background(dirs, envmap, background):
    if envmap is not None:
        return envmap.sample(dirs)
    return np.broadcast_to(np.asarray(background, dtype=np.float64),
                           dirs.shape).copy()


def trace_effect_rays(scene: TracerScene, rays: RayBatch, surface,
                      envmap: EnvironmentMap | None = None,
                      background=(0.0, 0.0, 0.0),
                      workers: int | None = None):
    """Color for each ray with one surface bounce; returns (rgb, bounces).

    bounces[i] counts secondary rays spawned for ray i (0 or 1 by
    construction; the secondary trace never tests the effect surface).
    """
    origins = np.asarray(rays.origins, dtype=np.float64)
    dirs = np.asarray(rays.directions, dtype=np.float64)
    n = origins.shape[0]
    bounces = np.zeros(n, dtype=np.int64)
    if surface is None:
        out = scene.trace_rays(rays, workers=workers)
        rgb = out.rgb + out.transmittance[:, None] * _background(
            dirs, envmap, background)
        return rgb, bounces, out

    t_surf, normals = surface.intersect(origins, dirs)
    near = scene.trace_rays(RayBatch(origins, dirs, t_max=t_surf),
                            workers=workers)
    rgb = near.rgb.copy()
    hit = np.isfinite(t_surf)
    bounces[hit] = 1

    # leftover transmittance behind the surface (or to infinity on miss)
    if (~hit).any():
        rgb[~hit] += near.transmittance[~hit, None] * _background(
            dirs[~hit], envmap, background)
    if hit.any():
        p = origins[hit] + t_surf[hit, None] * dirs[hit]
        if surface.mode == "reflect":
            d2 = reflect(dirs[hit], normals[hit])
        elif surface.mode == "refract":
            d2 = refract(dirs[hit], normals[hit], surface.eta)
        else:
            raise ValueError(f"unknown effect mode: {surface.mode}")
        sec = scene.trace_rays(RayBatch(p, d2), workers=workers)
        sec_rgb = sec.rgb + sec.transmittance[:, None] * _background(
            d2, envmap, background)
        rgb[hit] += near.transmittance[hit, None] * sec_rgb
    return rgb, bounces, near


def trace_effect_ray(scene: TracerScene, ray, surface,
                     envmap: EnvironmentMap | None = None,
                     background=(0.0, 0.0, 0.0)):
    """Single-ray wrapper; returns (rgb (3,), bounce count)."""
    rays = RayBatch(ray.origin[None], ray.direction[None])
    rgb, bounces, _ = trace_effect_rays(scene, rays, surface, envmap,
                                        background, workers=1)
    return rgb[0], int(bounces[0])


def render_effects(scene: TracerScene, cam: Camera, surface=None,
                   envmap: EnvironmentMap | None = None,
                   background=(0.0, 0.0, 0.0), spp: int = 1,
                   sampling: str = "center",
                   rng: np.random.Generator | None = None,
                   workers: int | None = None):
    """Full-frame effects render; returns (Image, total bounce count)."""
    rays = generate_rays(cam, sampling=sampling, spp=spp, rng=rng)
    rgb, bounces, out = trace_effect_rays(scene, rays, surface, envmap,
                                          background, workers=workers)
    h, w = cam.height, cam.width
    img = Image(
        rgb=rgb.reshape(h, w, spp, 3).mean(axis=2),
        depth=out.depth.reshape(h, w, spp).mean(axis=2),
        normal=out.normal.reshape(h, w, spp, 3).mean(axis=2),
        transmittance=out.transmittance.reshape(h, w, spp).mean(axis=2),
    )
    return img, int(bounces.sum())
