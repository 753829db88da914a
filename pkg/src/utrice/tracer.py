"""Forward rendering: scene snapshot + BVH + k-closest compositing.

The per-hit math lives in _kernels; this module owns the user-facing
wrappers (single rays, ray batches, whole images).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .bvh import Bvh
from .camera import Camera, RayBatch, generate_rays
from .constants import K_DEFAULT, T_TERM
from .frames import SceneFrames
from .geometry import Ray, TriangleSoup
from .parallel import get_threads

_DUMMY_I = np.zeros((1, 1), dtype=np.int64)
_DUMMY_F = np.zeros((1, 1), dtype=np.float64)
_DUMMY_C = np.zeros(1, dtype=np.int64)
_DUMMY_B = np.zeros(1, dtype=np.uint8)


@dataclass
class CompositeState:
    """Per-ray compositing result: color, leftover transmittance, and the
    alpha-weighted depth and face-normal accumulators."""
    rgb: np.ndarray
    transmittance: float
    depth: float
    normal: np.ndarray


@dataclass
class HitBuffer:
    """Sorted k-closest hits: soup triangle ids, depths, responses, points."""
    tri: np.ndarray
    t: np.ndarray
    rho: np.ndarray
    points: np.ndarray

    def __len__(self):
        return self.tri.shape[0]


@dataclass
class HitRecords:
    """Replay buffers from a recorded forward pass (frame-ordered hits)."""
    tri: np.ndarray     # (n_rays, cap) soup ids, -1 padded
    t: np.ndarray
    alpha: np.ndarray
    rho: np.ndarray
    count: np.ndarray
    overflow: np.ndarray


@dataclass
class RenderOutputs:
    rgb: np.ndarray           # (n, 3) pre-background color
    depth: np.ndarray         # (n,) alpha-weighted expected depth
    normal: np.ndarray        # (n, 3) alpha-weighted camera-facing normals
    transmittance: np.ndarray  # (n,)
    records: HitRecords | None = None
    omega_max: np.ndarray | None = None  # (n_soup,) max T*o*rho this pass
    hit_mask: np.ndarray | None = None   # (n_soup,) bool, hit by any ray


class TracerScene:
    """Immutable snapshot of a soup ready for tracing."""

    def __init__(self, soup: TriangleSoup, k: int = K_DEFAULT,
                 t_term: float = T_TERM):
        self.soup = soup
        self.k = int(k)
        self.t_term = float(t_term)
        self.frames = SceneFrames(soup)
        # a soup with no valid triangles still renders (background only)
        self.bvh = Bvh(self.frames) if len(self.frames) > 0 else None

    def _kernel_args(self):
        b, f = self.bvh, self.frames
        return (b.node_min, b.node_max, b.node_left, b.node_right,
                b.leaf_start, b.leaf_count, b.prim_order,
                f.edge_n, f.edge_d, f.phi_s, f.sigma, f.face_n, f.plane_d,
                f.opacity, f.sh)

    def _empty_outputs(self, n: int, stats: bool, record: bool,
                       record_cap: int) -> RenderOutputs:
        out = RenderOutputs(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                            np.ones(n))
        n_soup = len(self.soup)
        if stats:
            out.omega_max = np.zeros(n_soup)
            out.hit_mask = np.zeros(n_soup, dtype=bool)
        if record:
            out.records = HitRecords(
                np.full((n, record_cap), -1, dtype=np.int64),
                np.zeros((n, record_cap)), np.zeros((n, record_cap)),
                np.zeros((n, record_cap)), np.zeros(n, dtype=np.int64),
                np.zeros(n, dtype=np.uint8))
        return out

    def trace_rays(self, rays: RayBatch, stats: bool = False,
                   record: bool = False, record_cap: int = 64,
                   workers: int | None = None) -> RenderOutputs:
        if workers is None:
            workers = get_threads()
        n = len(rays)
        if self.bvh is None:
            return self._empty_outputs(n, stats, record, record_cap)
        m = len(self.frames)
        out_rgb = np.empty((n, 3))
        out_depth = np.empty(n)
        out_norm = np.empty((n, 3))
        out_t = np.empty(n)
        w = max(1, int(workers))
        if stats:
            st_omega = np.zeros((w, m))
            st_hit = np.zeros((w, m), dtype=np.uint8)
        else:
            st_omega = np.zeros((w, 1))
            st_hit = np.zeros((w, 1), dtype=np.uint8)
        if record:
            rec_tri = np.full((n, record_cap), -1, dtype=np.int64)
            rec_t = np.zeros((n, record_cap))
            rec_alpha = np.zeros((n, record_cap))
            rec_rho = np.zeros((n, record_cap))
            rec_count = np.zeros(n, dtype=np.int64)
            rec_flow = np.zeros(n, dtype=np.uint8)
        else:
            rec_tri, rec_t = _DUMMY_I, _DUMMY_F
            rec_alpha, rec_rho = _DUMMY_F, _DUMMY_F
            rec_count, rec_flow = _DUMMY_C, _DUMMY_B
        _kernels.render_forward(
            *self._kernel_args(),
            np.ascontiguousarray(rays.origins, dtype=np.float64),
            np.ascontiguousarray(rays.directions, dtype=np.float64),
            np.ascontiguousarray(rays.t_max, dtype=np.float64),
            self.k, self.t_term, w,
            out_rgb, out_depth, out_norm, out_t,
            st_omega, st_hit, stats,
            rec_tri, rec_t, rec_alpha, rec_rho, rec_count, rec_flow, record)
        out = RenderOutputs(out_rgb, out_depth, out_norm, out_t)
        if stats:
            n_soup = len(self.soup)
            omega = np.zeros(n_soup)
            hit = np.zeros(n_soup, dtype=bool)
            omega[self.frames.tri_index] = st_omega.max(axis=0)
            hit[self.frames.tri_index] = st_hit.max(axis=0) > 0
            out.omega_max = omega
            out.hit_mask = hit
        if record:
            live = rec_tri >= 0
            rec_tri[live] = self.frames.tri_index[rec_tri[live]]
            out.records = HitRecords(rec_tri, rec_t, rec_alpha, rec_rho,
                                     rec_count, rec_flow)
        return out

    def trace_ray(self, ray: Ray, record: bool = False):
        """Composite a single ray; optionally also return its hit records."""
        batch = RayBatch(ray.origin[None].astype(np.float64),
                         ray.direction[None].astype(np.float64))
        out = self.trace_rays(batch, record=record, workers=1)
        state = CompositeState(rgb=out.rgb[0], transmittance=float(out.transmittance[0]),
                               depth=float(out.depth[0]), normal=out.normal[0])
        if record:
            return state, out.records
        return state

    def trace_k_closest(self, ray: Ray, t_start: float = 0.0,
                        k: int | None = None) -> HitBuffer:
        """The k nearest hits with t strictly greater than t_start."""
        if k is None:
            k = self.k
        if k < 1:
            raise ValueError("k must be at least 1")
        if self.bvh is None:
            return HitBuffer(tri=np.empty(0, dtype=np.int64), t=np.empty(0),
                             rho=np.empty(0), points=np.empty((0, 3)))
        b, f = self.bvh, self.frames
        o, d = ray.origin, ray.direction
        nh, t_buf, id_buf, rho_buf = _kernels.gather_k_entry(
            b.node_min, b.node_max, b.node_left, b.node_right,
            b.leaf_start, b.leaf_count, b.prim_order,
            f.edge_n, f.edge_d, f.phi_s, f.sigma, f.face_n, f.plane_d,
            o[0], o[1], o[2], d[0], d[1], d[2], float(t_start), int(k))
        t = t_buf[:nh].copy()
        tri = self.frames.tri_index[id_buf[:nh]]
        return HitBuffer(tri=tri, t=t, rho=rho_buf[:nh].copy(),
                         points=o[None] + t[:, None] * d[None])


@dataclass
class Image:
    """Rendered frame: color plus the auxiliary buffers the loss consumes."""
    rgb: np.ndarray            # (h, w, 3)
    depth: np.ndarray          # (h, w)
    normal: np.ndarray         # (h, w, 3)
    transmittance: np.ndarray  # (h, w)


def render_image(scene: TracerScene, cam: Camera, spp: int = 1,
                 sampling: str = "center",
                 rng: np.random.Generator | None = None,
                 background=(0.0, 0.0, 0.0), envmap=None,
                 rays: RayBatch | None = None, stats: bool = False,
                 workers: int | None = None):
    """Trace every pixel and average spp samples.

    Background (constant color, or an environment map sampled by ray
    direction) fills the leftover transmittance. Returns an Image, plus the
    RenderOutputs when stats=True (the training loop needs both).
    """
    if rays is None:
        rays = generate_rays(cam, sampling=sampling, spp=spp, rng=rng)
    out = scene.trace_rays(rays, stats=stats, workers=workers)
    if envmap is not None:
        bg = envmap.sample(rays.directions)
    else:
        bg = np.asarray(background, dtype=np.float64)[None, :]
    rgb = out.rgb + out.transmittance[:, None] * bg
    h, w = cam.height, cam.width
    img = Image(
        rgb=rgb.reshape(h, w, spp, 3).mean(axis=2),
        depth=out.depth.reshape(h, w, spp).mean(axis=2),
        normal=out.normal.reshape(h, w, spp, 3).mean(axis=2),
        transmittance=out.transmittance.reshape(h, w, spp).mean(axis=2),
    )
    if stats:
        return img, out
    return img
