"""Brute-force tracer: intersect every triangle, sort, composite once.

This is the oracle the BVH k-buffer path is validated against. It shares no
traversal or batching logic with the kernels; arithmetic expressions mirror
the kernel order so threshold classification (response cutoff, depth ties)
agrees between the two paths.
"""

from __future__ import annotations

import numpy as np

from .appearance import sh_basis
from .constants import ALPHA_MAX, PARALLEL_EPS, RESPONSE_EPS, T_MIN, T_TERM
from .frames import SceneFrames


def ray_hits_reference(frames: SceneFrames, origin, direction,
                       t_start: float = 0.0, t_max: float = np.inf):
    """All acceptable hits of one ray, sorted ascending by (t, id).

    Returns (ids, t, rho) over frame-local triangle indices.
    """
    ox, oy, oz = float(origin[0]), float(origin[1]), float(origin[2])
    dx, dy, dz = float(direction[0]), float(direction[1]), float(direction[2])
    fn = frames.face_n
    denom = fn[:, 0] * dx + fn[:, 1] * dy + fn[:, 2] * dz
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (frames.plane_d - (fn[:, 0] * ox + fn[:, 1] * oy + fn[:, 2] * oz)) / denom
    ok = (np.abs(denom) >= PARALLEL_EPS) & (t > T_MIN) & (t > t_start) & (t < t_max)
    px = ox + t * dx
    py = oy + t * dy
    pz = oz + t * dz
    en, ed = frames.edge_n, frames.edge_d
    l0 = en[:, 0, 0] * px + en[:, 0, 1] * py + en[:, 0, 2] * pz + ed[:, 0]
    l1 = en[:, 1, 0] * px + en[:, 1, 1] * py + en[:, 1, 2] * pz + ed[:, 1]
    l2 = en[:, 2, 0] * px + en[:, 2, 1] * py + en[:, 2, 2] * pz + ed[:, 2]
    phi = np.maximum(np.maximum(l0, l1), l2)
    ratio = phi / frames.phi_s
    ok &= ratio > 0.0
    rho = np.zeros_like(ratio)
    rho[ok] = ratio[ok] ** frames.sigma[ok]
    ok &= rho > RESPONSE_EPS
    ids = np.nonzero(ok)[0]
    order = np.lexsort((ids, t[ids]))
    ids = ids[order]
    return ids, t[ids], rho[ids]


def trace_ray_reference(frames: SceneFrames, origin, direction,
                        t_term: float = T_TERM, t_max: float = np.inf):
    """Composite one ray front to back over the full sorted hit list."""
    ids, ts, rhos = ray_hits_reference(frames, origin, direction, t_max=t_max)
    basis = sh_basis(np.asarray(direction, dtype=np.float64))
    tr = 1.0
    rgb = np.zeros(3)
    dep = 0.0
    nrm = np.zeros(3)
    dxyz = np.asarray(direction, dtype=np.float64)
    for q, t, rho in zip(ids, ts, rhos):
        o = frames.opacity[q]
        alpha = min(o * rho, ALPHA_MAX)
        col = np.clip(frames.sh[q] @ basis + 0.5, 0.0, 1.0)
        w = tr * alpha
        rgb += w * col
        dep += w * t
        sflip = -1.0 if float(frames.face_n[q] @ dxyz) > 0.0 else 1.0
        nrm += w * sflip * frames.face_n[q]
        tr *= 1.0 - alpha
        if tr < t_term:
            break
    return rgb, dep, nrm, tr


def trace_rays_reference(frames: SceneFrames, origins, directions,
                         t_term: float = T_TERM, t_max=None):
    """Batch version of trace_ray_reference; arrays shaped like the kernels'."""
    n = origins.shape[0]
    rgb = np.empty((n, 3))
    dep = np.empty(n)
    nrm = np.empty((n, 3))
    tr = np.empty(n)
    for r in range(n):
        tm = np.inf if t_max is None else float(t_max[r])
        rgb[r], dep[r], nrm[r], tr[r] = trace_ray_reference(
            frames, origins[r], directions[r], t_term=t_term, t_max=tm)
    return rgb, dep, nrm, tr
