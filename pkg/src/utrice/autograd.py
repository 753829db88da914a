"""Analytic backward pass: per-pixel loss gradients down to triangle
parameters, plus the finite-difference oracle used to certify it.

Vertex gradients follow the window-function chain through the edge-normal
Jacobians. The published polynomial Jacobians are the derivatives of the
(sign-flipped) unnormalized edge normal, so the deployed chain applies the
unit-normalization projection (I - n n^T)/|N| on top of them; this variant
is the one that passes finite-difference certification. The incenter
variation of the response denominator is dropped from the deployed
gradient (matching the published approximation); exact=True adds it back
for verification.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .camera import RayBatch
from .constants import RATIO_EPS
from .geometry import Ray, Triangle, edge_normals, window_response
from .tracer import CompositeState, RenderOutputs, TracerScene
from .parallel import get_threads


class GradientAccumulator:
    """Per-triangle parameter gradients; non-finite contributions are
    dropped and counted instead of propagating."""

    def __init__(self, n_triangles: int):
        self.vertices = np.zeros((n_triangles, 3, 3))
        self.sh = np.zeros((n_triangles, 3, 16))
        self.opacity_logit = np.zeros(n_triangles)
        self.sigma = np.zeros(n_triangles)
        self.nan_drops = 0

    def __len__(self):
        return self.vertices.shape[0]

    def reset(self):
        self.vertices[:] = 0.0
        self.sh[:] = 0.0
        self.opacity_logit[:] = 0.0
        self.sigma[:] = 0.0
        self.nan_drops = 0


def backward_rays(scene: TracerScene, rays: RayBatch, forward: RenderOutputs,
                  dl_rgb: np.ndarray, dl_depth: np.ndarray | None = None,
                  dl_norm: np.ndarray | None = None,
                  dl_t: np.ndarray | None = None,
                  acc: GradientAccumulator | None = None,
                  workers: int | None = None) -> GradientAccumulator:
    """Accumulate parameter gradients for a traced ray batch.

    `forward` must be the output of scene.trace_rays on the same rays; the
    backward kernel replays each ray's forward hit order against it. dl_t
    carries the gradient w.r.t. final transmittance (background fill).
    """
    if workers is None:
        workers = get_threads()
    n = len(rays)
    n_soup = len(scene.soup)
    if acc is None:
        acc = GradientAccumulator(n_soup)
    if scene.bvh is None:
        return acc
    if dl_depth is None:
        dl_depth = np.zeros(n)
    if dl_norm is None:
        dl_norm = np.zeros((n, 3))
    if dl_t is None:
        dl_t = np.zeros(n)
    w = max(1, int(workers))
    g_vert = np.zeros((w, n_soup, 3, 3))
    g_sh = np.zeros((w, n_soup, 3, 16))
    g_logit = np.zeros((w, n_soup))
    g_sigma = np.zeros((w, n_soup))
    drops = np.zeros(w, dtype=np.int64)
    b, f = scene.bvh, scene.frames
    _kernels.render_backward(
        b.node_min, b.node_max, b.node_left, b.node_right,
        b.leaf_start, b.leaf_count, b.prim_order,
        f.edge_n, f.edge_d, f.phi_s, f.sigma, f.face_n, f.plane_d,
        f.opacity, f.sh, f.vertices, f.tri_index,
        np.ascontiguousarray(rays.origins, dtype=np.float64),
        np.ascontiguousarray(rays.directions, dtype=np.float64),
        np.ascontiguousarray(rays.t_max, dtype=np.float64),
        scene.k, scene.t_term,
        forward.rgb, forward.depth, forward.normal, forward.transmittance,
        np.ascontiguousarray(dl_rgb, dtype=np.float64),
        np.ascontiguousarray(dl_depth, dtype=np.float64),
        np.ascontiguousarray(dl_norm, dtype=np.float64),
        np.ascontiguousarray(dl_t, dtype=np.float64),
        g_vert, g_sh, g_logit, g_sigma, drops, w)
    # fixed-order merge keeps results deterministic per worker count
    acc.vertices += g_vert.sum(axis=0)
    acc.sh += g_sh.sum(axis=0)
    acc.opacity_logit += g_logit.sum(axis=0)
    acc.sigma += g_sigma.sum(axis=0)
    acc.nan_drops += int(drops.sum())
    return acc


def backward_ray(scene: TracerScene, ray: Ray, state: CompositeState,
                 dl_rgb, dl_depth: float = 0.0, dl_norm=None,
                 dl_t: float = 0.0,
                 acc: GradientAccumulator | None = None) -> GradientAccumulator:
    """Gradients of one ray, replaying the forward hit sequence of `state`."""
    fwd = RenderOutputs(
        rgb=np.asarray(state.rgb, dtype=np.float64)[None],
        depth=np.array([state.depth]),
        normal=np.asarray(state.normal, dtype=np.float64)[None],
        transmittance=np.array([state.transmittance]))
    rays = RayBatch(ray.origin[None], ray.direction[None])
    dn = np.zeros((1, 3)) if dl_norm is None else np.asarray(dl_norm, dtype=np.float64)[None]
    return backward_rays(scene, rays, fwd,
                         np.asarray(dl_rgb, dtype=np.float64)[None],
                         np.array([dl_depth]), dn, np.array([dl_t]),
                         acc=acc, workers=1)


def _edge_normal_jacobians(v: np.ndarray, i: int):
    """d(unnormalized N_i)/dv_j for j = i, i+1, i+2 (row r, column c =
    d N_r / d v_c), before the outward sign flip."""
    a = v[i] - v[(i + 2) % 3]
    b = v[(i + 1) % 3] - v[(i + 2) % 3]
    c = v[i] - v[(i + 1) % 3]
    I3 = np.eye(3)
    ab = np.cross(a, b)
    skew = np.array([[0.0, -ab[2], ab[1]],
                     [ab[2], 0.0, -ab[0]],
                     [-ab[1], ab[0], 0.0]])
    d_i = np.outer(a, b) + np.dot(b, c) * I3 - np.outer(b, a + c)
    d_i1 = np.outer(a, c) + skew - np.dot(a, c) * I3
    d_i2 = np.dot(c, c) * I3 - np.outer(c, c)
    return d_i, d_i1, d_i2


def published_edge_normal_jacobians(v: np.ndarray, i: int):
    """The polynomial Jacobian matrices in their published form. They equal
    the negated _edge_normal_jacobians (gradients of -N_i); kept verbatim so
    tests can document the relation."""
    a = v[i] - v[(i + 2) % 3]
    b = v[(i + 1) % 3] - v[(i + 2) % 3]
    c = v[i] - v[(i + 1) % 3]
    I3 = np.eye(3)
    ab = np.cross(a, b)
    skew = np.array([[0.0, -ab[2], ab[1]],
                     [ab[2], 0.0, -ab[0]],
                     [-ab[1], ab[0], 0.0]])
    d_i = np.outer(b, c) - np.dot(b, c) * I3 + skew
    d_i1 = -(np.outer(a, c) - np.dot(a, c) * I3 + skew)
    d_i2 = np.outer(c, c) - np.dot(c, c) * I3
    return d_i, d_i1, d_i2


def backward_window(tri: Triangle, p: np.ndarray, dl_drho: float,
                    exact: bool = False):
    """Gradients of dl_drho * response(p) w.r.t. the vertices and sigma.

    Returns (grad_vertices (3, 3), grad_sigma). exact=True adds the
    incenter-variation term that the deployed gradient drops.
    """
    v = tri.vertices.astype(np.float64)
    sigma = float(tri.sigma)
    frame = edge_normals(tri)
    p = np.asarray(p, dtype=np.float64)
    L = frame.n @ p + frame.d
    i = int(np.argmax(L))
    phi_p = L[i]
    phi_s = float(np.max(frame.n @ frame.incenter + frame.d))
    ratio = phi_p / phi_s
    rho = max(ratio, 0.0) ** sigma
    grad_v = np.zeros((3, 3))
    if ratio <= 0.0:
        return grad_v, 0.0

    di_dphip = sigma * ratio ** (sigma - 1.0) / phi_s
    dl_dphip = dl_drho * di_dphip
    jacs = _edge_normal_jacobians(v, i)
    a = v[i] - v[(i + 2) % 3]
    b = v[(i + 1) % 3] - v[(i + 2) % 3]
    N = np.dot(b, v[i] - v[(i + 1) % 3]) * a - np.dot(a, v[i] - v[(i + 1) % 3]) * b
    nn = np.linalg.norm(N)
    nu = frame.n[i]
    sign = 1.0 if np.dot(N, nu) > 0.0 else -1.0
    proj = (np.eye(3) - np.outer(nu, nu)) / nn
    pv = p - v[i]
    for off, jac in enumerate(jacs):
        j = (i + off) % 3
        dphi = pv @ (sign * proj @ jac)
        if off == 0:
            dphi = dphi - nu
        grad_v[j] += dl_dphip * dphi

    if exact:
        # phi(s) = -inradius; r = area / semiperimeter
        M = np.cross(v[1] - v[0], v[2] - v[0])
        mn = np.linalg.norm(M)
        nf = M / mn
        area = 0.5 * mn
        semi = 0.5 * (np.linalg.norm(v[1] - v[0]) + np.linalg.norm(v[2] - v[1])
                      + np.linalg.norm(v[0] - v[2]))
        di_dphis = -sigma * ratio ** sigma / phi_s
        for j in range(3):
            d_area = 0.5 * np.cross(nf, v[(j + 2) % 3] - v[(j + 1) % 3])
            u1 = v[j] - v[(j + 1) % 3]
            u2 = v[j] - v[(j + 2) % 3]
            d_semi = 0.5 * (u1 / np.linalg.norm(u1) + u2 / np.linalg.norm(u2))
            d_r = (d_area * semi - area * d_semi) / semi ** 2
            grad_v[j] += dl_drho * di_dphis * (-d_r)

    grad_sigma = dl_drho * rho * np.log(max(ratio, RATIO_EPS))
    return grad_v, float(grad_sigma)


def fd_oracle(f, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += step
        xm[j] -= step
        grad[j] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * step)
    return grad.reshape(x.shape)


def window_response_frozen_denominator(tri: Triangle, p: np.ndarray,
                                       phi_s_base: float) -> float:
    """Response with phi(s) pinned at a base value; the finite-difference
    reference matching the deployed (incenter-term-dropped) gradient."""
    frame = edge_normals(tri)
    phi_p = float(np.max(frame.n @ np.asarray(p, dtype=np.float64) + frame.d))
    return max(phi_p / phi_s_base, 0.0) ** float(tri.sigma)
