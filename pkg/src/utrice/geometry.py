"""Triangle primitives, edge frames and the smooth window function.

A triangle responds to an in-plane point p with

    response(p) = ReLU(phi(p) / phi(s)) ** sigma,
    phi(p)      = max_i (n_i . p + d_i),

where n_i are the unit outward in-plane edge normals, d_i the offsets that
zero the linear form on edge i, and s the incenter.  Inside the triangle
every n_i . p + d_i is negative, so phi(p)/phi(s) is the nearest-edge
distance over the inradius: 1 at the incenter, 0 on the edges, and the
ratio goes negative outside (ReLU clamps the response to 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import AREA_EPS, PARALLEL_EPS, T_MIN
from .errors import DegenerateTriangle


@dataclass
class Triangle:
    """One optimizable triangle: geometry plus appearance parameters."""

    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    sh: np.ndarray = field(default_factory=lambda: np.zeros((3, 16)))
    opacity_logit: float = 0.0
    sigma: float = 1.0

    @property
    def vertices(self) -> np.ndarray:
        return np.stack([self.v1, self.v2, self.v3])


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = float(np.sqrt(np.sum(self.direction * self.direction)))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, got |d|={n}")


class TriangleSoup:
    """Flat arrays of independent triangles (no shared vertices).

    vertices      (n, 3, 3) float64, [triangle, corner, xyz]
    sh            (n, 3, 16) float64, [triangle, channel, coefficient]
    opacity_logit (n,) float64, sigmoid-mapped to opacity
    sigma         (n,) float64, smoothness exponent (> 0)
    """

    def __init__(self, vertices, sh, opacity_logit, sigma):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.sh = np.ascontiguousarray(sh, dtype=np.float64)
        self.opacity_logit = np.ascontiguousarray(opacity_logit, dtype=np.float64)
        self.sigma = np.ascontiguousarray(sigma, dtype=np.float64)
        n = self.vertices.shape[0]
        if self.vertices.shape != (n, 3, 3) or self.sh.shape != (n, 3, 16):
            raise ValueError("inconsistent soup array shapes")
        if self.opacity_logit.shape != (n,) or self.sigma.shape != (n,):
            raise ValueError("inconsistent soup array shapes")

    def __len__(self) -> int:
        return self.vertices.shape[0]

    @property
    def opacity(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))

    def triangle(self, i: int) -> Triangle:
        return Triangle(
            self.vertices[i, 0].copy(), self.vertices[i, 1].copy(),
            self.vertices[i, 2].copy(), self.sh[i].copy(),
            float(self.opacity_logit[i]), float(self.sigma[i]),
        )

    def take(self, index) -> "TriangleSoup":
        """New soup holding the selected triangles (bool mask or indices)."""
        return TriangleSoup(self.vertices[index], self.sh[index],
                            self.opacity_logit[index], self.sigma[index])

    def copy(self) -> "TriangleSoup":
        return TriangleSoup(self.vertices.copy(), self.sh.copy(),
                            self.opacity_logit.copy(), self.sigma.copy())

    @staticmethod
    def concatenate(parts) -> "TriangleSoup":
        return TriangleSoup(
            np.concatenate([p.vertices for p in parts]),
            np.concatenate([p.sh for p in parts]),
            np.concatenate([p.opacity_logit for p in parts]),
            np.concatenate([p.sigma for p in parts]),
        )

    @staticmethod
    def from_triangles(tris) -> "TriangleSoup":
        return TriangleSoup(
            np.stack([t.vertices for t in tris]),
            np.stack([np.asarray(t.sh, dtype=np.float64) for t in tris]),
            np.array([t.opacity_logit for t in tris], dtype=np.float64),
            np.array([t.sigma for t in tris], dtype=np.float64),
        )


@dataclass
class EdgeFrame:
    """Per-triangle derived frame: outward edge normals and incenter.

    Edge i joins vertex i and vertex i+1 (cyclic); n[i] is its unit outward
    in-plane normal and d[i] the offset with n[i].p + d[i] == 0 on the edge.
    """

    n: np.ndarray            # (3, 3) unit outward edge normals
    d: np.ndarray            # (3,) offsets
    incenter: np.ndarray     # (3,)
    face_normal: np.ndarray  # (3,) unit, winding-dependent orientation
    flip: np.ndarray         # (3,) +-1, sign applied to make each normal outward


def triangle_areas(vertices: np.ndarray) -> np.ndarray:
    """Areas for a (n, 3, 3) vertex array."""
    v = np.asarray(vertices, dtype=np.float64)
    cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    return 0.5 * np.sqrt(np.sum(cr * cr, axis=-1))


def triangle_area(tri: Triangle) -> float:
    return float(triangle_areas(tri.vertices[None])[0])


def incenters(vertices: np.ndarray) -> np.ndarray:
    """Incenters for a (n, 3, 3) vertex array: (a*v1 + b*v2 + c*v3)/(a+b+c)."""
    v = np.asarray(vertices, dtype=np.float64)
    la = np.linalg.norm(v[:, 1] - v[:, 2], axis=-1)
    lb = np.linalg.norm(v[:, 2] - v[:, 0], axis=-1)
    lc = np.linalg.norm(v[:, 0] - v[:, 1], axis=-1)
    w = la + lb + lc
    return (la[:, None] * v[:, 0] + lb[:, None] * v[:, 1]
            + lc[:, None] * v[:, 2]) / w[:, None]


def unnormalized_edge_normals(vertices: np.ndarray):
    """Raw (pre-flip) edge normals N_i for a (n, 3, 3) vertex array.

    N_i = (b.c) a - (a.c) b with a = v_i - v_{i+2}, b = v_{i+1} - v_{i+2},
    c = v_i - v_{i+1}; this is the polynomial expansion of the double cross
    product [(v_i - v_{i+2}) x (v_{i+1} - v_{i+2})] x (v_{i+1} - v_i).
    Its orientation depends on winding; callers flip it outward.
    """
    v = np.asarray(vertices, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(3):
        a = v[:, i] - v[:, (i + 2) % 3]
        b = v[:, (i + 1) % 3] - v[:, (i + 2) % 3]
        c = v[:, i] - v[:, (i + 1) % 3]
        bc = np.sum(b * c, axis=-1, keepdims=True)
        ac = np.sum(a * c, axis=-1, keepdims=True)
        out[:, i] = bc * a - ac * b
    return out


def edge_normals(tri: Triangle) -> EdgeFrame:
    """Edge frame for one triangle: unit outward normals, offsets, incenter.

    Raises DegenerateTriangle if the area is at or below AREA_EPS.
    """
    v = tri.vertices.astype(np.float64)[None]
    if triangle_areas(v)[0] <= AREA_EPS:
        raise DegenerateTriangle(f"triangle area <= {AREA_EPS}")
    raw = unnormalized_edge_normals(v)[0]
    n = raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    flip = np.ones(3)
    for i in range(3):
        # outward means the opposite vertex sits on the negative side
        opp = v[0, (i + 2) % 3]
        if np.sum(n[i] * (opp - v[0, i])) > 0.0:
            n[i] = -n[i]
            flip[i] = -1.0
    d = -np.sum(n * v[0], axis=-1)
    inc = incenters(v)[0]
    fn = np.cross(v[0, 1] - v[0, 0], v[0, 2] - v[0, 0])
    fn = fn / np.linalg.norm(fn)
    return EdgeFrame(n=n, d=d, incenter=inc, face_normal=fn, flip=flip)


def edge_distances(frame: EdgeFrame, p: np.ndarray) -> np.ndarray:
    """Signed forms L_i(p) = n_i . p + d_i; shape (..., 3)."""
    p = np.asarray(p, dtype=np.float64)
    return p @ frame.n.T + frame.d


def window_response(frame: EdgeFrame, sigma: float, p: np.ndarray):
    """Smooth response in [0, 1]; exactly 1 at the incenter, 0 outside.

    phi at the incenter is evaluated through the same expression as phi(p)
    so that response(incenter) == 1.0 holds bit-exactly.
    """
    phi_p = np.max(edge_distances(frame, p), axis=-1)
    phi_s = np.max(edge_distances(frame, frame.incenter), axis=-1)
    ratio = np.maximum(phi_p / phi_s, 0.0)
    return ratio ** sigma


def intersect_plane(tri: Triangle, ray: Ray):
    """Intersection of a ray with the triangle's supporting plane.

    Returns (t, p) with t > T_MIN, or None when the ray is parallel to the
    plane (within PARALLEL_EPS) or the hit is behind the minimum distance.
    Containment is not tested here; the window response decides that.
    """
    v = tri.vertices
    fn = np.cross(v[1] - v[0], v[2] - v[0])
    nrm = np.linalg.norm(fn)
    if nrm <= 2.0 * AREA_EPS:
        return None
    fn = fn / nrm
    denom = float(np.sum(fn * ray.direction))
    if abs(denom) < PARALLEL_EPS:
        return None
    t = float(np.sum(fn * (v[0] - ray.origin)) / denom)
    if t <= T_MIN:
        return None
    return t, ray.origin + t * ray.direction
