"""Per-snapshot derived arrays the tracer and backward kernels consume.

Degenerate triangles (area <= AREA_EPS) and triangles with non-finite
parameters are excluded here; they take part in neither tracing nor
gradient accumulation.
"""

from __future__ import annotations

import numpy as np

from .constants import AREA_EPS
from .geometry import TriangleSoup, incenters, triangle_areas, unnormalized_edge_normals


class SceneFrames:
    """Flat float64 arrays over the valid triangles of a soup.

    tri_index maps frame rows back to soup rows; gradient buffers are sized
    to the soup and indexed through it.
    """

    def __init__(self, soup: TriangleSoup):
        v = soup.vertices
        finite = (np.isfinite(v).all(axis=(1, 2))
                  & np.isfinite(soup.sh).all(axis=(1, 2))
                  & np.isfinite(soup.opacity_logit) & np.isfinite(soup.sigma))
        valid = finite & (triangle_areas(v) > AREA_EPS)
        idx = np.nonzero(valid)[0]

        self.n_total = len(soup)
        self.tri_index = np.ascontiguousarray(idx, dtype=np.int64)
        v = np.ascontiguousarray(v[idx])
        self.vertices = v

        raw = unnormalized_edge_normals(v)
        en = raw / np.sqrt(np.sum(raw * raw, axis=-1, keepdims=True))
        # flip each edge normal outward: the opposite vertex must be on the
        # negative side (winding independence)
        for i in range(3):
            opp = v[:, (i + 2) % 3] - v[:, i]
            s = en[:, i, 0] * opp[:, 0] + en[:, i, 1] * opp[:, 1] + en[:, i, 2] * opp[:, 2]
            en[s > 0.0, i] *= -1.0
        self.edge_n = np.ascontiguousarray(en)
        ed = -(en[:, :, 0] * v[:, :, 0] + en[:, :, 1] * v[:, :, 1]
               + en[:, :, 2] * v[:, :, 2])
        self.edge_d = np.ascontiguousarray(ed)

        inc = incenters(v)
        self.incenter = np.ascontiguousarray(inc)
        L = (en[:, :, 0] * inc[:, None, 0] + en[:, :, 1] * inc[:, None, 1]
             + en[:, :, 2] * inc[:, None, 2] + ed)
        self.phi_s = np.ascontiguousarray(L.max(axis=1))

        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        fn_norm = np.sqrt(np.sum(fn * fn, axis=-1, keepdims=True))
        fn = fn / fn_norm
        self.face_n = np.ascontiguousarray(fn)
        self.plane_d = np.ascontiguousarray(
            fn[:, 0] * v[:, 0, 0] + fn[:, 1] * v[:, 0, 1] + fn[:, 2] * v[:, 0, 2])

        self.opacity = np.ascontiguousarray(
            1.0 / (1.0 + np.exp(-soup.opacity_logit[idx])))
        self.sigma = np.ascontiguousarray(soup.sigma[idx])
        self.sh = np.ascontiguousarray(soup.sh[idx])

        self.aabb_min = np.ascontiguousarray(v.min(axis=1))
        self.aabb_max = np.ascontiguousarray(v.max(axis=1))
        self.centroid = np.ascontiguousarray(v.mean(axis=1))

    def __len__(self) -> int:
        return self.vertices.shape[0]
