"""Bounding volume hierarchy: binned-SAH build over triangle AABBs.

Nodes are stored flat: internal nodes carry child indices, leaves carry a
range into the primitive permutation. Build is deterministic for a fixed
input ordering.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import EmptyScene
from .frames import SceneFrames

LEAF_SIZE = 4
_NBINS = 16
_MAX_DEPTH = 60


@njit(cache=True)
def _build_kernel(aabb_min, aabb_max, centroid, leaf_size,
                  node_min, node_max, node_left, node_right,
                  leaf_start, leaf_count, prim_order):
    m = aabb_min.shape[0]
    for i in range(m):
        prim_order[i] = i
    # work stack rows: node id, range start, range end, depth
    stack = np.empty((2 * m + 64, 4), np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = m
    stack[0, 3] = 0
    top = 1
    n_nodes = 1

    bin_cnt = np.empty(_NBINS, np.int64)
    bin_min = np.empty((_NBINS, 3), np.float64)
    bin_max = np.empty((_NBINS, 3), np.float64)

    while top > 0:
        top -= 1
        node = stack[top, 0]
        start = stack[top, 1]
        end = stack[top, 2]
        depth = stack[top, 3]
        count = end - start

        for a in range(3):
            lo = np.inf
            hi = -np.inf
            for p in range(start, end):
                q = prim_order[p]
                if aabb_min[q, a] < lo:
                    lo = aabb_min[q, a]
                if aabb_max[q, a] > hi:
                    hi = aabb_max[q, a]
            node_min[node, a] = lo
            node_max[node, a] = hi

        make_leaf = count <= leaf_size or depth >= _MAX_DEPTH
        axis = 0
        cmin = np.inf
        cmax = -np.inf
        if not make_leaf:
            best_ext = -1.0
            for a in range(3):
                lo = np.inf
                hi = -np.inf
                for p in range(start, end):
                    c = centroid[prim_order[p], a]
                    if c < lo:
                        lo = c
                    if c > hi:
                        hi = c
                if hi - lo > best_ext:
                    best_ext = hi - lo
                    axis = a
                    cmin = lo
                    cmax = hi
            if best_ext <= 0.0:
                make_leaf = True

        if make_leaf:
            node_left[node] = -1
            node_right[node] = -1
            leaf_start[node] = start
            leaf_count[node] = count
            continue

        inv_ext = _NBINS / (cmax - cmin)
        for b in range(_NBINS):
            bin_cnt[b] = 0
            for a in range(3):
                bin_min[b, a] = np.inf
                bin_max[b, a] = -np.inf
        for p in range(start, end):
            q = prim_order[p]
            b = int((centroid[q, axis] - cmin) * inv_ext)
            if b > _NBINS - 1:
                b = _NBINS - 1
            bin_cnt[b] += 1
            for a in range(3):
                if aabb_min[q, a] < bin_min[b, a]:
                    bin_min[b, a] = aabb_min[q, a]
                if aabb_max[q, a] > bin_max[b, a]:
                    bin_max[b, a] = aabb_max[q, a]

        # sweep: SAH cost of splitting after each bin
        left_area = np.empty(_NBINS, np.float64)
        left_cnt = np.empty(_NBINS, np.int64)
        lo0 = np.inf
        lo1 = np.inf
        lo2 = np.inf
        hi0 = -np.inf
        hi1 = -np.inf
        hi2 = -np.inf
        cnt = 0
        for b in range(_NBINS):
            if bin_cnt[b] > 0:
                if bin_min[b, 0] < lo0:
                    lo0 = bin_min[b, 0]
                if bin_min[b, 1] < lo1:
                    lo1 = bin_min[b, 1]
                if bin_min[b, 2] < lo2:
                    lo2 = bin_min[b, 2]
                if bin_max[b, 0] > hi0:
                    hi0 = bin_max[b, 0]
                if bin_max[b, 1] > hi1:
                    hi1 = bin_max[b, 1]
                if bin_max[b, 2] > hi2:
                    hi2 = bin_max[b, 2]
            cnt += bin_cnt[b]
            left_cnt[b] = cnt
            if cnt > 0:
                ex = hi0 - lo0
                ey = hi1 - lo1
                ez = hi2 - lo2
                left_area[b] = ex * ey + ey * ez + ez * ex
            else:
                left_area[b] = 0.0

        best_cost = np.inf
        best_bin = -1
        lo0 = np.inf
        lo1 = np.inf
        lo2 = np.inf
        hi0 = -np.inf
        hi1 = -np.inf
        hi2 = -np.inf
        for b in range(_NBINS - 1, 0, -1):
            if bin_cnt[b] > 0:
                if bin_min[b, 0] < lo0:
                    lo0 = bin_min[b, 0]
                if bin_min[b, 1] < lo1:
                    lo1 = bin_min[b, 1]
                if bin_min[b, 2] < lo2:
                    lo2 = bin_min[b, 2]
                if bin_max[b, 0] > hi0:
                    hi0 = bin_max[b, 0]
                if bin_max[b, 1] > hi1:
                    hi1 = bin_max[b, 1]
                if bin_max[b, 2] > hi2:
                    hi2 = bin_max[b, 2]
            nl = left_cnt[b - 1]
            nr = count - nl
            if nl == 0 or nr == 0:
                continue
            ex = hi0 - lo0
            ey = hi1 - lo1
            ez = hi2 - lo2
            right_area = ex * ey + ey * ez + ez * ex
            cost = left_area[b - 1] * nl + right_area * nr
            if cost < best_cost:
                best_cost = cost
                best_bin = b - 1

        # two-pointer partition of prim_order[start:end) by bin index
        i = start
        j = end - 1
        while i <= j:
            q = prim_order[i]
            b = int((centroid[q, axis] - cmin) * inv_ext)
            if b > _NBINS - 1:
                b = _NBINS - 1
            if b <= best_bin:
                i += 1
            else:
                prim_order[i] = prim_order[j]
                prim_order[j] = q
                j -= 1
        mid = i

        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        node_left[node] = left
        node_right[node] = right
        leaf_start[node] = -1
        leaf_count[node] = 0
        stack[top, 0] = left
        stack[top, 1] = start
        stack[top, 2] = mid
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = right
        stack[top, 1] = mid
        stack[top, 2] = end
        stack[top, 3] = depth + 1
        top += 1

    return n_nodes


class Bvh:
    """Flat BVH over the valid triangles of a scene snapshot."""

    def __init__(self, frames: SceneFrames, leaf_size: int = LEAF_SIZE):
        m = len(frames)
        if m == 0:
            raise EmptyScene("cannot build a BVH over zero valid triangles")
        cap = 2 * m + 1
        self.node_min = np.empty((cap, 3), dtype=np.float64)
        self.node_max = np.empty((cap, 3), dtype=np.float64)
        self.node_left = np.empty(cap, dtype=np.int64)
        self.node_right = np.empty(cap, dtype=np.int64)
        self.leaf_start = np.empty(cap, dtype=np.int64)
        self.leaf_count = np.empty(cap, dtype=np.int64)
        self.prim_order = np.empty(m, dtype=np.int64)
        n = _build_kernel(frames.aabb_min, frames.aabb_max, frames.centroid,
                          leaf_size, self.node_min, self.node_max,
                          self.node_left, self.node_right,
                          self.leaf_start, self.leaf_count, self.prim_order)
        self.n_nodes = int(n)
        for a in ("node_min", "node_max", "node_left", "node_right",
                  "leaf_start", "leaf_count"):
            setattr(self, a, getattr(self, a)[: self.n_nodes])

    def leaf_ranges(self):
        """(start, count) pairs of all leaves, in node order."""
        out = []
        for i in range(self.n_nodes):
            if self.node_left[i] < 0:
                out.append((int(self.leaf_start[i]), int(self.leaf_count[i])))
        return out

    def validate(self, frames: SceneFrames) -> None:
        """Check the structural invariants; raises AssertionError on failure."""
        m = len(frames)
        seen = np.zeros(m, dtype=np.int64)
        for start, count in self.leaf_ranges():
            seen[self.prim_order[start:start + count]] += 1
        assert np.all(seen == 1), "every triangle must sit in exactly one leaf"
        for i in range(self.n_nodes):
            if self.node_left[i] >= 0:
                for ch in (self.node_left[i], self.node_right[i]):
                    assert np.all(self.node_min[i] <= self.node_min[ch] + 1e-12)
                    assert np.all(self.node_max[i] >= self.node_max[ch] - 1e-12)
            else:
                s, c = int(self.leaf_start[i]), int(self.leaf_count[i])
                prims = self.prim_order[s:s + c]
                assert np.all(frames.aabb_min[prims] >= self.node_min[i] - 1e-12)
                assert np.all(frames.aabb_max[prims] <= self.node_max[i] + 1e-12)


def bvh_build(frames: SceneFrames, leaf_size: int = LEAF_SIZE) -> Bvh:
    return Bvh(frames, leaf_size=leaf_size)
