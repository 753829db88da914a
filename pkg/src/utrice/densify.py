"""Pruning and MCMC-style densification.

Three pruning rules per interval: dead opacity, low interval-max importance
omega = T * o * rho, and visibility from fewer than two camera views.
Densification subdivides triangles whose world-space occlusion footprint
exceeds the split threshold and regrows the population by sampling
high-omega triangles with vertex noise, capped at max_triangles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriangleSoup, incenters, triangle_areas
from .optim import Adam


def occlusion_footprint(vertices: np.ndarray, origin) -> np.ndarray:
    """World-space angular size: max over vertices of the angle between the
    vertex-to-origin and centroid-to-origin directions. vertices is
    (..., 3, 3); returns radians shaped (...,)."""
    v = np.asarray(vertices, dtype=np.float64)
    single = v.ndim == 2
    if single:
        v = v[None]
    origin = np.asarray(origin, dtype=np.float64)
    cent = v.mean(axis=-2)
    w = origin - cent
    wn = np.linalg.norm(w, axis=-1, keepdims=True)
    u = origin - v  # (..., 3, 3)
    un = np.linalg.norm(u, axis=-1)
    cosang = np.sum(u * w[..., None, :], axis=-1) / (un * wn + 1e-300)
    ang = np.arccos(np.clip(cosang, -1.0, 1.0))
    out = ang.max(axis=-1)
    return float(out[0]) if single else out


class IntervalStats:
    """Per-triangle statistics accumulated between densification events."""

    def __init__(self, n: int):
        self.omega_max = np.zeros(n)
        self.view_hits = np.zeros(n, dtype=np.int64)
        self.footprint_max = np.zeros(n)

    def update_view(self, omega: np.ndarray, hit_mask: np.ndarray,
                    soup: TriangleSoup, cam_center) -> None:
        np.maximum(self.omega_max, omega, out=self.omega_max)
        self.view_hits += hit_mask.astype(np.int64)
        if hit_mask.any():
            fp = occlusion_footprint(soup.vertices[hit_mask], cam_center)
            self.footprint_max[hit_mask] = np.maximum(
                self.footprint_max[hit_mask], fp)

    def reset(self, n: int):
        self.__init__(n)


@dataclass
class DensifyReport:
    pruned_opacity: int = 0
    pruned_omega: int = 0
    pruned_views: int = 0
    split: int = 0
    added: int = 0
    n_after: int = 0


def prune_mask(soup: TriangleSoup, stats: IntervalStats, cfg) -> np.ndarray:
    """True for triangles that survive all three pruning rules."""
    o = soup.opacity
    dead = o < cfg.opacity_dead
    unimportant = stats.omega_max < cfg.importance_threshold
    unseen = stats.view_hits < 2
    return ~(dead | unimportant | unseen)


def subdivide4(soup: TriangleSoup, mask: np.ndarray) -> TriangleSoup:
    """Replace masked triangles with their 4-way midpoint subdivision.

    Children inherit appearance; opacity is adjusted so two overlapping
    children approximately composite like the parent:
    o_child = 1 - sqrt(1 - o_parent).
    """
    v = soup.vertices[mask]
    m12 = 0.5 * (v[:, 0] + v[:, 1])
    m23 = 0.5 * (v[:, 1] + v[:, 2])
    m31 = 0.5 * (v[:, 2] + v[:, 0])
    kids = np.empty((v.shape[0], 4, 3, 3))
    kids[:, 0] = np.stack([v[:, 0], m12, m31], axis=1)
    kids[:, 1] = np.stack([m12, v[:, 1], m23], axis=1)
    kids[:, 2] = np.stack([m31, m23, v[:, 2]], axis=1)
    kids[:, 3] = np.stack([m12, m23, m31], axis=1)
    o_parent = soup.opacity[mask]
    o_child = np.clip(1.0 - np.sqrt(1.0 - o_parent), 1e-6, 1.0 - 1e-6)
    child_logit = np.log(o_child / (1.0 - o_child))
    n_kids = 4 * v.shape[0]
    return TriangleSoup(
        kids.reshape(n_kids, 3, 3),
        np.repeat(soup.sh[mask], 4, axis=0),
        np.repeat(child_logit, 4),
        np.repeat(soup.sigma[mask], 4),
    )


def inradii(vertices: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    area = triangle_areas(v)
    per = (np.linalg.norm(v[:, 1] - v[:, 0], axis=-1)
           + np.linalg.norm(v[:, 2] - v[:, 1], axis=-1)
           + np.linalg.norm(v[:, 0] - v[:, 2], axis=-1))
    return 2.0 * area / per


def prune_and_densify(soup: TriangleSoup, adam: Adam, stats: IntervalStats,
                      cfg, rng: np.random.Generator):
    """One densification event: prune, split oversized, regrow by sampling.

    Returns (new soup, report); remaps the Adam moments in place (survivors
    keep theirs, children and regrown triangles start fresh).
    """
    n0 = len(soup)
    o = soup.opacity
    dead = o < cfg.opacity_dead
    unimportant = stats.omega_max < cfg.importance_threshold
    unseen = stats.view_hits < 2
    keep = ~(dead | unimportant | unseen)
    report = DensifyReport(
        pruned_opacity=int(dead.sum()),
        pruned_omega=int((unimportant & ~dead).sum()),
        pruned_views=int((unseen & ~dead & ~unimportant).sum()),
    )

    keep_idx = np.nonzero(keep)[0]
    survivors = soup.take(keep_idx)
    surv_omega = stats.omega_max[keep_idx]
    surv_fp = stats.footprint_max[keep_idx]
    index_map = [keep_idx]  # old-soup row for each new row, -1 = fresh
    parts = [None]  # placeholder for survivors-after-splits

    # (a) 4-way subdivision of triangles with oversized occlusion footprint
    split = surv_fp > cfg.split_size
    budget = cfg.max_triangles - len(survivors)
    if split.sum() * 3 > budget:
        # largest footprints first until the cap binds
        order = np.argsort(-surv_fp)
        allowed = max(0, budget // 3)
        chosen = order[:allowed]
        chosen = chosen[surv_fp[chosen] > cfg.split_size]
        split = np.zeros(len(survivors), dtype=bool)
        split[chosen] = True
    report.split = int(split.sum())
    kept_plain = survivors.take(~split)
    index_map = [keep_idx[~split]]
    parts = [kept_plain]
    if split.any():
        kids = subdivide4(survivors, split)
        parts.append(kids)
        index_map.append(np.full(len(kids), -1, dtype=np.int64))
    merged = TriangleSoup.concatenate(parts) if len(parts) > 1 else parts[0]
    merged_omega = np.concatenate(
        [surv_omega[~split], np.repeat(surv_omega[split], 4)])

    # (b)+(c) regrow: relocate pruned capacity onto high-omega triangles,
    # growing the population by at most add_shape, capped at max_triangles
    target = min(cfg.max_triangles, int(np.floor(n0 * cfg.add_shape)))
    n_new = max(0, target - len(merged))
    if n_new > 0 and len(merged) > 0:
        w = merged_omega.copy()
        if w.sum() <= 0.0:
            w[:] = 1.0
        w = w / w.sum()
        src = rng.choice(len(merged), size=n_new, p=w)
        # a source sampled m times shares its opacity with its m copies so
        # the composite stays roughly constant: o' = 1 - (1-o)^(1/(m+1))
        counts = np.bincount(src, minlength=len(merged))
        o_old = 1.0 / (1.0 + np.exp(-merged.opacity_logit))
        o_new = 1.0 - (1.0 - o_old) ** (1.0 / (counts + 1.0))
        o_new = np.clip(o_new, 1e-6, 1.0 - 1e-6)
        new_logit = np.log(o_new / (1.0 - o_new))
        merged.opacity_logit[counts > 0] = new_logit[counts > 0]
        base = merged.take(src)
        noise_scale = cfg.max_noise_factor * inradii(base.vertices)
        noise = rng.normal(size=(n_new, 3, 3)) * noise_scale[:, None, None]
        regrown = TriangleSoup(base.vertices + noise, base.sh,
                               base.opacity_logit, base.sigma)
        merged = TriangleSoup.concatenate([merged, regrown])
        index_map.append(np.full(n_new, -1, dtype=np.int64))
        report.added = n_new

    full_map = np.concatenate(index_map) if len(index_map) > 1 else index_map[0]
    adam.remap(full_map, len(merged))
    report.n_after = len(merged)
    return merged, report
