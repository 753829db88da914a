"""Hand-rolled Adam over the four triangle parameter groups."""

from __future__ import annotations

import numpy as np

from .autograd import GradientAccumulator
from .constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, SIGMA_MIN
from .geometry import TriangleSoup

GROUPS = ("vertices", "sh", "opacity_logit", "sigma")


def vertex_lr(iteration: int, total: int, lr_init: float,
              final_mult: float = 0.01) -> float:
    """Exponential decay from lr_init to final_mult * lr_init over the run."""
    if total <= 1:
        return lr_init
    frac = min(max(iteration / total, 0.0), 1.0)
    return lr_init * final_mult ** frac


class Adam:
    """Per-group moments sized to the soup; rows survive pruning via remap."""

    def __init__(self, n_triangles: int):
        self.t = 0
        self.m = {g: None for g in GROUPS}
        self.v = {g: None for g in GROUPS}
        self._alloc(n_triangles)

    def _alloc(self, n: int):
        shapes = {"vertices": (n, 3, 3), "sh": (n, 3, 16),
                  "opacity_logit": (n,), "sigma": (n,)}
        for g in GROUPS:
            self.m[g] = np.zeros(shapes[g])
            self.v[g] = np.zeros(shapes[g])

    def remap(self, index: np.ndarray, n_new: int):
        """Keep moments of surviving rows (index into old arrays, -1 = fresh)."""
        old_m = dict(self.m)
        old_v = dict(self.v)
        self._alloc(n_new)
        keep = index >= 0
        src = index[keep]
        for g in GROUPS:
            self.m[g][keep] = old_m[g][src]
            self.v[g][keep] = old_v[g][src]

    def step(self, soup: TriangleSoup, grads: GradientAccumulator,
             lrs: dict[str, float]) -> None:
        """One bias-corrected Adam update, in place on the soup."""
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        params = {"vertices": soup.vertices, "sh": soup.sh,
                  "opacity_logit": soup.opacity_logit, "sigma": soup.sigma}
        gvals = {"vertices": grads.vertices, "sh": grads.sh,
                 "opacity_logit": grads.opacity_logit, "sigma": grads.sigma}
        for g in GROUPS:
            lr = lrs[g]
            if lr == 0.0:
                continue
            m = self.m[g]
            v = self.v[g]
            grad = gvals[g]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad * grad
            params[g] -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        np.maximum(soup.sigma, SIGMA_MIN, out=soup.sigma)
