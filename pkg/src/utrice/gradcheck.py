"""Gradient certification: analytic gradients vs central finite differences.

Each trial builds one random (triangle, ray) pair whose window response
lands in a mid range, then checks every parameter group:

- SH, opacity logit, sigma: analytic (backward kernel) against finite
  differences of the full single-ray render.
- vertices, deployed chain: against finite differences of the response with
  the incenter denominator frozen (the deployed gradient drops that term by
  design).
- vertices, exact mode: against full finite differences of the response.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (backward_ray, backward_window, fd_oracle,
                       window_response_frozen_denominator)
from .geometry import Ray, Triangle, TriangleSoup, edge_normals, window_response
from .reference import trace_ray_reference
from .frames import SceneFrames
from .tracer import TracerScene

TOLERANCES = {
    "sh": 1e-5,
    "opacity": 1e-4,
    "sigma": 1e-4,
    "vertices": 1e-3,
    "vertices_exact": 1e-3,
}


@dataclass
class GradcheckReport:
    trials: int
    max_rel: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=lambda: dict(TOLERANCES))

    @property
    def passed(self) -> bool:
        return all(self.max_rel[g] <= self.tolerances[g] for g in self.max_rel)

    def lines(self):
        out = []
        for g in sorted(self.max_rel):
            ok = "pass" if self.max_rel[g] <= self.tolerances[g] else "FAIL"
            out.append(f"{g:16s} max rel err {self.max_rel[g]:.3e} "
                       f"(tolerance {self.tolerances[g]:.0e}) {ok}")
        return out


def random_pair(rng: np.random.Generator, rho_range=(0.05, 0.95)):
    """Random single-triangle soup + ray whose hit response is mid-range,
    away from the argmax-edge tie (the max() kink breaks FD) and with all
    color channels clear of the [0, 1] clamp."""
    while True:
        v = rng.normal(size=(3, 3))
        if np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])) < 0.5:
            continue
        weights = rng.dirichlet([1.5, 1.5, 1.5])
        p = weights @ v
        origin = rng.normal(size=3) * 3.0
        d = p - origin
        dist = np.linalg.norm(d)
        if dist < 0.5:
            continue
        d = d / dist
        sh = np.zeros((3, 16))
        sh[:, 0] = rng.normal(scale=0.4, size=3)
        sh[:, 1:] = rng.normal(scale=0.02, size=(3, 15))
        soup = TriangleSoup(v[None], sh[None],
                            np.array([rng.normal(scale=1.0)]),
                            np.array([rng.uniform(0.4, 2.5)]))
        tri = soup.triangle(0)
        frame = edge_normals(tri)
        rho = float(window_response(frame, tri.sigma, p))
        if not rho_range[0] < rho < rho_range[1]:
            continue
        L = np.sort(frame.n @ p + frame.d)
        if (L[2] - L[1]) < 1e-2 * abs(L[0]):
            continue
        from .appearance import sh_eval
        raw = sh_eval(sh[None], d[None])[0]
        if np.any(raw < 0.03) or np.any(raw > 0.97):
            continue
        return soup, Ray(origin, d), p


def _render_functional(soup: TriangleSoup, ray: Ray, dl: np.ndarray) -> float:
    """dl . C for the brute-force reference render of one ray."""
    frames = SceneFrames(soup)
    rgb, _, _, _ = trace_ray_reference(frames, ray.origin, ray.direction)
    return float(dl @ rgb)


def _rel(analytic: float, fd: float, floor: float = 1e-7) -> float:
    return abs(analytic - fd) / max(abs(fd), abs(analytic), floor)


def run_gradcheck(trials: int = 1000, seed: int = 0,
                  sh_coeffs_per_trial: int = 4) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    worst = {g: 0.0 for g in TOLERANCES}
    for _ in range(trials):
        soup, ray, p = random_pair(rng)
        dl = rng.normal(size=3)
        scene = TracerScene(soup)
        state = scene.trace_ray(ray)
        acc = backward_ray(scene, ray, state, dl)

        def f_logit(x):
            s2 = soup.copy()
            s2.opacity_logit[0] = x[0]
            return _render_functional(s2, ray, dl)

        fd = fd_oracle(f_logit, np.array([soup.opacity_logit[0]]), 1e-4)[0]
        worst["opacity"] = max(worst["opacity"],
                               _rel(acc.opacity_logit[0], fd))

        def f_sigma(x):
            s2 = soup.copy()
            s2.sigma[0] = x[0]
            return _render_functional(s2, ray, dl)

        fd = fd_oracle(f_sigma, np.array([soup.sigma[0]]), 1e-5)[0]
        worst["sigma"] = max(worst["sigma"], _rel(acc.sigma[0], fd))

        coords = rng.integers(0, 48, size=sh_coeffs_per_trial)
        for flat in coords:
            ch, b = divmod(int(flat), 16)

            def f_sh(x):
                s2 = soup.copy()
                s2.sh[0, ch, b] = x[0]
                return _render_functional(s2, ray, dl)

            fd = fd_oracle(f_sh, np.array([soup.sh[0, ch, b]]), 1e-3)[0]
            worst["sh"] = max(worst["sh"], _rel(acc.sh[0, ch, b], fd))

        # vertex chains against the response itself
        tri = soup.triangle(0)
        frame = edge_normals(tri)
        phi_s0 = float(np.max(frame.n @ frame.incenter + frame.d))
        gv_dep, _ = backward_window(tri, p, 1.0, exact=False)
        gv_ex, _ = backward_window(tri, p, 1.0, exact=True)

        def f_frozen(vv):
            t2 = Triangle(vv[0], vv[1], vv[2], tri.sh, tri.opacity_logit,
                          tri.sigma)
            return window_response_frozen_denominator(t2, p, phi_s0)

        def f_full(vv):
            t2 = Triangle(vv[0], vv[1], vv[2], tri.sh, tri.opacity_logit,
                          tri.sigma)
            return float(window_response(edge_normals(t2), t2.sigma, p))

        fd_frozen = fd_oracle(f_frozen, tri.vertices, 1e-6)
        fd_full = fd_oracle(f_full, tri.vertices, 1e-6)
        scale = max(np.abs(fd_frozen).max(), 1e-7)
        worst["vertices"] = max(worst["vertices"],
                                float(np.abs(gv_dep - fd_frozen).max() / scale))
        scale = max(np.abs(fd_full).max(), 1e-7)
        worst["vertices_exact"] = max(
            worst["vertices_exact"],
            float(np.abs(gv_ex - fd_full).max() / scale))

    return GradcheckReport(trials=trials, max_rel=worst)
