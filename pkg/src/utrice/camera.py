"""Pinhole / thin-lens camera model and ray generation.

Convention: poses are world-to-camera (x_cam = R x_world + t), +z looks
forward, pixel (i, j) samples at (i + 0.5, j + 0.5). The tracer itself only
ever sees ray origins and directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Camera:
    rotation: np.ndarray        # (3, 3) world-to-camera
    translation: np.ndarray     # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    aperture: float = 0.0       # lens radius, world units; 0 = pinhole
    focal_distance: float = 1.0  # in-focus depth along the optical axis

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-5:
            raise ValueError(f"rotation is not orthonormal (max error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def look_dir(self) -> np.ndarray:
        """Optical axis (+z of the camera) in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])


@dataclass
class RayBatch:
    origins: np.ndarray      # (n, 3)
    directions: np.ndarray   # (n, 3) unit
    t_max: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.origins.shape[0]
        if self.t_max is None:
            self.t_max = np.full(n, np.inf)

    def __len__(self):
        return self.origins.shape[0]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at eye looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking along up; pick another
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def generate_rays(cam: Camera, sampling: str = "center", spp: int = 1,
                  rng: np.random.Generator | None = None) -> RayBatch:
    """Rays for every pixel, `spp` samples each, row-major, sample-minor.

    center sampling puts every sample at the pixel center (deterministic);
    jittered draws offsets in the pixel. With a positive aperture, origins
    are jittered on the lens disk and directions pass through the in-focus
    point of the pixel ray.
    """
    if sampling not in ("center", "jittered"):
        raise ValueError(f"unknown sampling mode: {sampling}")
    if sampling == "jittered" or cam.aperture > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
    h, w = cam.height, cam.width
    n = h * w * spp
    jj, ii, _ = np.meshgrid(np.arange(h), np.arange(w), np.arange(spp),
                            indexing="ij")
    ii = ii.reshape(-1).astype(np.float64)
    jj = jj.reshape(-1).astype(np.float64)
    if sampling == "center":
        sx = np.full(n, 0.5)
        sy = np.full(n, 0.5)
    else:
        sx = rng.random(n)
        sy = rng.random(n)
    dirs_cam = np.stack([
        (ii + sx - cam.cx) / cam.fx,
        (jj + sy - cam.cy) / cam.fy,
        np.ones(n),
    ], axis=-1)
    Rt = cam.rotation.T
    center = cam.center
    dirs = dirs_cam @ Rt.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)

    if cam.aperture <= 0.0:
        origins = np.broadcast_to(center, (n, 3)).copy()
        return RayBatch(origins, np.ascontiguousarray(dirs))

    # thin lens: in-focus point sits on the plane z_cam = focal_distance
    cos_axis = dirs_cam[:, 2] / np.linalg.norm(dirs_cam, axis=-1)
    t_focus = cam.focal_distance / cos_axis
    focus = center + dirs * t_focus[:, None]
    r = cam.aperture * np.sqrt(rng.random(n))
    phi = 2.0 * np.pi * rng.random(n)
    lens_x = r * np.cos(phi)
    lens_y = r * np.sin(phi)
    origins = center + lens_x[:, None] * Rt[:, 0] + lens_y[:, None] * Rt[:, 1]
    dirs = focus - origins
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return RayBatch(np.ascontiguousarray(origins), np.ascontiguousarray(dirs))
