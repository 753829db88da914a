"""Image file IO and color-space conversion.

Training operates in linear RGB; sRGB encode/decode happens at the file
boundary. PNG in/out via Pillow, PPM out via a tiny writer.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import Malformed


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def load_image(path: str | Path, linear: bool = True) -> np.ndarray:
    """8-bit image file -> float64 (h, w, 3); sRGB-decoded when linear=True."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as e:
        raise Malformed(f"cannot read image {path}: {e}") from e
    return srgb_to_linear(arr) if linear else arr


def save_image(path: str | Path, rgb: np.ndarray, linear: bool = True) -> None:
    """Write a (h, w, 3) float image as 8-bit PNG or PPM (by extension)."""
    path = Path(path)
    data = linear_to_srgb(rgb) if linear else np.clip(rgb, 0.0, 1.0)
    u8 = (data * 255.0 + 0.5).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (u8.shape[1], u8.shape[0]))
            f.write(u8.tobytes())
    else:
        PILImage.fromarray(u8, mode="RGB").save(path)


def image_bytes(rgb: np.ndarray, linear: bool = True) -> bytes:
    """Canonical 8-bit encoding of an image, for bitwise comparisons."""
    data = linear_to_srgb(rgb) if linear else np.clip(rgb, 0.0, 1.0)
    return (data * 255.0 + 0.5).astype(np.uint8).tobytes()


class EnvironmentMap:
    """Equirectangular environment map with bilinear lookup.

    u wraps around azimuth atan2(y, x); v runs from +z (top) to -z.
    """

    def __init__(self, rgb: np.ndarray):
        rgb = np.asarray(rgb, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise Malformed("environment map must be (h, w, 3)")
        self.rgb = rgb

    @classmethod
    def load(cls, path: str | Path, linear: bool = True) -> "EnvironmentMap":
        return cls(load_image(path, linear=linear))

    @classmethod
    def constant(cls, color) -> "EnvironmentMap":
        return cls(np.tile(np.asarray(color, dtype=np.float64), (2, 4, 1)))

    def sample(self, dirs: np.ndarray) -> np.ndarray:
        d = np.asarray(dirs, dtype=np.float64)
        single = d.ndim == 1
        if single:
            d = d[None]
        h, w = self.rgb.shape[:2]
        phi = np.arctan2(d[:, 1], d[:, 0])          # [-pi, pi]
        theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))  # [0, pi]
        u = (phi + np.pi) / (2.0 * np.pi) * w - 0.5
        v = theta / np.pi * h - 0.5
        u0 = np.floor(u).astype(np.int64)
        v0 = np.floor(v).astype(np.int64)
        fu = u - u0
        fv = v - v0
        u0w = np.mod(u0, w)
        u1w = np.mod(u0 + 1, w)
        v0c = np.clip(v0, 0, h - 1)
        v1c = np.clip(v0 + 1, 0, h - 1)
        c00 = self.rgb[v0c, u0w]
        c01 = self.rgb[v0c, u1w]
        c10 = self.rgb[v1c, u0w]
        c11 = self.rgb[v1c, u1w]
        fu = fu[:, None]
        fv = fv[:, None]
        out = ((1 - fv) * ((1 - fu) * c00 + fu * c01)
               + fv * ((1 - fu) * c10 + fu * c11))
        return out[0] if single else out
