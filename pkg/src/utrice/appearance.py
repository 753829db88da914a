"""View-dependent color from degree-3 real spherical harmonics.

Uses the conventional hard-coded real SH basis constants (Condon-Shortley
phase folded in, as in the point-based rendering lineage) and the usual
+0.5 offset before clamping to [0, 1].
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_COEFFS = 16  # (degree 3 + 1)^2


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """All 16 basis values for unit directions; dirs (..., 3) -> (..., 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(d.shape[:-1] + (16,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_eval(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Color for coefficients sh (..., 3, 16) and unit directions (..., 3).

    Returns clamp(sum_j sh[..., c, j] * Y_j(dir) + 0.5, 0, 1), shape (..., 3).
    """
    basis = sh_basis(dirs)
    raw = np.einsum("...cj,...j->...c", np.asarray(sh, dtype=np.float64), basis) + 0.5
    return np.clip(raw, 0.0, 1.0)


def rgb_to_band0(rgb: np.ndarray) -> np.ndarray:
    """Band-0 coefficient that reproduces the given color at offset 0.5."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def band0_to_rgb(c0: np.ndarray) -> np.ndarray:
    return np.asarray(c0, dtype=np.float64) * SH_C0 + 0.5
