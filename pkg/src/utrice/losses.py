"""Training losses and their analytic gradients.

Total loss: (1 - lc) L1 + lc D-SSIM + lo L_o + ln L_n + ls L_s. The image
terms produce per-pixel color gradients; opacity and size produce direct
per-triangle gradients; the normal term produces gradients on the
composited normal buffer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .camera import Camera
from .errors import ShapeMismatch
from .geometry import TriangleSoup
from .tracer import Image

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


_WINDOW = _gaussian_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable 11x11 Gaussian, zero padding; self-adjoint (symmetric kernel)."""
    out = correlate1d(img, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode="constant", cval=0.0)


def l1_loss(rendered: np.ndarray, gt: np.ndarray):
    """Mean absolute error and its gradient w.r.t. rendered."""
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over (h, w) or (h, w, c) images in [0, 1]."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    total = 0.0
    for c in range(a.shape[2]):
        s, _ = _ssim_channel(a[..., c], b[..., c], want_grad=False)
        total += s
    return total / a.shape[2]


def _ssim_channel(x: np.ndarray, y: np.ndarray, want_grad: bool = True):
    mu_x = _blur(x)
    mu_y = _blur(y)
    xx = _blur(x * x)
    yy = _blur(y * y)
    xy = _blur(x * y)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + _SSIM_C1
    a2 = 2.0 * cov + _SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + _SSIM_C1
    b2 = var_x + var_y + _SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())
    if not want_grad:
        return value, None
    # per-pixel partials of the map, then pull back through the blurs
    ds_da1 = a2 / (b1 * b2)
    ds_da2 = a1 / (b1 * b2)
    ds_db1 = -s / b1
    ds_db2 = -s / b2
    coef_mu = 2.0 * mu_y * (ds_da1 - ds_da2) + 2.0 * mu_x * (ds_db1 - ds_db2)
    coef_xy = 2.0 * ds_da2
    coef_x2 = ds_db2
    grad = _blur(coef_mu) + _blur(coef_xy) * y + _blur(coef_x2) * 2.0 * x
    return value, grad / x.size


def dssim(rendered: np.ndarray, gt: np.ndarray):
    """(1 - SSIM)/2 and its gradient w.r.t. rendered; per-channel SSIM."""
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape}")
    if rendered.ndim == 2:
        rendered = rendered[..., None]
        gt = gt[..., None]
    nc = rendered.shape[2]
    value = 0.0
    grad = np.empty_like(rendered)
    for c in range(nc):
        s, g = _ssim_channel(rendered[..., c], gt[..., c])
        value += s
        grad[..., c] = g
    value /= nc
    return (1.0 - value) / 2.0, grad * (-0.5 / nc)


def depth_normals(depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Camera-facing unit normals from screen-space depth differences.

    Depth is distance along the pixel ray; pixels are unprojected to camera
    space and the cross product of central differences gives the normal.
    Border pixels and empty regions come back as zero vectors.
    """
    h, w = depth.shape
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d_cam = np.stack([
        (ii + 0.5 - cam.cx) / cam.fx,
        (jj + 0.5 - cam.cy) / cam.fy,
        np.ones((h, w)),
    ], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    pts = d_cam * depth[..., None]
    ddx = np.zeros_like(pts)
    ddy = np.zeros_like(pts)
    ddx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    ddy[1:-1, :] = pts[2:, :] - pts[:-2, :]
    n = np.cross(ddx, ddy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = np.where(norm > 1e-12, n / norm, 0.0)
    # orient toward the camera (camera sits at the origin of camera space)
    flip = np.sum(n * pts, axis=-1) > 0.0
    n[flip] *= -1.0
    return n


def loss_normal(img: Image, cam: Camera):
    """Consistency between composited normals and depth-derived normals.

    L_n = mean_px[ sum_i w_i - N_acc . N_depth ]; with aligned unit normals
    the alpha-weight total cancels exactly. Gradients flow to the
    composited normals only (depth normal and weight total are treated as
    constants).
    """
    nd_cam = depth_normals(img.depth, cam)
    n_acc_cam = img.normal @ cam.rotation.T
    # pixels without a depth-normal estimate (borders, empty regions) are out
    valid = np.sum(nd_cam * nd_cam, axis=-1) > 0.5
    weight_total = 1.0 - img.transmittance
    per_px = np.where(valid,
                      weight_total - np.sum(n_acc_cam * nd_cam, axis=-1), 0.0)
    value = float(per_px.mean())
    dl_norm_world = -(nd_cam @ cam.rotation) / per_px.size
    return value, dl_norm_world


def loss_opacity(soup: TriangleSoup):
    """Mean opacity; pushes opacities down so pruning can act."""
    o = soup.opacity
    grad_logit = o * (1.0 - o) / len(soup)
    return float(o.mean()), grad_logit


def loss_size(soup: TriangleSoup):
    """Mean of 2/||(v1-v0)x(v2-v0)|| (encourages larger triangles)."""
    v = soup.vertices
    m = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    mn = np.sqrt(np.sum(m * m, axis=-1))
    n = len(soup)
    value = float((2.0 / mn).mean())
    mhat = m / mn[:, None]
    grad = np.empty_like(v)
    for j in range(3):
        e = v[:, (j + 2) % 3] - v[:, (j + 1) % 3]
        dnorm = np.cross(mhat, e)
        grad[:, j] = (-2.0 / (mn * mn))[:, None] * dnorm / n
    return value, grad


def loss_size_single(v1, v2, v3) -> float:
    m = np.cross(np.asarray(v2) - np.asarray(v1), np.asarray(v3) - np.asarray(v1))
    return 2.0 / float(np.linalg.norm(m))


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    normal: float
    opacity: float
    size: float
    dl_rgb: np.ndarray                    # (h, w, 3) gradient w.r.t. rendered color
    dl_norm: np.ndarray | None = None     # (h, w, 3) gradient w.r.t. composited normal
    grad_logit: np.ndarray | None = None  # (n,) direct opacity-logit gradient
    grad_vertices: np.ndarray | None = None  # (n, 3, 3) direct vertex gradient
    parts: dict = field(default_factory=dict)


def loss_total(img: Image, gt_rgb: np.ndarray, soup: TriangleSoup, cfg,
               cam: Camera) -> LossReport:
    """Combined training loss; see module docstring for the gradient split."""
    if img.rgb.shape != gt_rgb.shape:
        raise ShapeMismatch(f"{img.rgb.shape} vs {gt_rgb.shape}")
    lc = cfg.lambda_dssim
    v_l1, g_l1 = l1_loss(img.rgb, gt_rgb)
    dl_rgb = (1.0 - lc) * g_l1
    v_ds = 0.0
    if lc > 0.0:
        v_ds, g_ds = dssim(img.rgb, gt_rgb)
        dl_rgb = dl_rgb + lc * g_ds
    v_ln = 0.0
    dl_norm = None
    if cfg.lambda_normals > 0.0:
        v_ln, g_ln = loss_normal(img, cam)
        dl_norm = cfg.lambda_normals * g_ln
    v_lo = 0.0
    grad_logit = None
    if cfg.lambda_opacity > 0.0:
        v_lo, g_lo = loss_opacity(soup)
        grad_logit = cfg.lambda_opacity * g_lo
    v_ls = 0.0
    grad_vertices = None
    if cfg.lambda_size > 0.0:
        v_ls, g_ls = loss_size(soup)
        grad_vertices = cfg.lambda_size * g_ls
    total = ((1.0 - lc) * v_l1 + lc * v_ds + cfg.lambda_opacity * v_lo
             + cfg.lambda_normals * v_ln + cfg.lambda_size * v_ls)
    return LossReport(total=float(total), l1=v_l1, dssim=v_ds, normal=v_ln,
                      opacity=v_lo, size=v_ls, dl_rgb=dl_rgb, dl_norm=dl_norm,
                      grad_logit=grad_logit, grad_vertices=grad_vertices)
