"""Training loop: render, loss, backward, Adam, prune/densify on schedule."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import backward_rays
from .camera import Camera, generate_rays
from .config import TrainConfig
from .densify import IntervalStats, prune_and_densify
from .errors import DatasetEmpty, DivergenceError, EmptyScene
from .geometry import TriangleSoup
from .losses import loss_total
from .metrics import psnr
from .scene_io import save_checkpoint
from .tracer import Image, TracerScene
from .images import save_image

METRIC_COLUMNS = ("iteration", "total_loss", "l1", "dssim", "ln", "lo", "ls",
                  "psnr", "n_triangles", "nan_drops")


@dataclass
class Dataset:
    """Posed linear-RGB images plus an optional seed point cloud."""
    cameras: list
    images: list                      # (h, w, 3) float64 linear
    train_split: list = field(default_factory=list)
    test_split: list = field(default_factory=list)
    points: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        if not self.train_split and not self.test_split:
            self.train_split = list(range(len(self.cameras)))

    def train_views(self):
        return [(self.cameras[i], self.images[i]) for i in self.train_split]

    def test_views(self):
        return [(self.cameras[i], self.images[i]) for i in self.test_split]


@dataclass
class TrainResult:
    soup: TriangleSoup
    metrics: list
    iterations_run: int
    stopped_early: bool = False


class MetricsWriter:
    """Append-only CSV; writes the header only when starting a new file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.writer(self._fh)
        if fresh:
            self._writer.writerow(METRIC_COLUMNS)
            self._fh.flush()

    def write(self, row: dict):
        self._writer.writerow([row[c] for c in METRIC_COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()


def _format_row(it, rep, psnr_val, n_tris, nan_drops):
    return {
        "iteration": it,
        "total_loss": f"{rep.total:.8f}",
        "l1": f"{rep.l1:.8f}",
        "dssim": f"{rep.dssim:.8f}",
        "ln": f"{rep.normal:.8f}",
        "lo": f"{rep.opacity:.8f}",
        "ls": f"{rep.size:.8f}",
        "psnr": f"{psnr_val:.4f}",
        "n_triangles": n_tris,
        "nan_drops": nan_drops,
    }


def train(dataset: Dataset, soup: TriangleSoup, cfg: TrainConfig,
          out_dir: str | Path | None = None, callback=None,
          start_iteration: int = 0, workers: int | None = None) -> TrainResult:
    """Optimize the soup against the dataset's training views.

    Per iteration: sample a view, render, compute the loss and its
    gradients, Adam step. Every densification_interval inside the window,
    prune then densify and reset the interval statistics. Checkpoints and
    metric rows are emitted on schedule when out_dir is given.

    callback(iteration, soup, row_or_None) may return True to stop early.
    """
    from .optim import Adam, vertex_lr

    views = dataset.train_views()
    if not views:
        raise DatasetEmpty("no training views")
    soup = soup.copy()
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(len(soup))
    stats = IntervalStats(len(soup))
    bg = np.asarray(cfg.background, dtype=np.float64)
    deterministic_rays = cfg.spp == 1
    ray_cache = {}
    writer = None
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(out_dir / "metrics.csv")

    metrics_rows = []
    nan_total = 0
    bad_streak = 0
    order = []
    stopped = False
    it = start_iteration

    try:
        for it in range(start_iteration + 1, cfg.iterations + 1):
            if not order:
                order = list(rng.permutation(len(views)))
            vi = order.pop()
            cam, gt = views[vi]
            if deterministic_rays:
                rays = ray_cache.get(vi)
                if rays is None:
                    rays = generate_rays(cam, sampling="center", spp=1)
                    ray_cache[vi] = rays
            else:
                rays = generate_rays(cam, sampling="jittered", spp=cfg.spp,
                                     rng=rng)

            scene = TracerScene(soup, k=cfg.k, t_term=cfg.t_term)
            out = scene.trace_rays(rays, stats=True, workers=workers)
            spp = cfg.spp
            h, w = cam.height, cam.width
            rgb_rays = out.rgb + out.transmittance[:, None] * bg[None, :]
            img = Image(
                rgb=rgb_rays.reshape(h, w, spp, 3).mean(axis=2),
                depth=out.depth.reshape(h, w, spp).mean(axis=2),
                normal=out.normal.reshape(h, w, spp, 3).mean(axis=2),
                transmittance=out.transmittance.reshape(h, w, spp).mean(axis=2),
            )
            rep = loss_total(img, gt, soup, cfg, cam)

            if not np.isfinite(rep.total):
                bad_streak += 1
                if bad_streak >= 10:
                    raise DivergenceError(
                        f"loss non-finite for {bad_streak} consecutive "
                        f"iterations (iteration {it})")
                continue
            bad_streak = 0

            dl_rgb = np.repeat(rep.dl_rgb.reshape(h * w, 1, 3), spp,
                               axis=1).reshape(-1, 3) / spp
            dl_norm = None
            if rep.dl_norm is not None:
                dl_norm = np.repeat(rep.dl_norm.reshape(h * w, 1, 3), spp,
                                    axis=1).reshape(-1, 3) / spp
            dl_t = dl_rgb @ bg if bg.any() else None
            acc = backward_rays(scene, rays, out, dl_rgb, None, dl_norm,
                                dl_t, workers=workers)
            if rep.grad_logit is not None:
                acc.opacity_logit += rep.grad_logit
            if rep.grad_vertices is not None:
                acc.vertices += rep.grad_vertices
            if it <= cfg.sh_warmup:
                acc.sh[:, :, 1:] = 0.0
            nan_total += acc.nan_drops

            stats.update_view(out.omega_max, out.hit_mask, soup, cam.center)

            prev_vertices = soup.vertices.copy()
            lrs = {
                "vertices": vertex_lr(it, cfg.iterations, cfg.lr_vertices,
                                      cfg.vertex_lr_final_mult),
                "sh": cfg.feature_lr,
                "opacity_logit": cfg.opacity_lr,
                "sigma": cfg.lr_sigma,
            }
            adam.step(soup, acc, lrs)
            bad_rows = ~np.isfinite(soup.vertices).all(axis=(1, 2))
            if bad_rows.any():
                soup.vertices[bad_rows] = prev_vertices[bad_rows]
                nan_total += int(bad_rows.sum())

            if (cfg.densify_from_iter <= it <= cfg.densify_until_iter
                    and it % cfg.densification_interval == 0):
                soup, _ = prune_and_densify(soup, adam, stats, cfg, rng)
                if len(soup) == 0:
                    raise EmptyScene(
                        f"all triangles pruned at iteration {it}")
                stats.reset(len(soup))

            row = None
            if it % cfg.log_interval == 0 or it == cfg.iterations:
                row = _format_row(it, rep, psnr(img.rgb, gt), len(soup),
                                  nan_total)
                metrics_rows.append(row)
                if writer is not None:
                    writer.write(row)

            if out_dir is not None and it % cfg.checkpoint_interval == 0:
                save_checkpoint(out_dir / f"checkpoint_{it:07d}.utrc", soup,
                                _checkpoint_meta(cfg, it))
            if (out_dir is not None and dataset.test_split
                    and it % cfg.test_interval == 0):
                from .tracer import render_image
                for ti, (tcam, _timg) in enumerate(dataset.test_views()):
                    timg = render_image(TracerScene(soup, cfg.k, cfg.t_term),
                                        tcam, background=cfg.background,
                                        workers=workers)
                    save_image(out_dir / f"test_{ti}_{it:07d}.png", timg.rgb)

            if callback is not None and callback(it, soup, row):
                stopped = True
                break
    finally:
        if writer is not None:
            writer.close()

    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint_final.utrc", soup,
                        _checkpoint_meta(cfg, it))
    return TrainResult(soup=soup, metrics=metrics_rows, iterations_run=it,
                       stopped_early=stopped)


def _checkpoint_meta(cfg: TrainConfig, iteration: int) -> dict:
    return {"iteration": iteration, "seed": cfg.seed,
            "opacity_init": cfg.opacity_init, "sigma_init": cfg.sigma_init}
