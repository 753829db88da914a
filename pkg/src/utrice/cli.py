"""Command-line interface: train / render / eval / gradcheck.

Exit codes: 0 ok, 2 config error, 3 IO error, 4 divergence,
5 gradcheck failure. UTRICE_THREADS mirrors --threads; configuration
layers file < environment < flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import TrainConfig, build_config
from .errors import (ConfigError, DatasetEmpty, DivergenceError, EmptyScene,
                     Malformed, MissingProperty, TooFewPoints,
                     UnsupportedVersion, UtriceError)
from .parallel import set_threads

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_GRADCHECK = 5

_IO_ERRORS = (OSError, Malformed, MissingProperty, UnsupportedVersion,
              TooFewPoints, DatasetEmpty, EmptyScene)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    group = parser.add_argument_group(
        "config overrides", "every key can also come from the config file "
        "or a UTRICE_<KEY> environment variable")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name == "background":
            default = ",".join(str(x) for x in default)
        group.add_argument(flag, dest=f.name, type=str, default=None,
                           metavar="V", help=f"(default: {default})")


def _collect_config(args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(TrainConfig)}
    return build_config(getattr(args, "config", None), None, overrides)


def _parse_triple(text: str, what: str) -> np.ndarray:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{what} needs three comma-separated numbers")
    return np.asarray(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="utrice",
        description="differentiable triangle ray tracing: train, render and "
                    "evaluate triangle-soup radiance fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="optimize a soup against a dataset")
    p_train.add_argument("--manifest", required=True, help="dataset manifest JSON")
    p_train.add_argument("--config", help="TOML or JSON config file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p_train)

    p_render = sub.add_parser("render", help="render a checkpoint")
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--out", required=True, help="output image path (.png/.ppm)")
    p_render.add_argument("--manifest", help="take the camera from this manifest")
    p_render.add_argument("--view", type=int, default=0,
                          help="manifest view index (default 0)")
    p_render.add_argument("--camera", help="camera JSON file (pose/intrinsics)")
    p_render.add_argument("--width", type=int, help="override image width")
    p_render.add_argument("--height", type=int, help="override image height")
    p_render.add_argument("--spp", type=int, default=1, help="samples per pixel")
    p_render.add_argument("--aperture", type=float, default=0.0,
                          help="thin-lens aperture radius (0 = pinhole)")
    p_render.add_argument("--focal-distance", type=float, default=1.0)
    p_render.add_argument("--mirror-plane", metavar="PX,PY,PZ,NX,NY,NZ",
                          help="reflect rays at this analytic plane")
    p_render.add_argument("--refract-sphere", metavar="CX,CY,CZ,R",
                          help="refract rays at this analytic sphere")
    p_render.add_argument("--eta", type=float, default=1.5,
                          help="relative refraction index for --refract-sphere")
    p_render.add_argument("--envmap", help="equirectangular PNG environment map")
    p_render.add_argument("--background", default="0,0,0", metavar="R,G,B")
    p_render.add_argument("--k", type=int, default=16)
    p_render.add_argument("--t-term", type=float, default=1e-3)
    p_render.add_argument("--seed", type=int, default=0)
    p_render.add_argument("--threads", type=int, default=1)
    p_render.add_argument("--aux", action="store_true",
                          help="also save depth/normal/transmittance .npy")

    p_eval = sub.add_parser("eval", help="PSNR/SSIM table for a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--split", choices=("train", "test", "all"),
                        default="test")
    p_eval.add_argument("--out", help="also write the table to this CSV")
    p_eval.add_argument("--k", type=int, default=16)
    p_eval.add_argument("--t-term", type=float, default=1e-3)
    p_eval.add_argument("--background", default="0,0,0", metavar="R,G,B")
    p_eval.add_argument("--threads", type=int, default=1)

    p_grad = sub.add_parser("gradcheck",
                            help="certify analytic gradients against finite "
                                 "differences")
    p_grad.add_argument("--trials", type=int, default=1000)
    p_grad.add_argument("--seed", type=int, default=0)
    return parser


def cmd_train(args) -> int:
    from .scene_io import (init_from_pointcloud, load_checkpoint,
                           load_manifest, load_point_ply)
    from .training import Dataset, train
    from .images import load_image

    cfg = _collect_config(args)
    set_threads(cfg.threads)
    manifest = load_manifest(args.manifest)
    images = [load_image(v.image_path) for v in manifest.views]
    cameras = [v.camera for v in manifest.views]
    points = colors = None
    if manifest.pointcloud_path is not None:
        points, colors = load_point_ply(manifest.pointcloud_path)
    dataset = Dataset(cameras=cameras, images=images,
                      train_split=manifest.train_split,
                      test_split=manifest.test_split,
                      points=points, colors=colors)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2,
                                                    sort_keys=True))
    start_iteration = 0
    if args.resume:
        soup, meta = load_checkpoint(args.resume)
        start_iteration = int(meta.get("iteration", 0))
    else:
        if points is None:
            raise ConfigError("manifest has no pointcloud and --resume not given")
        rng = np.random.default_rng(cfg.seed)
        soup = init_from_pointcloud(points, colors, rng,
                                    opacity_init=cfg.opacity_init,
                                    sigma_init=cfg.sigma_init)

    def progress(it, _soup, row):
        if row is not None:
            print(f"iter {row['iteration']:>7} loss {row['total_loss']} "
                  f"psnr {row['psnr']} tris {row['n_triangles']}",
                  file=sys.stderr)
        return False

    result = train(dataset, soup, cfg, out_dir=out_dir, callback=progress,
                   start_iteration=start_iteration)
    print(f"finished at iteration {result.iterations_run}; "
          f"{len(result.soup)} triangles; outputs in {out_dir}")
    return EXIT_OK


def _camera_from_args(args, manifest_loader):
    from .camera import Camera

    if args.camera:
        try:
            spec = json.loads(Path(args.camera).read_text())
        except json.JSONDecodeError as e:
            raise Malformed(f"{args.camera}: invalid JSON: {e}") from e
        pose = np.asarray(spec["pose"], dtype=np.float64)
        cam = Camera(rotation=pose[:, :3], translation=pose[:, 3],
                     fx=spec["fx"], fy=spec["fy"], cx=spec["cx"], cy=spec["cy"],
                     width=int(spec["width"]), height=int(spec["height"]))
    elif args.manifest:
        manifest = manifest_loader(args.manifest)
        if not 0 <= args.view < len(manifest.views):
            raise ConfigError(f"--view {args.view} out of range "
                              f"(manifest has {len(manifest.views)} views)")
        cam = manifest.views[args.view].camera
    else:
        raise ConfigError("render needs --camera or --manifest")
    kw = {}
    if args.width:
        kw["width"] = args.width
    if args.height:
        kw["height"] = args.height
    if kw or args.aperture or args.focal_distance != 1.0:
        cam = Camera(rotation=cam.rotation, translation=cam.translation,
                     fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                     width=kw.get("width", cam.width),
                     height=kw.get("height", cam.height),
                     aperture=args.aperture,
                     focal_distance=args.focal_distance)
    return cam


def cmd_render(args) -> int:
    from .effects import MirrorPlane, RefractSphere, render_effects
    from .images import EnvironmentMap, save_image
    from .scene_io import load_checkpoint, load_manifest
    from .tracer import TracerScene

    set_threads(args.threads)
    soup, _meta = load_checkpoint(args.checkpoint)
    cam = _camera_from_args(args, load_manifest)
    if args.mirror_plane and args.refract_sphere:
        raise ConfigError("choose one of --mirror-plane / --refract-sphere")
    surface = None
    if args.mirror_plane:
        vals = [float(x) for x in args.mirror_plane.split(",")]
        if len(vals) != 6:
            raise ConfigError("--mirror-plane needs px,py,pz,nx,ny,nz")
        surface = MirrorPlane(point=vals[:3], normal=vals[3:])
    elif args.refract_sphere:
        vals = [float(x) for x in args.refract_sphere.split(",")]
        if len(vals) != 4:
            raise ConfigError("--refract-sphere needs cx,cy,cz,r")
        surface = RefractSphere(center=vals[:3], radius=vals[3], eta=args.eta)
    envmap = EnvironmentMap.load(args.envmap) if args.envmap else None
    background = _parse_triple(args.background, "--background")

    scene = TracerScene(soup, k=args.k, t_term=args.t_term)
    rng = np.random.default_rng(args.seed)
    img, bounces = render_effects(scene, cam, surface=surface, envmap=envmap,
                                  background=background, spp=args.spp,
                                  rng=rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, img.rgb)
    if args.aux:
        np.save(out.with_suffix(".depth.npy"), img.depth)
        np.save(out.with_suffix(".normal.npy"), img.normal)
        np.save(out.with_suffix(".transmittance.npy"), img.transmittance)
    print(f"wrote {out} ({cam.width}x{cam.height}, spp={args.spp}, "
          f"bounces={bounces})")
    return EXIT_OK


def cmd_eval(args) -> int:
    import csv as _csv

    from .images import load_image
    from .losses import ssim
    from .metrics import psnr
    from .scene_io import load_checkpoint, load_manifest
    from .tracer import TracerScene, render_image

    set_threads(args.threads)
    soup, _meta = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    background = _parse_triple(args.background, "--background")
    if args.split == "train":
        indices = manifest.train_split
    elif args.split == "test":
        indices = manifest.test_split
    else:
        indices = list(range(len(manifest.views)))
    if not indices:
        raise DatasetEmpty(f"manifest split {args.split!r} is empty")
    scene = TracerScene(soup, k=args.k, t_term=args.t_term)
    rows = []
    for i in indices:
        view = manifest.views[i]
        gt = load_image(view.image_path)
        img = render_image(scene, view.camera, background=background)
        rows.append((i, psnr(img.rgb, gt), ssim(img.rgb, gt)))
    print(f"{'view':>6} {'psnr':>9} {'ssim':>8}")
    for i, p, s in rows:
        print(f"{i:>6} {p:>9.4f} {s:>8.5f}")
    mp = float(np.mean([r[1] for r in rows]))
    ms = float(np.mean([r[2] for r in rows]))
    print(f"{'mean':>6} {mp:>9.4f} {ms:>8.5f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = _csv.writer(f)
            w.writerow(("view", "psnr", "ssim"))
            for i, p, s in rows:
                w.writerow((i, f"{p:.4f}", f"{s:.5f}"))
            w.writerow(("mean", f"{mp:.4f}", f"{ms:.5f}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(trials=args.trials, seed=args.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"gradcheck passed ({report.trials} trials)")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args)
        if args.command == "render":
            return cmd_render(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except _IO_ERRORS as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
