"""``fxd`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every command that
writes an output directory appends one provenance line (command, seed,
config hash, version) to ``provenance.jsonl`` there.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod

log = logging.getLogger("fxd")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _threads(args):
    n = args.threads
    if n is None and os.environ.get("FXD_THREADS"):
        try:
            n = int(os.environ["FXD_THREADS"])
        except ValueError as exc:
            raise UsageError(f"FXD_THREADS must be an integer, got {os.environ['FXD_THREADS']!r}") from exc
    n = n or os.cpu_count() or 1
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import torch

    torch.set_num_threads(n)
    return n


def _deterministic(on: bool):
    import torch

    torch.use_deterministic_algorithms(on)


def _provenance(out_dir, command: str, seed, digest: str, argv):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = {"command": command, "seed": seed, "config_hash": digest, "version": __version__, "argv": list(argv)}
    with open(out / "provenance.jsonl", "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _stage_iters(text):
    try:
        vals = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a,b,c integers, got {text!r}")
    if len(vals) != 3 or min(vals) < 0:
        raise argparse.ArgumentTypeError(f"expected three non-negative integers, got {text!r}")
    return vals


def _config(args, overrides: dict):
    return cfgmod.load(getattr(args, "config", None), overrides)


def _find_view(views, camera: str, frame: int):
    for v in views:
        if v.name == camera and v.frame == frame:
            return v
    raise UsageError(f"no view {camera!r} at frame {frame}")


def _lateral_shift(views, view, shift: float):
    from .trainer import path_axes

    axes = path_axes(views, view)
    return view.translated(shift * axes[:, 1], name=f"{view.name}+{shift:g}m", role="virtual")


# --- commands ----------------------------------------------------------------------


def cmd_generate(args, argv):
    from .synth import generate

    over = {"scene": {}}
    if args.seed is not None:
        over["scene"]["seed"] = args.seed
    if args.preset is not None:
        over["scene"]["preset"] = args.preset
    if args.frames is not None:
        over["scene"]["n_frames"] = args.frames
    if args.trajectory is not None:
        over["scene"]["trajectory"] = args.trajectory
    cfg = _config(args, over)
    out = args.out or cfg.paths.get("out")
    if not out:
        raise UsageError("--out is required")
    generate(cfg.scene, out)
    _provenance(out, "generate", cfg.scene.seed, cfg.digest(), argv)
    print(f"dataset written to {out}")


def cmd_train(args, argv):
    from .io import write_json
    from .scene import save_scene
    from .synth import Dataset
    from .trainer import Trainer

    over = {"train": {}, "paths": {}}
    if args.seed is not None:
        over["train"]["seed"] = args.seed
    if args.deterministic:
        over["train"]["deterministic"] = True
    if args.stage_iters is not None:
        over["train"]["stage_iters"] = args.stage_iters
    if args.beta is not None:
        over["train"]["beta_occ"] = args.beta
    if args.no_ivw:
        over["train"]["ivw"] = False
    if args.no_bootstrap:
        over["train"]["bootstrap"] = False
    if args.dataset:
        over["paths"]["dataset"] = args.dataset
    if args.out:
        over["paths"]["out"] = args.out
    cfg = _config(args, over)
    if "dataset" not in cfg.paths or "out" not in cfg.paths:
        raise UsageError("--dataset and --out are required (flag or [paths] in the config file)")
    _deterministic(cfg.train.deterministic)
    out = Path(cfg.paths["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    metrics.write_text("")
    _provenance(out, "train", cfg.train.seed, cfg.digest(), argv)
    write_json(out / "config.json", cfg.to_dict())
    trainer = Trainer(Dataset(cfg.paths["dataset"]), cfg.train, metrics)
    scene = trainer.fit()
    save_scene(scene, out / "scene.json")
    print(f"trained field ({len(scene.field)} primitives) written to {out / 'scene.json'}")


def _load_pair(args, allow_eval=False):
    from .scene import load_scene
    from .synth import Dataset

    return load_scene(args.scene), Dataset(args.dataset, allow_eval=allow_eval)


def cmd_render(args, argv):
    from .io import write_depth, write_ppm
    from .rasterizer import render

    scene, ds = _load_pair(args, allow_eval=args.views in ("eval", "all"))
    views = {"train": ds.train_views, "eval": ds.eval_views,
             "all": lambda: ds.train_views() + ds.eval_views()}[args.views]()
    train = ds.train_views()
    if args.frames:
        views = [v for v in views if v.frame in set(args.frames)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in views:
        if args.shift:
            v = _lateral_shift(train, v, args.shift)
        res = render(scene, v, background=ds.background)
        stem = f"{v.name}_{v.frame:04d}"
        write_ppm(out / f"{stem}.ppm", res.image())
        d = res.depth_map()
        write_depth(out / f"{stem}.fxdm", d.depth, d.valid)
    _provenance(out, "render", None, _args_digest(args), argv)
    print(f"{len(views)} views rendered to {out}")


def cmd_warp(args, argv):
    from .io import write_depth, write_json, write_ppm
    from .ivw import build_warp_map, render_pseudo_gt
    from .rasterizer import render_color, render_depth

    scene, ds = _load_pair(args)
    train = ds.train_views()
    v_in = _find_view(train, args.camera, args.frame)
    v_out = _lateral_shift(train, v_in, args.shift)
    depth = ds.depth(v_in) if args.depth == "gt" else render_depth(scene, v_in)
    warp = build_warp_map(v_in, v_out, depth)
    pseudo = render_pseudo_gt(scene, warp, beta=args.beta, background=ds.background)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_depth(out / "d0.fxdm", np.nan_to_num(warp.d0), warp.usable)
    write_ppm(out / "pseudo_gt.ppm", pseudo.numpy())
    write_ppm(out / "mask.ppm", np.repeat(pseudo.mask[..., None], 3, -1).astype(np.float64))
    ref = render_color(scene, v_in, background=ds.background)
    from .metrics import psnr

    summary = {"camera": v_in.name, "frame": v_in.frame, "shift": args.shift, "beta": args.beta,
               "depth": args.depth, "usable": int(warp.usable.sum()), "masked": int(pseudo.mask.sum()),
               "psnr_vs_source": psnr(pseudo.numpy(), ref, pseudo.mask) if pseudo.mask.any() else None}
    write_json(out / "warp.json", summary)
    _provenance(out, "warp", None, _args_digest(args), argv)
    print(json.dumps(summary))


def cmd_bootstrap(args, argv):
    from .bootstrap import BootstrapConfig, bootstrap_view
    from .io import write_depth, write_json
    from .rasterizer import render_depth
    from .scene import SceneGraph

    scene, ds = _load_pair(args)
    train = ds.train_views()
    view = _find_view(train, args.camera, args.frame)
    sensor = ds.sensor_scene()
    lidar_scene = SceneGraph(scene.field, scene.objects or sensor.objects, train, sensor.lidar, {}, scene.t_ref)
    rendered = render_depth(scene, view)
    bcfg = BootstrapConfig(n_frames=args.frames, dev_threshold=None if args.dev_threshold < 0 else args.dev_threshold,
                           d_max=args.d_max)
    target, rect, sparse = bootstrap_view(lidar_scene, view, rendered, bcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sparse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "v", "d", "tau"])
        for u, v, d, tau in sparse.to_rows():
            w.writerow([int(u), int(v), f"{d:.6f}", f"{tau:.6f}"])
    if rect is None:
        write_json(out / "rectifier.json", {"a": None, "b": None, "n_samples": len(sparse), "degenerate": True})
        _provenance(out, "bootstrap", None, _args_digest(args), argv)
        raise RuntimeError(f"degenerate fit for {view.name}/{view.frame} ({len(sparse)} samples)")
    write_json(out / "rectifier.json", rect.to_dict())
    write_depth(out / "rectified.fxdm", np.nan_to_num(target.depth), target.valid)
    _provenance(out, "bootstrap", None, _args_digest(args), argv)
    print(json.dumps(rect.to_dict()))


def cmd_eval(args, argv):
    from .io import write_json
    from .metrics import FeatureStats, fid, image_features
    from .rasterizer import render_color
    from .trainer import evaluate

    scene, ds = _load_pair(args, allow_eval=True)
    views = ds.eval_views() if args.views == "eval" else ds.train_views()
    images = [ds.image(v) for v in views]
    report = evaluate(scene, views, images, ds.background)
    renders = [render_color(scene, v, background=ds.background) for v in views]
    if len(views) >= 2:
        report["fid"] = fid(FeatureStats.from_features(image_features(images)),
                            FeatureStats.from_features(image_features(renders)))
    else:
        report["fid"] = None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    _provenance(out.parent, "eval", None, _args_digest(args), argv)
    print(json.dumps({k: report[k] for k in ("psnr", "ssim", "fid")}))


def cmd_fid_demo(args, argv):
    from .io import write_json
    from .metrics import fid_mean_shift_demo, image_features
    from .rasterizer import render_color

    from .synth import Dataset

    ds = Dataset(args.dataset, allow_eval=True)
    gt = ds.gt_scene()
    train = ds.train_views()
    # contiguous halves: interleaved frames are near duplicates and would understate the GT/GT distance
    half = (max(v.frame for v in train) + 1) // 2
    split_a = [v for v in train if v.frame < half]
    split_b = [v for v in train if v.frame >= half]
    if len(split_a) < 2 or len(split_b) < 2:
        raise RuntimeError("fid-demo needs at least four frames")
    feats_a = image_features([ds.image(v) for v in split_a])
    feats_b = image_features([ds.image(v) for v in split_b])
    shifted = [render_color(gt, _lateral_shift(train, v, args.shift), background=ds.background) for v in split_a]
    report = fid_mean_shift_demo(feats_a, feats_b, image_features(shifted)).to_dict()
    report["shift"] = args.shift
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out, report)
    _provenance(out.parent, "fid-demo", None, _args_digest(args), argv)
    print(json.dumps(report))


def _args_digest(args) -> str:
    import hashlib

    d = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "threads")}
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- parser ------------------------------------------------------------------------


class _DefaultsFormatter(argparse.HelpFormatter):
    """Appends ``(default: x)`` only when an option has a real default."""

    def _get_help_string(self, action):
        h = action.help or ""
        d = action.default
        if not (d is None or d is False or d is argparse.SUPPRESS) and "default" not in h:
            h += " (default: %(default)s)"
        return h


def build_parser() -> Parser:
    p = Parser(prog="fxd", description="Synthetic driving scenes, Gaussian field training and diagnostics.")
    p.add_argument("--version", action="version", version=f"fxd {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $FXD_THREADS, else logical cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    fmt = _DefaultsFormatter

    g = sub.add_parser("generate", help="write a synthetic dataset", formatter_class=fmt)
    g.add_argument("--config", help="TOML or JSON config ([scene], [lidar] sections)")
    g.add_argument("--seed", type=int, help="scene seed (default: scene.seed)")
    g.add_argument("--out", help="output directory")
    g.add_argument("--preset", choices=("street", "occlusion"), help="scene layout (default: scene.preset)")
    g.add_argument("--trajectory", choices=("straight", "arc"), help="ego path shape (default: scene.trajectory)")
    g.add_argument("--frames", type=int, help="number of frames (default: scene.n_frames)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a Gaussian field to a dataset",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config defaults (section.key = value):\n" + cfgmod.defaults_text())
    t.add_argument("--config", help="TOML or JSON config file")
    t.add_argument("--dataset", help="dataset directory")
    t.add_argument("--out", help="output directory (scene.json, metrics.jsonl, config.json)")
    t.add_argument("--seed", type=int, help="training seed (default 0)")
    t.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    t.add_argument("--stage-iters", type=_stage_iters, help="iterations per stage, a,b,c (default 500,1500,1000)")
    t.add_argument("--beta", type=float, help="occlusion band for ray-limited blending (default 0.95)")
    t.add_argument("--no-ivw", action="store_true", help="disable out-of-path supervision")
    t.add_argument("--no-bootstrap", action="store_true", help="disable depth bootstrapping")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a trained field at dataset views", formatter_class=fmt)
    r.add_argument("--scene", required=True, help="trained scene.json")
    r.add_argument("--dataset", required=True, help="dataset directory")
    r.add_argument("--out", required=True, help="directory for PPM images and FXDM depth maps")
    r.add_argument("--views", choices=("train", "eval", "all"), default="train", help="which dataset views")
    r.add_argument("--frames", type=int, nargs="*", help="restrict to these frames")
    r.add_argument("--shift", type=float, default=0.0, help="lateral offset in meters (left positive)")
    r.set_defaults(func=cmd_render)

    w = sub.add_parser("warp", help="dump warp diagnostics and the out-of-path pseudo ground truth",
                       formatter_class=fmt)
    w.add_argument("--scene", required=True, help="trained scene.json")
    w.add_argument("--dataset", required=True, help="dataset directory")
    w.add_argument("--out", required=True, help="output directory")
    w.add_argument("--camera", default="front", help="source camera name")
    w.add_argument("--frame", type=int, default=0, help="source frame index")
    w.add_argument("--shift", type=float, default=1.0, help="lateral offset in meters")
    w.add_argument("--beta", type=float, default=0.95, help="occlusion band")
    w.add_argument("--depth", choices=("rendered", "gt"), default="rendered", help="depth used to lift pixels")
    w.set_defaults(func=cmd_warp)

    b = sub.add_parser("bootstrap", help="one depth-bootstrap step for a single view", formatter_class=fmt)
    b.add_argument("--scene", required=True, help="trained scene.json")
    b.add_argument("--dataset", required=True, help="dataset directory")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--camera", default="front", help="camera name")
    b.add_argument("--frame", type=int, default=0, help="first frame of the window")
    b.add_argument("--frames", type=int, default=30, help="LiDAR accumulation window")
    b.add_argument("--dev-threshold", type=float, default=0.05, help="negative disables the deviation rule")
    b.add_argument("--d-max", type=float, default=40.0, help="near/far split in meters")
    b.set_defaults(func=cmd_bootstrap)

    e = sub.add_parser("eval", help="PSNR / SSIM / FID report for a trained field", formatter_class=fmt)
    e.add_argument("--scene", required=True, help="trained scene.json")
    e.add_argument("--dataset", required=True, help="dataset directory")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--views", choices=("eval", "train"), default="eval", help="which views to score")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fid-demo", help="FID mean-shift demonstration on ground-truth renders",
                       formatter_class=fmt)
    f.add_argument("--dataset", required=True, help="dataset directory")
    f.add_argument("--shift", type=float, default=1.0, help="lateral offset in meters")
    f.add_argument("--out", default="fid_demo/report.json", help="report JSON path")
    f.set_defaults(func=cmd_fid_demo)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads(args)
        args.func(args, argv)
    except (UsageError, cfgmod.ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fxd: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime error", exc_info=True)
        print(f"fxd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
