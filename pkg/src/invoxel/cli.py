"""``invoxel`` command line: train, render, eval, export-cloud, make-toy.

Exit status is 0 on success, 1 when a run fails or an input is rejected and
2 for usage errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("invoxel")


def _add_config(p):
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int, help="number of training views to use")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="invoxel", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a model and write checkpoints + losses.csv")
    _add_config(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--out", default="run")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-cvt", action="store_true", help="drop the in-voxel transformer")
    p.add_argument("--no-contrast", action="store_true", help="drop the contrastive term")
    p.add_argument("--no-voxel-sampling", action="store_true",
                   help="plain random ray batches (implies --no-cvt)")

    p = sub.add_parser("render", help="render the held-out views of a checkpoint to PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="renders")
    p.add_argument("--config", help="override the dataset location stored in the checkpoint")

    p = sub.add_parser("eval", help="PSNR/SSIM of held-out views as a JSON report")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="render this checkpoint and score it")
    src.add_argument("--pred", help="directory of <view>.png predictions")
    _add_config(p)
    p.add_argument("--out", default="metrics.json")

    p = sub.add_parser("export-cloud", help="write weighted fine samples as ASCII PLY")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="cloud.ply")
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--config", help="override the dataset location stored in the checkpoint")

    p = sub.add_parser("make-toy", help="render the procedural toy scene to a dataset directory")
    _add_config(p)
    p.add_argument("--out", default="toy")
    return ap


def _load_config(args):
    from .trainer import TrainConfig
    cfg = TrainConfig.from_json_file(args.config) if getattr(args, "config", None) else TrainConfig()
    kw = {}
    if getattr(args, "seed", None) is not None:
        kw["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        kw["iters"] = args.iters
    if getattr(args, "views", None) is not None:
        kw["train_views"] = args.views
    if getattr(args, "no_voxel_sampling", False):
        kw.update(voxel_sampling_enabled=False, cvt_enabled=False, contrastive_enabled=False)
    if getattr(args, "no_cvt", False):
        kw.update(cvt_enabled=False, contrastive_enabled=False)
    if getattr(args, "no_contrast", False):
        kw["contrastive_enabled"] = False
    return cfg.replace(**kw) if kw else cfg


def _dataset_for(state, args):
    from .trainer import TrainConfig, load_training_dataset
    cfg = state.cfg
    if getattr(args, "config", None):
        other = TrainConfig.from_json_file(args.config)
        cfg = cfg.replace(data=other.data, toy=other.toy, train_views=other.train_views)
    return load_training_dataset(cfg)


def cmd_train(args) -> int:
    from . import trainer as T
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state = T.load_checkpoint(args.resume)
        if args.iters is not None:
            state.cfg = state.cfg.replace(iters=args.iters)
        cfg = state.cfg
    (out / "config.json").write_text(cfg.to_json() + "\n")
    t0 = time.time()
    state, rows = T.train(cfg, out, state=state)
    log.info("trained to iteration %d in %.1fs", state.iteration, time.time() - t0)
    print(f"iterations {state.iteration}  final loss {rows[-1]['total'] if rows else float('nan'):.6f}"
          f"  -> {out}")
    return 0


def cmd_render(args) -> int:
    from .scenedata import save_png
    from .trainer import load_checkpoint, render_view
    state = load_checkpoint(args.ckpt)
    ds = _dataset_for(state, args)
    out = Path(args.out)
    for i in ds.indices("test"):
        save_png(out / f"{ds.names[i]}.png", np.clip(render_view(state, ds, i), 0, 1))
    print(f"rendered {len(ds.indices('test'))} views -> {out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import MetricsReport
    from .scenedata import _read_png
    from .trainer import load_checkpoint, load_training_dataset, render_view
    t0 = time.time()
    if args.ckpt:
        state = load_checkpoint(args.ckpt)
        ds = _dataset_for(state, args)
        pairs = {ds.names[i]: (np.clip(render_view(state, ds, i), 0, 1), ds.images[i])
                 for i in ds.indices("test")}
        meta = dict(config_digest=state.cfg.digest().hex(), iteration=state.iteration)
    else:
        cfg = _load_config(args)
        ds = load_training_dataset(cfg)
        pred = Path(args.pred)
        pairs = {}
        for i in ds.indices("test"):
            f = pred / f"{ds.names[i]}.png"
            if not f.is_file():
                raise FileNotFoundError(f"{f}: no prediction for view {ds.names[i]}")
            pairs[ds.names[i]] = (_read_png(f, ds.white_background), ds.images[i])
        meta = dict(config_digest=cfg.digest().hex(), iteration=0)
    report = MetricsReport.build(pairs, seconds=time.time() - t0, **meta)
    Path(args.out).write_text(report.to_json() + "\n")
    print(f"mean PSNR {report.mean_psnr:.3f} dB  mean SSIM {report.mean_ssim:.4f}  -> {args.out}")
    return 0


def cmd_export_cloud(args) -> int:
    from .pointcloud import export_field_pointcloud
    from .scenedata import camera_rays
    from .trainer import load_checkpoint
    state = load_checkpoint(args.ckpt)
    ds = _dataset_for(state, args)
    H, W = ds.hw
    o, d = zip(*(camera_rays(H, W, ds.focal, ds.poses[i]) for i in ds.indices("test")))
    n = export_field_pointcloud(state, (np.concatenate(o), np.concatenate(d), ds.near, ds.far),
                                args.out, args.threshold)
    print(f"wrote {n} vertices -> {args.out}")
    return 0


def cmd_make_toy(args) -> int:
    from .scenedata import write_dataset
    from .trainer import load_training_dataset
    cfg = _load_config(args).replace(data=None)
    if args.seed is not None:
        cfg = cfg.replace(toy={**cfg.toy, "seed": args.seed})
    ds = load_training_dataset(cfg)
    write_dataset(ds, args.out)
    print(f"toy scene: {len(ds.indices('train'))} train / {len(ds.indices('test'))} test views"
          f" -> {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "export-cloud": cmd_export_cloud, "make-toy": cmd_make_toy}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"invoxel {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
