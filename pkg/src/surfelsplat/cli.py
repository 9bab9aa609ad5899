"""argparse front end: train / render / eval / decompose / bench /
export-ply / gen-scene."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _add_common(p):
    p.add_argument("--seed", type=int, default=0,
                   help="seed for all randomness (default: 0)")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS thread count; 1 is fully deterministic (default: 1)")
    p.add_argument("--config", type=str, default=None,
                   help="JSON file overlaying training config; flags win (default: none)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="surfelsplat",
        description="Differentiable 2D-surfel splatting with hybrid latents.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a scene")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=str, help="dataset dir (transforms JSON)")
    src.add_argument("--toy", type=str,
                     choices=["textured_quad", "two_planes", "cube"],
                     help="procedural toy scene")
    p.add_argument("--out", type=str, default="runs/out",
                   help="output directory (default: runs/out)")
    p.add_argument("--preset", choices=["paper", "desk"], default="desk",
                   help="config preset (default: desk)")
    p.add_argument("--iters", type=int, default=None,
                   help="override total iterations (default: preset value)")
    p.add_argument("--cap", type=int, default=None,
                   help="override MCMC surfel cap (default: preset value)")
    p.add_argument("--kernel", choices=["beta", "gaussian"], default=None,
                   help="splat kernel after warm-up (default: preset value)")
    p.add_argument("--disable-beta", action="store_true",
                   help="force gaussian kernels throughout")
    p.add_argument("--disable-bce", action="store_true",
                   help="skip the BCE sparsification phase")
    p.add_argument("--resume", type=str, default=None,
                   help="checkpoint to resume from (default: none)")
    p.add_argument("--views", type=int, default=6,
                   help="toy-scene training views (default: 6)")
    p.add_argument("--res", type=int, default=64,
                   help="toy-scene image resolution (default: 64)")
    _add_common(p)

    for name in ("render", "decompose"):
        p = sub.add_parser(name, help="render views from a checkpoint"
                           if name == "render" else
                           "render with latent-stream masking (render alias)")
        p.add_argument("checkpoint", type=str)
        p.add_argument("--out", type=str, default="renders",
                       help="output directory (default: renders)")
        p.add_argument("--turntable", type=int, default=8,
                       help="number of orbit views (default: 8)")
        p.add_argument("--data", type=str, default=None,
                       help="render this dataset's cameras instead of an orbit (default: none)")
        p.add_argument("--mode", choices=["full", "surfel_only", "hash_only"],
                       default="hash_only" if name == "decompose" else "full",
                       help="latent-stream mask (default: %(default)s)")
        p.add_argument("--aux", action="store_true",
                       help="also write depth/normal/alpha PNGs")
        p.add_argument("--res", type=int, default=None,
                       help="orbit image resolution (default: 64)")
        _add_common(p)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset")
    p.add_argument("checkpoint", type=str)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=str, help="dataset dir")
    src.add_argument("--toy", type=str,
                     choices=["textured_quad", "two_planes", "cube"])
    p.add_argument("--split", choices=["train", "test"], default="test",
                   help="which split to score (default: test)")
    p.add_argument("--json-out", type=str, default=None,
                   help="write the report as JSON here (default: none)")
    p.add_argument("--views", type=int, default=6,
                   help="toy-scene training views (default: 6)")
    p.add_argument("--res", type=int, default=64,
                   help="toy-scene resolution (default: 64)")
    _add_common(p)

    p = sub.add_parser("bench", help="median render time for checkpoints")
    p.add_argument("checkpoints", nargs="+", type=str)
    p.add_argument("--res", type=int, default=64,
                   help="benchmark resolution (default: 64)")
    p.add_argument("--repeats", type=int, default=10,
                   help="timed repetitions per checkpoint (default: 10)")
    p.add_argument("--json-out", type=str, default=None,
                   help="write timings as JSON here (default: none)")
    _add_common(p)

    p = sub.add_parser("export-ply", help="write a checkpoint's surfels as PLY")
    p.add_argument("checkpoint", type=str)
    p.add_argument("out", type=str)
    p.add_argument("--ascii", action="store_true",
                   help="text PLY instead of binary")
    _add_common(p)

    p = sub.add_parser("gen-scene", help="write a procedural toy dataset")
    p.add_argument("--toy", type=str, default="textured_quad",
                   choices=["textured_quad", "two_planes", "cube"],
                   help="scene name (default: textured_quad)")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--views", type=int, default=6,
                   help="training views (default: 6)")
    p.add_argument("--test-views", type=int, default=2,
                   help="held-out views (default: 2)")
    p.add_argument("--res", type=int, default=64,
                   help="image resolution (default: 64)")
    _add_common(p)

    return ap


def _load_toy(name, views, res):
    from . import dataio
    return dataio.gen_toy_scene(name, n_views=views, res=res)


def _dataset_from_args(args, split="train"):
    from . import dataio
    if getattr(args, "data", None):
        return dataio.load_nerf_synthetic(args.data, split=split)
    scene = _load_toy(args.toy, args.views, args.res)
    return scene.train if split == "train" else scene.test


def _build_train_config(args):
    from .train import TrainConfig
    cfg = TrainConfig.desk_preset() if args.preset == "desk" \
        else TrainConfig.paper_preset()
    if args.config:
        overlay = json.loads(Path(args.config).read_text())
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overlay})
    if args.kernel == "beta" and args.disable_beta:
        raise SystemExit("config error: --kernel beta conflicts with --disable-beta")
    if args.iters is not None:
        cfg.total_iters = args.iters
        cfg.warmup_iters = args.iters // 3
        cfg.bce_start_iter = int(0.8 * args.iters)
    if args.cap is not None:
        cfg.mcmc_cap = args.cap
    if args.kernel is not None:
        cfg.kernel_mode = args.kernel
    if args.disable_beta:
        cfg.kernel_mode = "gaussian"
    if args.disable_bce:
        cfg.bce_start_iter = cfg.total_iters
        cfg.lambda_bce = 0.0
    cfg.seed = args.seed
    if not args.disable_bce:
        cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from . import dataio
    from .metrics import evaluate
    from .train import train

    cfg = _build_train_config(args)
    out = Path(args.out)
    if args.toy:
        scene = _load_toy(args.toy, args.views, args.res)
        train_ds, test_ds = scene.train, scene.test
    else:
        train_ds = dataio.load_nerf_synthetic(args.data, split="train")
        try:
            test_ds = dataio.load_nerf_synthetic(args.data, split="test")
        except FileNotFoundError:
            test_ds = None
    resume = dataio.load_checkpoint(args.resume) if args.resume else None

    ckpt, log = train(train_ds, cfg, out_dir=out, resume=resume)
    for split, ds in (("train", train_ds), ("test", test_ds)):
        if ds is None or len(ds) == 0:
            continue
        rep = evaluate(ckpt.cloud, ckpt.grid, ckpt.decoder, ds,
                       cfg.render_config("bce"))
        print(f"{split} PSNR {rep.mean_psnr:.3f}  SSIM {rep.mean_ssim:.4f}")
        (out / f"eval_{split}.json").write_text(rep.to_json())
    return 0


def _orbit_cameras(n, res):
    from .dataio import _ring_cameras
    return _ring_cameras(n, res, phase=0.5 / max(n, 1))


def cmd_render(args) -> int:
    import numpy as np
    from . import dataio
    from .renderer import render_decomposed

    ckpt = dataio.load_checkpoint(args.checkpoint)
    from .train import TrainConfig
    cfg = TrainConfig.from_dict(ckpt.config)
    rcfg = cfg.render_config("bce")
    if args.data:
        ds = dataio.load_nerf_synthetic(args.data, split="test")
        cameras = ds.cameras
    else:
        res = args.res or 64
        cameras = _orbit_cameras(args.turntable, res)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cameras):
        b = render_decomposed(ckpt.cloud, ckpt.grid, ckpt.decoder, cam, rcfg,
                              mode=args.mode)
        dataio.save_image(b.rgb, out / f"{args.mode}_{i:04d}.png")
        if args.aux:
            depth = b.depth / max(b.depth.max(), 1e-12)
            normal = 0.5 * (b.normal + 1.0)
            dataio.save_image(np.repeat(depth[..., None], 3, axis=2),
                              out / f"depth_{i:04d}.png")
            dataio.save_image(np.clip(normal, 0, 1), out / f"normal_{i:04d}.png")
            dataio.save_image(np.repeat(b.alpha[..., None], 3, axis=2),
                              out / f"alpha_{i:04d}.png")
    print(f"wrote {len(cameras)} view(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    from . import dataio
    from .metrics import evaluate
    from .train import TrainConfig

    ckpt = dataio.load_checkpoint(args.checkpoint)
    cfg = TrainConfig.from_dict(ckpt.config)
    ds = _dataset_from_args(args, split=args.split)
    if len(ds) == 0:
        print("error: no views in the requested split", file=sys.stderr)
        return 1
    rep = evaluate(ckpt.cloud, ckpt.grid, ckpt.decoder, ds,
                   cfg.render_config("bce"))
    print(rep.table())
    if args.json_out:
        Path(args.json_out).write_text(rep.to_json())
    return 0


def cmd_bench(args) -> int:
    from . import dataio
    from .metrics import bench_render
    from .train import TrainConfig

    cam = _orbit_cameras(1, args.res)[0]
    results = {}
    for path in args.checkpoints:
        ckpt = dataio.load_checkpoint(path)
        cfg = TrainConfig.from_dict(ckpt.config)
        r = bench_render(ckpt.cloud, ckpt.grid, ckpt.decoder, cam,
                         cfg.render_config("bce"), repeats=args.repeats)
        r["n_surfels"] = ckpt.cloud.count
        results[str(path)] = r
        print(f"{path}: median {r['median_ms']:.2f} ms "
              f"({ckpt.cloud.count} surfels)")
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(results, indent=2))
    return 0


def cmd_export_ply(args) -> int:
    from . import dataio
    ckpt = dataio.load_checkpoint(args.checkpoint)
    dataio.export_ply(ckpt.cloud, args.out, binary=not args.ascii)
    print(f"wrote {ckpt.cloud.count} surfels to {args.out}")
    return 0


def cmd_gen_scene(args) -> int:
    from . import dataio
    scene = dataio.gen_toy_scene(args.toy, n_views=args.views, res=args.res,
                                 n_test=args.test_views)
    out = Path(args.out)
    dataio.save_nerf_synthetic(scene.train, out, split="train")
    dataio.save_nerf_synthetic(scene.test, out, split="test")
    print(f"wrote {args.toy} ({len(scene.train)} train / "
          f"{len(scene.test)} test views) to {out}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "render": cmd_render,
    "decompose": cmd_render,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "export-ply": cmd_export_ply,
    "gen-scene": cmd_gen_scene,
}


def run(argv) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
