"""Command-line entry point: ``ccnn <subcommand> ...``. Machine output is JSON on stdout."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data, density, model, report
from .bench import bench_forward, thread_limit
from .train import TrainConfig, evaluate, train


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_synth(args) -> int:
    spec_dict = json.loads(Path(args.spec).read_text()) if args.spec else {}
    spec = data.SyntheticSceneSpec.from_dict(spec_dict)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(args.count * args.test_fraction))
    n_val = int(round(args.count * args.val_fraction))
    n_train = args.count - n_test - n_val
    entries = []
    for i, scene in enumerate(data.synthetic_set(spec, args.count)):
        ann = data.save_scene(scene, out)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        entries.append((ann.name, split))
    manifest = out / "manifest.json"
    data.write_manifest(manifest, entries)
    _print({"manifest": str(manifest), "scenes": args.count, "train": n_train, "val": n_val, "test": n_test})
    return 0


def cmd_gen_gt(args) -> int:
    spec = density.KernelSpec(mode=args.mode, sigma_fixed=args.sigma, beta=args.beta, k_neighbors=args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ann_path, split in data.read_manifest(args.manifest):
        scene = data.load_scene(ann_path, multiple=args.scale)
        dm = density.downsample_preserving_count(density.render_density(scene.annotations, spec), args.scale)
        path = out / f"{scene.id}.cdm"
        density.write_cdm(dm, path)
        _print({"id": scene.id, "split": split, "count": scene.count, "density_sum": dm.count,
                "path": str(path)})
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else TrainConfig()
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    if cfg.log_path is None:
        cfg.log_path = str(ckpt.with_suffix(".log.jsonl"))
        Path(cfg.log_path).unlink(missing_ok=True)
    channels = cfg.model.input_channels
    train_scenes = data.load_split(args.manifest, "train", channels)
    val_scenes = data.load_split(args.manifest, "val", channels)
    result = train(train_scenes, val_scenes, cfg, checkpoint_path=ckpt)
    model.save_checkpoint(result.params, ckpt)
    fig = report.loss_figure(result.history, ckpt.with_suffix(".loss.png"))
    summary = {"checkpoint": str(ckpt), "steps": result.steps, "epoch_losses": result.epoch_losses,
               "log": cfg.log_path, "figure": str(fig)}
    if val_scenes:
        summary["val"] = evaluate(result.params, val_scenes).record("val")
    _print(summary)
    return 0


def cmd_eval(args) -> int:
    params = model.load_checkpoint(args.ckpt)
    scenes = data.load_split(args.manifest, args.split, params.config.input_channels)
    if not scenes:
        raise ValueError(f"manifest {args.manifest} has no scenes in split {args.split!r}")
    m = evaluate(params, scenes)
    _print({**m.record(args.split), "per_scene": [list(r) for r in m.per_scene]})
    return 0


def cmd_bench(args) -> int:
    params = model.load_checkpoint(args.ckpt) if args.ckpt else model.build()
    rep = bench_forward(params, (args.height, args.width), args.warmup, args.runs, args.threads)
    out = rep.to_dict()
    if args.figure:
        out["figure"] = str(report.latency_figure(rep.latencies, args.figure,
                                                  f"{args.height}x{args.width}, {rep.fps:.2f} fps"))
    _print(out)
    return 0


def cmd_variant(args) -> int:
    print(model.ablation_variant(args.which).to_json())
    return 0


def cmd_render(args) -> int:
    params = model.load_checkpoint(args.ckpt)
    f = params.config.downsampling
    pixels, maxval = data.read_pnm(args.image)
    img = data.image_to_tensor(pixels, maxval, params.config.input_channels)
    h, w = img.shape[1:]
    top, left = (h % f) // 2, (w % f) // 2
    img = img[:, top : top + h - h % f, left : left + w - w % f]
    with thread_limit(1):
        pred = model.forward(params, img[None])[0, 0]
    dm = density.DensityMap(pred, scale=f)
    density.write_cdm(dm, args.out)
    fig = report.density_figure(img.mean(axis=0), pred, Path(args.out).with_suffix(".png"),
                                title=Path(args.image).name)
    _print({"path": args.out, "count": dm.count, "scale": f, "shape": list(pred.shape), "figure": str(fig)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccnn", description="Compact crowd-counting CNN toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic crowd scenes and a manifest")
    s.add_argument("--spec", help="synthetic scene spec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gen-gt", help="render CDM1 ground-truth density files")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", choices=("fixed", "adaptive"), default="fixed")
    s.add_argument("--sigma", type=float, default=15.0)
    s.add_argument("--beta", type=float, default=0.3)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--scale", type=int, choices=(1, 2, 4, 8), default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_gt)

    s = sub.add_parser("train", help="train a model on the manifest's train split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config", help="training or model config JSON")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="MAE/MSE of a checkpoint on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", choices=data.SPLITS, default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="forward-pass FPS benchmark")
    s.add_argument("--ckpt", help="checkpoint (a freshly built default model if omitted)")
    s.add_argument("--height", type=int, default=768)
    s.add_argument("--width", type=int, default=1024)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--runs", type=int, default=50)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--figure", help="also write a latency histogram PNG here")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("variant", help="print an ablation model config")
    s.add_argument("--which", choices=model.ABLATIONS, required=True)
    s.set_defaults(func=cmd_variant)

    s = sub.add_parser("render", help="predict a density raster for one PGM/PPM image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"ccnn {args.command}: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
