"""``hyperseg`` command-line interface."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import synthdata
from .bandselect import BandStrategy, select_bands
from .calibration import ReferencePair, calibrate
from .hypercube import HyperCube, load_cube, load_manifest, save_cube
from .models import DECODER_LABEL, PatchEmbedWeights, inflate_patch_embed, load_checkpoint
from .pipeline import (
    ExperimentSpec, evaluate, load_matrix_spec, run_experiment, run_matrix, with_seed, write_evaluation,
)
from .training import TrainConfig

log = logging.getLogger("hyperseg")


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",")) if text else ()


def cmd_calibrate(args) -> int:
    raw, white, dark = load_cube(args.raw), load_cube(args.white), load_cube(args.dark)
    cube, report = calibrate(raw, ReferencePair(white, dark), clip=not args.no_clip)
    if args.dtype == "f32":
        cube = HyperCube(cube.values.astype(np.float32), cube.grid, True)
    header = save_cube(cube, args.out)
    report_path = Path(args.report) if args.report else header.with_suffix(".report.json")
    report_path.write_text(report.to_json())
    log.info("wrote %s (%d invalid, %d clipped low, %d clipped high)", header,
             report.invalid_pixel_count, report.clipped_low, report.clipped_high)
    return 0


def cmd_synth(args) -> int:
    if args.config:
        config = synthdata.SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
        if args.seed is not None:
            config = replace(config, seed=args.seed)
    else:
        config = synthdata.PRESETS[args.preset](seed=args.seed or 0)
    manifest = synthdata.generate_dataset(config, args.out, args.train_scenes, args.test_scenes)
    log.info("wrote %s", manifest)
    return 0


def _experiment_from_args(args) -> ExperimentSpec:
    if args.spec:
        exp = ExperimentSpec.from_dict(json.loads(Path(args.spec).read_text()), Path(args.spec).parent)
        if args.out:
            exp = replace(exp, out_dir=args.out)
        if args.seed is not None:
            exp = with_seed(exp, args.seed)
        return exp
    if not (args.manifest and args.arch and args.out):
        raise ValueError("train needs either --spec or all of --manifest, --arch and --out")
    config = TrainConfig(
        epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay, seed=args.seed or 0,
        freeze_backbone_epochs=args.freeze_epochs, ignore_background=args.ignore_background,
        checkpoint_every=args.checkpoint_every, batch=args.batch,
    )
    return ExperimentSpec(args.id or args.arch, args.arch, args.bands, args.manifest, args.out, config,
                          _widths(args.widths), args.depth)


def cmd_train(args) -> int:
    exp = _experiment_from_args(args)
    row, _ = run_experiment(exp, args.include_background)
    log.info("%s: mIoU %s", exp.id, row[-1])
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    bands = BandStrategy.parse(args.bands or meta.get("bands", "all"))
    ev = evaluate(model, manifest, bands, args.split, args.include_background)
    n_bands = len(select_bands(manifest.grid, bands))
    path = write_evaluation(ev, args.out, meta.get("experiment", Path(args.checkpoint).stem), n_bands,
                            DECODER_LABEL[model.spec.arch])
    log.info("wrote %s (mIoU %.4f)", path, ev.report.miou)
    return 0


def cmd_matrix(args) -> int:
    experiments, options = load_matrix_spec(args.spec)
    if args.seed is not None:
        experiments = [with_seed(e, args.seed) for e in experiments]
    include_bg = args.include_background or bool(options.get("include_background", False))
    run_matrix(experiments, args.out, include_bg, args.jobs)
    log.info("wrote %s (%d experiments)", args.out, len(experiments))
    return 0


def cmd_inflate(args) -> int:
    rgb = PatchEmbedWeights.load(args.embed_in)
    out = inflate_patch_embed(rgb, args.channels)
    out.save(args.embed_out)
    log.info("wrote %s with %d input channels", args.embed_out, out.channels)
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bands", default="all", help="all | uniform:K | rgb:l1,l2,l3")
    p.add_argument("--arch", choices=sorted(DECODER_LABEL))
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--freeze-epochs", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--ignore-background", action="store_true")
    p.add_argument("--widths", default="", help="comma-separated channel widths")
    p.add_argument("--depth", type=int, default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hyperseg", description="Hyperspectral segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="raw intensities -> reflectance")
    p.add_argument("raw")
    p.add_argument("white")
    p.add_argument("dark")
    p.add_argument("out")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--report")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--preset", choices=sorted(synthdata.PRESETS), default="texture-twins")
    p.add_argument("--config", help="SynthConfig JSON (overrides --preset)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-scenes", type=int, default=8)
    p.add_argument("--test-scenes", type=int, default=2)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one experiment")
    p.add_argument("--spec", help="experiment JSON; other flags are ignored except --out and --seed")
    p.add_argument("--id")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--include-background", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--bands", help="defaults to the strategy stored in the checkpoint")
    p.add_argument("--include-background", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run a matrix of experiments into one CSV")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, help="override every experiment's seed")
    p.add_argument("--include-background", action="store_true")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("inflate", help="inflate an RGB patch embedding to more channels")
    p.add_argument("embed_in")
    p.add_argument("channels", type=int)
    p.add_argument("embed_out")
    p.set_defaults(func=cmd_inflate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("HYPERSEG_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError, KeyError, RuntimeError) as exc:
        print(f"hyperseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
