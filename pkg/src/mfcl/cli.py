"""Command-line entry point: prepare, train, infer, eval, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, FLAGS, TrainConfig, load_config
from .imaging import PPMError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mfcl", description="Structure/texture dual-branch image inpainting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("prepare", help="resize images, compute structure targets, generate masks")
    sp.add_argument("--in", dest="src", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--masks-per-bucket", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="train generator and critics")
    sp.add_argument("--config", required=True, type=Path)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--resume", type=Path)
    for flag in FLAGS:
        sp.add_argument(f"--no-{flag}", action="store_true", help=f"disable {flag}")

    sp = sub.add_parser("infer", help="inpaint one image")
    sp.add_argument("--ckpt", required=True, type=Path)
    sp.add_argument("--image", required=True, type=Path)
    sp.add_argument("--mask", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)

    sp = sub.add_parser("eval", help="PSNR/SSIM/MAE over a dataset for one hole-ratio bucket")
    sp.add_argument("--ckpt", required=True, type=Path)
    sp.add_argument("--data", required=True, type=Path)
    sp.add_argument("--bucket", required=True)
    sp.add_argument("--out", type=Path, help="where to write metrics.csv and the figure "
                                             "(default: eval_<bucket> next to the checkpoint)")

    sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    return p


def cmd_prepare(args) -> int:
    from .imaging import prepare_dataset
    from .training import DataError

    if args.size < 16 or args.size % 8:
        raise UsageError(f"--size must be a multiple of 8 and >= 16, got {args.size}")
    if not args.src.is_dir():
        raise FileNotFoundError(f"input directory {args.src} does not exist")
    try:
        manifest = prepare_dataset(args.src, args.out, args.size, args.masks_per_bucket, args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"prepared {len(manifest['images'])} images at {args.size}x{args.size} in {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    cfg: TrainConfig = load_config(args.config)
    cfg = cfg.with_ablations([f for f in FLAGS if getattr(args, f"no_{f}")])

    def progress(row):
        if row["step"] % cfg.log_every == 0 or row["step"] == cfg.steps:
            print(f"step {row['step']:6d}  L_total {row['L_total']:.5f}  D_loss {row['D_loss']:.5f}", flush=True)

    result = train(cfg, args.data, args.out, resume=args.resume, progress=progress)
    for c in result.checkpoints:
        print(f"checkpoint {c}")
    if result.plot_path:
        print(f"loss curve {result.plot_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .training import infer

    for name, path in infer(args.ckpt, args.image, args.mask, args.out).items():
        print(f"{name} {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .imaging import parse_bucket
    from .metrics import FEAT_DIST_NOTE
    from .plotting import plot_eval
    from .training import eval_csv_rows, evaluate

    try:
        parse_bucket(args.bucket)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = evaluate(args.ckpt, args.data, args.bucket)
    rows = eval_csv_rows(result)
    out = args.out or args.ckpt.parent / f"eval_{args.bucket}"
    out.mkdir(parents=True, exist_ok=True)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerows(rows)
    with open(out / "metrics.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    fig = plot_eval(result.examples, out / "examples.png", f"bucket {args.bucket}")
    if result.composited.feat_dist is not None:
        print(f"feat_dist {result.composited.feat_dist:.6f}  WARNING: {FEAT_DIST_NOTE}", file=sys.stderr)
    print(f"wrote {out / 'metrics.csv'}" + (f" and {fig}" if fig else ""), file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    reports, seconds = run_suite(on_report=lambda r: print(r.line(), flush=True))
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed in {seconds:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .training import CheckpointMismatch, DataError, NumericFailure

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointMismatch) as exc:
        print(f"mfcl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFailure as exc:
        print(f"mfcl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PPMError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"mfcl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
