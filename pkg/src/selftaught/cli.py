"""Command-line entry point: ``selftaught {phantom,train,selftrain,refine,eval}``.

Exit status is 0 on success, 1 on a runtime failure (bad data, missing files) and 2
on a usage error (bad arguments, bad config, infeasible schedule).
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as config_mod
from .curriculum import SamplePool, baseline_labeled_only, baseline_random_loop, self_taught_loop
from .densecrf import refine
from .imagecore import ImageFormatError, load_image, load_mask, read_bytes, resize, resize_mask, save_mask
from .manifest import ManifestError, read_manifest, resolve
from .metrics import evaluate, write_jsonl, write_report
from .phantom import generate_dataset
from .student import CheckpointError, is_checkpoint, load_checkpoint, predict, save_checkpoint

logger = logging.getLogger("selftaught")

REPORT_NAME = "reports.csv"
JSONL_NAME = "reports.jsonl"
CHECKPOINT_NAME = "student.ckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _counts(text):
    try:
        counts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("counts must be four integers a,b,c,d") from None
    if len(counts) != 4 or min(counts) < 0:
        raise argparse.ArgumentTypeError("counts must be four non-negative integers a,b,c,d")
    return counts


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _run_config(path):
    if path is None:
        return config_mod.RunConfig()
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        return config_mod.load_config(path)
    except config_mod.ConfigError as exc:
        raise UsageError(f"bad config: {exc}") from exc


def load_pool(manifest_path, size, with_pool_truth=True):
    """Read a manifest into a :class:`SamplePool`, resizing everything to ``size``."""
    rows = read_manifest(manifest_path)
    pool = SamplePool()

    def image(row):
        return resize(load_image(resolve(manifest_path, row.image_path)), size, size)

    def mask(row):
        return resize_mask(load_mask(resolve(manifest_path, row.mask_path)), size, size)

    for row in rows:
        if row.split == "pool":
            pool.unlabeled.append((row.id, image(row)))
            if with_pool_truth and row.mask_path != "-":
                pool.pool_truth[row.id] = mask(row)
            continue
        target = {"train": pool.labeled, "val": pool.validation, "test": pool.test}[row.split]
        target.append((row.id, image(row), mask(row)))
    return pool


def cmd_phantom(args):
    cfg = _run_config(args.config)
    path = generate_dataset(cfg.phantom, args.seed, args.out, counts=args.counts)
    print(path)
    return 0


def _with_seed(cfg, seed):
    return replace(cfg, train=replace(cfg.train, seed=seed)) if seed is not None else cfg


def cmd_train(args):
    cfg = _with_seed(_run_config(args.config), args.seed)
    loop = cfg.curriculum_config()
    rows = read_manifest(args.manifest)
    if args.use_pool_labels:
        missing = [r.id for r in rows if r.split == "pool" and r.mask_path == "-"]
        if missing:
            raise ManifestError(f"--use-pool-labels: pool samples without masks: {', '.join(missing[:5])}")
    pool = load_pool(args.manifest, cfg.arch.input_size)
    params, reports = baseline_labeled_only(pool, loop, use_full=args.use_pool_labels)
    save_checkpoint(params, cfg.arch, args.out)
    report_path = args.report or os.path.splitext(args.out)[0] + ".csv"
    write_report(reports, report_path)
    print(f"{reports[0].test_dsc:.6f}")
    return 0


def cmd_selftrain(args):
    cfg = _with_seed(_run_config(args.config), args.seed)
    settings = cfg.curriculum
    settings = replace(settings, n_per_iter=args.n if args.n is not None else settings.n_per_iter,
                       iterations=args.iters if args.iters is not None else settings.iterations)
    cfg = replace(cfg, curriculum=settings)
    loop = cfg.curriculum_config()
    rows = read_manifest(args.manifest)
    try:
        loop.check_feasible(sum(r.split == "pool" for r in rows))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    pool = load_pool(args.manifest, cfg.arch.input_size, with_pool_truth=False)
    if args.strategy == "top_dsc":
        params, reports = self_taught_loop(pool, loop)
    else:
        params, reports = baseline_random_loop(pool, loop, cfg.train.seed)
    os.makedirs(args.out, exist_ok=True)
    write_report(reports, os.path.join(args.out, REPORT_NAME))
    if args.jsonl:
        write_jsonl(reports, os.path.join(args.out, JSONL_NAME))
    save_checkpoint(params, cfg.arch, os.path.join(args.out, CHECKPOINT_NAME))
    for report in reports:
        print(f"{report.iteration}\t{report.strategy}\t{report.test_dsc:.6f}")
    return 0


def _probs_from_file(path, shape):
    fg = read_bytes(path).astype(np.float64) / 255.0
    if fg.shape != shape:
        raise ValueError(f"probability map {fg.shape} does not match image {shape}")
    return np.stack([1.0 - fg, fg], axis=-1)


def cmd_refine(args):
    cfg = _run_config(args.config)
    img = load_image(args.image)
    if is_checkpoint(args.probs):
        arch, params = load_checkpoint(args.probs)
        size = arch.input_size
        small = resize(img, size, size)
        probs, _ = predict(params, small, arch)
        mask, _ = refine(probs, small, cfg.crf)
        mask = resize_mask(mask, *img.shape)
    else:
        mask, _ = refine(_probs_from_file(args.probs, img.shape), img, cfg.crf)
    save_mask(mask, args.out)
    return 0


def cmd_eval(args):
    arch, params = load_checkpoint(args.ckpt)
    pool = load_pool(args.manifest, arch.input_size, with_pool_truth=False)
    print(f"{evaluate(params, pool.test_set(), arch):.6f}")
    return 0


def build_parser():
    parser = _Parser(prog="selftaught", description="Self-taught segmentation with a dense-CRF teacher.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--counts", type=_counts, default=(89, 20, 50, 50), help="train,val,test,pool")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="supervised baseline on the labeled split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--use-pool-labels", action="store_true", help="also train on the pool's true masks")
    p.add_argument("--report", help="report CSV path (default: checkpoint path with .csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("selftrain", help="curriculum self-training or its random baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--strategy", choices=("top_dsc", "unet_only"), default="top_dsc")
    p.add_argument("--n", type=_positive, help="pseudo-labels promoted per iteration")
    p.add_argument("--iters", type=_positive, help="number of iterations")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.add_argument("--jsonl", action="store_true", help="also write reports.jsonl")
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("refine", help="run the CRF teacher on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--probs", required=True, help="student checkpoint or 8-bit foreground map")
    p.add_argument("--out", required=True, help="output mask path")
    p.add_argument("--config")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="mean test Dice of a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"selftaught {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ManifestError, CheckpointError, ImageFormatError) as exc:
        print(f"selftaught {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
