"""Command line interface: ``mffunet {synth,preprocess,train,evaluate,predict,gradcheck}``.

Exit codes: 0 success, 1 invalid arguments or failed checks, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint
from .model import ConfigError, ModelConfig, build_model
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    return parse


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        slices = data.synth_dataset(args.n, args.size, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    n = data.write_dataset(out, slices)
    print(f"wrote {n} image/mask pairs to {out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    if not 0.0 <= args.min_foreground <= 1.0:
        raise UsageError("--min-foreground must be in [0, 1]")
    raws = data.load_raw_dataset(args.input, num_classes=256)
    kept = data.filter_informative(raws, args.min_foreground)
    processed = []
    for r in kept:
        r = data.preprocess_slice(r, args.size)
        # normalize then re-quantize for 8-bit storage
        processed.append(data.RawSlice(data.quantize(data.normalize(r.image)), r.mask, r.source))
    data.write_dataset(args.output, processed)
    print(f"retained {len(kept)} dropped {len(raws) - len(kept)}")
    return EXIT_OK


def _load_for_model(root, config: ModelConfig):
    samples = data.load_dataset(root, config.num_classes)
    if not samples:
        raise data.DatasetError(f"{root}: no image/mask pairs found")
    expected = (config.in_channels, config.input_size, config.input_size)
    for s in samples:
        if s.image.shape != expected:
            raise data.DatasetError(f"{s.source}: image shape {s.image.shape[1:]} does not match "
                                    f"model input {expected[1:]}")
    return samples


def cmd_train(args) -> int:
    from .trainer import TrainConfig, split_dataset, train

    try:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                          patience=args.patience, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    samples = data.load_dataset(args.data, args.classes)
    if not samples:
        raise data.DatasetError(f"{args.data}: no image/mask pairs found")
    size = samples[0].image.shape[-1]
    if any(s.image.shape != (1, size, size) for s in samples):
        raise data.DatasetError("all images must be square and share one size; run preprocess first")
    try:
        config = ModelConfig(base_width=args.base_width, num_classes=args.classes, input_size=size, seed=args.seed)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    train_set, val_set, test_set = split_dataset(samples, cfg.ratios, cfg.seed)
    if not train_set or not val_set:
        raise UsageError(f"{len(samples)} samples are too few for a 60/20/20 split")
    model = build_model(config)
    history, best = train(model, train_set, val_set, cfg)
    Path(args.checkpoint).write_bytes(best)
    Path(args.history).write_text(history.to_csv())
    print(f"epochs run: {history.epochs_run} ({history.stop_reason})")
    print(f"final train DSC: {history.train_dsc[-1]:.6f}")
    print(f"best validation DSC: {history.val_dsc[history.best_epoch]:.6f} (epoch {history.best_epoch + 1})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import evaluate_dataset

    model = load_checkpoint(args.checkpoint)
    samples = _load_for_model(args.data, model.config)
    report = evaluate_dataset(model, samples, batch_size=2, split=args.split)
    text = report.to_text()
    Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .metrics import binarize

    model = load_checkpoint(args.checkpoint)
    raw = data.read_gray(args.image)
    size = model.config.input_size
    if raw.shape != (size, size):
        raw = data.resize_nearest(raw, size, size)
    x = data.normalize(raw)[None, None]
    with no_grad():
        probs = model.forward(Tensor(x), mode="eval")
    mask = binarize(probs)[0].astype(np.uint8)
    data.write_gray(args.out, mask)
    print(f"wrote {mask.shape[0]}x{mask.shape[1]} mask to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECK_NAMES, DEFAULT_TOL, run_suite

    names = None if args.ops == "all" else args.ops.split(",")
    if names is not None:
        unknown = [n for n in names if n not in CHECK_NAMES]
        if unknown:
            raise UsageError(f"unknown ops {unknown}; choose from all, {', '.join(CHECK_NAMES)}")
    results = run_suite(names, seed=args.seed)
    failed = 0
    print(f"{'op':<20} {'max_rel_error':>14}  status")
    for name, err in results:
        ok = err < DEFAULT_TOL
        failed += not ok
        print(f"{name:<20} {err:>14.3e}  {'PASS' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {DEFAULT_TOL:g})")
    return EXIT_OK if failed == 0 else EXIT_USAGE


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="mffunet", description="MFF-CCA U-Net segmentation toolkit", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=_positive(int), default=8, help="number of slices")
    p.add_argument("--size", type=_positive(int), default=64, help="image side length (power of two >= 16)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter black slices, resize and normalize", formatter_class=fmt)
    p.add_argument("--input", required=True, help="input dataset directory")
    p.add_argument("--output", required=True, help="output dataset directory")
    p.add_argument("--size", type=_positive(int), default=256, help="target side length")
    p.add_argument("--min-foreground", type=float, default=data.DEFAULT_MIN_FOREGROUND,
                   help="minimum fraction of nonzero pixels to keep a slice")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train with dice loss and early stopping", formatter_class=fmt)
    p.add_argument("--data", required=True, help="preprocessed dataset directory")
    p.add_argument("--epochs", type=int, default=50, help="maximum number of epochs")
    p.add_argument("--batch-size", type=int, default=2, help="samples per optimizer step")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--base-width", type=int, default=32, help="channels of the first encoder")
    p.add_argument("--classes", type=int, default=3, help="number of classes including background")
    p.add_argument("--patience", type=int, default=5, help="early stopping patience in epochs")
    p.add_argument("--seed", type=int, default=0, help="seed for weights, split and shuffling")
    p.add_argument("--checkpoint", required=True, help="where to write the best checkpoint")
    p.add_argument("--history", required=True, help="where to write the per-epoch CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute DSC / Jaccard over a dataset", formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--report", required=True, help="where to write the metrics report")
    p.add_argument("--split", default="test", help="split name used as the report key prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one image", formatter_class=fmt)
    p.add_argument("--image", required=True, help="input grayscale image")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--out", required=True, help="output mask PNG (pixel value = class id)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator", formatter_class=fmt)
    p.add_argument("--ops", default="all", help="'all' or comma-separated check names")
    p.add_argument("--seed", type=int, default=0, help="seed for the random test inputs")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from .trainer import TrainingDiverged

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, data.DatasetError, TrainingDiverged, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
