"""Command-line entry point.

Exit codes: 0 success, 2 usage/configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .augment import default_plan
from .config import ConfigError, ExperimentConfig
from .dataio import DatasetLoadError
from .model import (CheckpointError, GraphConfigError, build_graph, checkpoint_load, describe,
                    graph_from_checkpoint)
from .synth import cmd_synth

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flags shared by every config-driven command; None means "not given"
CONFIG_FLAGS = {
    "dataset": str, "variant": str, "backbone": str, "mode": str, "scale": str,
    "channel_widths": str, "group_depths": str, "tap_channels": int, "fuse_on": str, "alpha": str,
    "learning_rate": float, "momentum": float, "weight_decay": float,
    "max_iterations": int, "snapshot_every": int, "augment": str, "threshold": str, "select_by": str,
    "loss_in_fov": str, "green_only": str, "rescale": float, "pretrained": str,
    "seed": int, "output_dir": str, "data_dir": str, "data_root": str,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for name, typ in CONFIG_FLAGS.items():
        if name in skip:
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _config(args, **fixed) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    overrides.update({k: v for k, v in fixed.items() if v is not None})
    return ExperimentConfig.load(getattr(args, "config", None), overrides)


def _print_progress(record) -> None:
    m = record.val_metrics
    val = f" val_AUC={m.auc:.4f} val_F1={m.f1:.4f}" if m is not None else ""
    print(f"iter {record.iteration} train_loss={record.train_loss:.4f}{val}", flush=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="btsdsn", description="Deeply-supervised retinal vessel segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="load a dataset and report its split")
    _add_config_flags(p)
    p.add_argument("--out", help="write resolved samples (incl. derived FOV masks) here")

    p = sub.add_parser("augment-plan", help="print the augmentation plan as CSV")
    p.add_argument("plan_dataset", metavar="dataset")

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report CSV path (default: stdout)")
    p.add_argument("--prob-dir", help="also write probability maps here")

    p = sub.add_parser("predict", help="predict one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=("image", "patch"), default="image")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out-prob")
    p.add_argument("--out-bin")

    p = sub.add_parser("ablate", help="train/test HED, DSN, BS-DSN, BTS-DSN on shared data")
    _add_config_flags(p)
    p.add_argument("--out", help="report CSV path (default: stdout)")

    p = sub.add_parser("cross-train", help="train on one dataset, test on another")
    _add_config_flags(p, skip=("dataset",))
    p.add_argument("--train-dataset", required=True)
    p.add_argument("--test-dataset", required=True)
    p.add_argument("--out", help="report CSV path (default: stdout)")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=12)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("model", help="model utilities")
    msub = p.add_subparsers(dest="model_command", required=True, parser_class=_Parser)
    d = msub.add_parser("describe", help="print the layer/shape table")
    d.add_argument("--checkpoint")
    d.add_argument("--variant", default="BTS-DSN")
    d.add_argument("--backbone", default="vgg_groups")
    d.add_argument("--channel-widths", dest="channel_widths")
    d.add_argument("--in-channels", type=int, default=3)
    return parser


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)


def run(args) -> int:
    cmd = args.command
    if cmd == "augment-plan":
        try:
            sys.stdout.write(default_plan(args.plan_dataset).to_csv())
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return EXIT_OK
    if cmd == "synth":
        samples = cmd_synth(args.out, args.n, args.size, args.seed)
        print(f"wrote {len(samples)} samples to {args.out}")
        return EXIT_OK
    if cmd == "model":
        if args.checkpoint:
            graph = graph_from_checkpoint(checkpoint_load(args.checkpoint))
        else:
            widths = tuple(int(x) for x in args.channel_widths.split(",")) if args.channel_widths else None
            graph = build_graph(args.variant, args.backbone, channel_widths=widths, in_channels=args.in_channels)
        print(f"# variant={graph.variant} backbone={graph.backbone} sides={graph.num_sides} "
              f"bottom_top={graph.bottom_top} top_bottom={graph.top_bottom} hash={graph.config_hash()}")
        print("layer,shape,kind")
        total = 0
        for name, shape, kind in describe(graph):
            print(f"{name},{'x'.join(map(str, shape))},{kind}")
            if kind == "learnable":
                n = 1
                for s in shape:
                    n *= s
                total += n
        print(f"# learnable parameters: {total}")
        return EXIT_OK
    if cmd == "predict":
        experiments.cmd_predict(args.checkpoint, args.image, args.mode, args.threshold, args.out_prob, args.out_bin)
        return EXIT_OK

    if cmd == "cross-train":
        config = _config(args)
        row = experiments.cmd_crosstrain(config, args.train_dataset, args.test_dataset, args.out, _print_progress)
        _emit(experiments.write_csv(None, experiments.CROSS_COLUMNS, [row]), args.out)
        return EXIT_OK
    config = _config(args)
    if cmd == "prepare":
        rows = experiments.cmd_prepare(config, args.out)
        sys.stdout.write(experiments.write_csv(None, ("id", "split", "height", "width", "channels",
                                                      "vessel_fraction", "fov_fraction"), rows))
    elif cmd == "train":
        res = experiments.cmd_train(config, progress=_print_progress)
        print(f"best checkpoint: {res.checkpoint}")
        print(f"training log: {res.log_path}")
    elif cmd == "eval":
        rows = experiments.cmd_eval(args.checkpoint, config, threshold=config.threshold if args.threshold else None,
                                    out_csv=args.out, prob_dir=args.prob_dir)
        _emit(experiments.write_csv(None, experiments.EVAL_COLUMNS, rows), args.out)
    elif cmd == "ablate":
        rows = experiments.cmd_ablate(config, args.out, progress=_print_progress)
        _emit(experiments.write_csv(None, experiments.REPORT_COLUMNS, rows), args.out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"btsdsn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (UsageError, ConfigError, GraphConfigError) as exc:
        print(f"btsdsn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetLoadError, CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"btsdsn: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
