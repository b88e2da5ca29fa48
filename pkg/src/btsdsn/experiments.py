"""Pipeline orchestration behind the CLI commands."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import augment_set, default_plan, identity_plan
from .config import ConfigError, ExperimentConfig
from .dataio import (Dataset, DatasetSplit, FundusSample, LoadOptions, load_dataset, read_image,
                     save_binary_map, save_probability_map, write_sample)
from .inference import patch_samples, predict
from .metrics import METRIC_NAMES, MetricsReport, best_f1_threshold, binarize, evaluate, macro_average
from .model import (CheckpointMismatchError, ModelGraph, Params, checkpoint_load, checkpoint_save, graph_from_checkpoint,
                    init_params)
from .trainer import train, write_log

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("dataset", "variant", "backbone", "mode", *METRIC_NAMES)
EVAL_COLUMNS = ("image", *REPORT_COLUMNS)
CROSS_COLUMNS = ("train_dataset", "test_dataset", "SE", "SP", "ACC", "AUC")


@dataclass
class TrainResult:
    graph: ModelGraph
    params: Params
    history: list
    threshold: float
    checkpoint: Path | None
    log_path: Path | None


def config_comment(config: ExperimentConfig) -> str:
    return f"config: {config.to_json()}"


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, float) else x for x in r])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    return text


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_split(config: ExperimentConfig, dataset: str | Dataset | None = None,
               options: LoadOptions | None = None) -> DatasetSplit:
    return load_dataset(config.dataset_dir(dataset), dataset or config.dataset, options or config.load_options())


def training_samples(config: ExperimentConfig, split: DatasetSplit) -> list[FundusSample]:
    plan = default_plan(split.dataset) if config.augment == "default" else identity_plan(split.dataset)
    samples = augment_set(split.train, plan)
    if config.mode == "patch":
        samples = [p for s in samples for p in patch_samples(s)]
    log.info("%d training samples (%s plan x%d, mode=%s)", len(samples), split.dataset.value, len(plan), config.mode)
    return samples


def _resolve_threshold(config: ExperimentConfig, graph, params, val: Sequence[FundusSample]) -> float:
    if config.threshold != "best-f1":
        return float(config.threshold)
    if not val:
        raise ConfigError("threshold policy best-f1 needs a validation split")
    probs = [predict(graph, params, s.image, config.mode) for s in val]
    return best_f1_threshold(probs, [s.truth for s in val], [s.fov for s in val])


def run_training(config: ExperimentConfig, split: DatasetSplit, samples: Sequence[FundusSample] | None = None,
                 variant: str | None = None, output_dir=None, progress=None) -> TrainResult:
    samples = training_samples(config, split) if samples is None else samples
    graph = config.graph(in_channels=split.train[0].image.shape[2], variant=variant)
    params = init_params(graph, seed=config.seed, pretrained=config.pretrained, alpha=config.alpha)
    out = Path(output_dir) if output_dir is not None else None
    extra = {"config": config.resolved(), "load_options": split.options, "dataset": split.dataset.value}
    best, history = train(
        graph, params, samples, split.val, config.optimizer(),
        loss_in_fov=config.loss_in_fov, select_by=config.select_by,
        threshold=float(config.threshold) if config.threshold != "best-f1" else 0.5,
        val_mode=config.mode,
        checkpoint_dir=(out / "snapshots") if out is not None else None,
        checkpoint_extra=extra, progress=progress,
    )
    # relative snapshot paths keep the log independent of where the run lives
    if out is not None:
        for r in history:
            if r.checkpoint_path:
                r.checkpoint_path = str(Path(r.checkpoint_path).relative_to(out))
    threshold = _resolve_threshold(config, graph, best, split.val)
    ckpt = log_path = None
    if out is not None:
        ckpt = out / "best.ckpt"
        checkpoint_save(best, ckpt, graph, extra={**extra, "threshold": threshold})
        log_path = out / "train_log.csv"
        write_log(history, log_path, header_comments=[config_comment(config)])
        (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    return TrainResult(graph, best, history, threshold, ckpt, log_path)


def cmd_train(config: ExperimentConfig, progress=None) -> TrainResult:
    """dataio -> augment -> trainer; writes best.ckpt, train_log.csv and config.txt."""
    split = load_split(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return run_training(config, split, output_dir=out, progress=progress)


def evaluate_samples(graph, params, samples: Sequence[FundusSample], mode: str, threshold: float,
                     prob_dir=None, metadata: dict | None = None) -> list[tuple[str, MetricsReport]]:
    rows = []
    for s in samples:
        prob = predict(graph, params, s.image, mode)
        if prob_dir is not None:
            Path(prob_dir).mkdir(parents=True, exist_ok=True)
            save_probability_map(prob, Path(prob_dir) / f"{s.id}.png", metadata)
        rows.append((s.id, evaluate(prob, s.truth, s.fov, threshold)))
    return rows


def _checkpoint_context(params: Params) -> dict:
    return params.meta.get("extra") or {}


def cmd_eval(checkpoint, config: ExperimentConfig, mode: str | None = None, threshold: float | str | None = None,
             out_csv=None, prob_dir=None) -> list[list]:
    """Evaluate the test split: one row per image plus a macro-average row named ``mean``."""
    params = checkpoint_load(checkpoint)
    graph = graph_from_checkpoint(params)
    ctx = _checkpoint_context(params)
    mode = mode or config.mode
    # None or best-f1: use the threshold resolved at training time
    if threshold is None or threshold == "best-f1":
        threshold = ctx.get("threshold", 0.5)
    threshold = float(threshold)
    load_opts = ctx.get("load_options", {})
    options = LoadOptions(green_only=load_opts.get("green_only", config.green_only),
                          rescale=config.rescale)
    split = load_split(config, options=options)
    if split.test and split.test[0].image.shape[2] != graph.in_channels:
        raise CheckpointMismatchError(
            f"checkpoint expects {graph.in_channels}-channel input, {split.dataset.value} test images have "
            f"{split.test[0].image.shape[2]}"
        )
    meta = {"config": config.to_json(), "checkpoint": Path(checkpoint).name}
    per_image = evaluate_samples(graph, params, split.test, mode, threshold, prob_dir, meta)
    base = [split.dataset.value, graph.variant, graph.backbone, mode]
    rows = [[sid, *base, *(r.as_row()[k] for k in METRIC_NAMES)] for sid, r in per_image]
    mean = macro_average([r for _, r in per_image])
    rows.append(["mean", *base, *(mean.as_row()[k] for k in METRIC_NAMES)])
    comments = [config_comment(config), f"checkpoint: {Path(checkpoint).name}", f"threshold: {threshold}",
                f"rescale: {split.options.get('rescale')}"]
    write_csv(out_csv, EVAL_COLUMNS, rows, comments)
    return rows


def ablation_variants(backbone: str) -> list[str]:
    """HED only exists for the VGG backbone (it needs a fifth group)."""
    return (["HED"] if backbone == "vgg_groups" else []) + ["DSN", "BS-DSN", "BTS-DSN"]


def cmd_ablate(config: ExperimentConfig, out_csv=None, progress=None) -> list[list]:
    """Train and test every variant on identical augmented data and seed."""
    split = load_split(config)
    samples = training_samples(config, split)
    rows = []
    for variant in ablation_variants(config.backbone):
        out_dir = Path(config.output_dir) / variant if out_csv is not None else None
        res = run_training(config, split, samples=samples, variant=variant, output_dir=out_dir, progress=progress)
        reports = [r for _, r in evaluate_samples(res.graph, res.params, split.test, config.mode, res.threshold)]
        mean = macro_average(reports)
        rows.append([config.dataset, variant, config.backbone, config.mode, *(mean.as_row()[k] for k in METRIC_NAMES)])
    write_csv(out_csv, REPORT_COLUMNS, rows, [config_comment(config)])
    return rows


def cmd_crosstrain(config: ExperimentConfig, train_dataset, test_dataset, out_csv=None, progress=None) -> list:
    """Train on one dataset's training data, test on another's test split."""
    train_ds, test_ds = Dataset.parse(train_dataset), Dataset.parse(test_dataset)
    if train_ds is test_ds:
        raise ConfigError("cross-training needs two different datasets")
    split = load_dataset(config.dataset_dir(train_ds), train_ds, config.load_options())
    out_dir = Path(config.output_dir) / f"{train_ds.value}_to_{test_ds.value}" if out_csv is not None else None
    res = run_training(config, split, output_dir=out_dir, progress=progress)
    # the test images must match the channel layout the model was trained on
    test_opts = LoadOptions(green_only=split.options["green_only"])
    test_split = load_dataset(config.dataset_dir(test_ds), test_ds, test_opts)
    reports = [r for _, r in evaluate_samples(res.graph, res.params, test_split.test, config.mode, res.threshold)]
    mean = macro_average(reports)
    row = [train_ds.value, test_ds.value, mean.se, mean.sp, mean.acc, mean.auc]
    write_csv(out_csv, CROSS_COLUMNS, [row], [config_comment(config)])
    return row


def cmd_predict(checkpoint, image_path, mode: str = "image", threshold: float | None = None,
                out_prob=None, out_bin=None) -> np.ndarray:
    params = checkpoint_load(checkpoint)
    graph = graph_from_checkpoint(params)
    ctx = _checkpoint_context(params)
    image = read_image(Path(image_path))
    if image.shape[2] == 3 and graph.in_channels == 1:
        image = image[:, :, 1:2]
    elif image.shape[2] == 1 and graph.in_channels == 3:
        image = np.repeat(image, 3, axis=2)
    prob = predict(graph, params, image, mode)
    t = float(ctx.get("threshold", 0.5)) if threshold is None else float(threshold)
    meta = {"checkpoint": Path(checkpoint).name, "mode": mode, "threshold": t,
            "config": str(ctx.get("config", {}))}
    if out_prob:
        save_probability_map(prob, out_prob, meta)
    if out_bin:
        save_binary_map(binarize(prob, t), out_bin, meta)
    return prob


def cmd_prepare(config: ExperimentConfig, out_dir=None) -> list[list]:
    """Load a dataset, report its split, optionally write the resolved samples (with derived FOV masks)."""
    split = load_split(config)
    rows = []
    for part in ("train", "val", "test"):
        for s in getattr(split, part):
            rows.append([s.id, part, s.shape[0], s.shape[1], s.image.shape[2], f"{s.truth.mean():.6f}",
                         f"{s.fov.mean():.6f}"])
            if out_dir is not None:
                write_sample(s, Path(out_dir) / part)
    return rows
