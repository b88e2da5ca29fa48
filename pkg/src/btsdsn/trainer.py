"""Fixed-learning-rate SGD with momentum and weight decay, one image per step."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataio import FundusSample
from .inference import predict
from .metrics import MetricsReport, evaluate, macro_average
from .model import ModelGraph, Params, checkpoint_save, forward
from .objective import EMPTY_TRUTH_CAVEAT, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "train_loss", "val_SE", "val_SP", "val_ACC", "val_AUC", "val_MCC", "val_F1",
               "checkpoint_path")

# fine-tuning settings per backbone; desk presets train toy-width nets from scratch
FINETUNE_OPTIMIZER = {
    "vgg_groups": dict(learning_rate=1e-8, momentum=0.9, weight_decay=5e-4),
    "resnet_groups": dict(learning_rate=1e-7, momentum=0.9, weight_decay=5e-4),
}
DESK_OPTIMIZER = dict(learning_rate=1e-5, momentum=0.9, weight_decay=5e-4)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_finite: Params, history: list):
        super().__init__(message)
        self.last_finite = last_finite
        self.history = history


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_iterations: int | None = None  # None -> 10 x augmented set size
    snapshot_every: int | None = None  # None -> augmented set size
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    @classmethod
    def for_backbone(cls, backbone: str, scale: str = "full", **overrides) -> "OptimizerConfig":
        base = dict(FINETUNE_OPTIMIZER[backbone] if scale == "full" else DESK_OPTIMIZER)
        base.update(overrides)
        return cls(**base)

    def resolve(self, n_samples: int) -> tuple[int, int]:
        max_it = self.max_iterations if self.max_iterations is not None else 10 * n_samples
        snap = self.snapshot_every if self.snapshot_every is not None else n_samples
        return max_it, max(1, min(snap, max_it)) if max_it > 0 else max(1, snap)


@dataclass
class TrainRecord:
    iteration: int
    train_loss: float
    val_metrics: MetricsReport | None
    checkpoint_path: str = ""

    def row(self) -> list[str]:
        m = self.val_metrics
        vals = [m.se, m.sp, m.acc, m.auc, m.mcc, m.f1] if m is not None else [float("nan")] * 6
        return [str(self.iteration), f"{self.train_loss:.6f}", *(f"{v:.6f}" for v in vals), self.checkpoint_path]


@dataclass
class SGDState:
    velocity: dict[str, torch.Tensor] = field(default_factory=dict)


def sgd_step(params: Params, grads: dict[str, torch.Tensor], state: SGDState, opt: OptimizerConfig) -> None:
    """v <- momentum * v - lr * (g + weight_decay * theta); theta <- theta + v."""
    with torch.no_grad():
        for name, theta in params.tensors.items():
            g = grads[name] + opt.weight_decay * theta
            v = state.velocity.get(name)
            v = -opt.learning_rate * g if v is None else opt.momentum * v - opt.learning_rate * g
            state.velocity[name] = v
            theta.add_(v)


def validate(graph: ModelGraph, params: Params, val: Sequence[FundusSample], threshold: float = 0.5,
             mode: str = "image") -> MetricsReport:
    """Per-image metrics inside the FOV, macro-averaged."""
    if not val:
        raise ValueError("validation set is empty")
    reports = [evaluate(predict(graph, params, s.image, mode), s.truth, s.fov, threshold) for s in val]
    return macro_average(reports)


def _selection_score(report: MetricsReport, metric: str) -> float:
    return getattr(report, metric.lower())


def train(graph: ModelGraph, init: Params, train_samples: Sequence[FundusSample],
          val: Sequence[FundusSample], opt: OptimizerConfig, *,
          loss_in_fov: bool = False,
          select_by: str = "AUC",
          threshold: float = 0.5,
          val_mode: str = "image",
          checkpoint_dir=None,
          checkpoint_extra: dict | None = None,
          progress: Callable[[TrainRecord], None] | None = None) -> tuple[Params, list[TrainRecord]]:
    """Train on already-augmented samples; return the best snapshot and the history.

    Samples are visited in a seeded shuffle (reshuffled each pass). Every
    ``snapshot_every`` steps the model is validated; the best snapshot by
    ``select_by`` wins, ties going to the earlier iteration. With no
    validation images the last snapshot wins.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    n = len(train_samples)
    max_it, snap_every = opt.resolve(n)
    rng = np.random.default_rng(opt.seed)
    params = init.clone()
    state = SGDState()
    history: list[TrainRecord] = []
    best, best_score = params.clone(), -math.inf
    last_finite = params.clone()
    running: list[float] = []
    empty_warned = False
    order: list[int] = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    for it in range(1, max_it + 1):
        if not order:
            order = list(rng.permutation(n))
        sample = train_samples[order.pop(0)]
        if not sample.truth.any() and not empty_warned:
            log.warning("%s (%s)", EMPTY_TRUTH_CAVEAT, sample.id)
            empty_warned = True
        work = params.requires_grad_(True)
        out = forward(graph, work, sample.image)
        region = sample.fov if loss_in_fov else None
        loss = total_loss(out, sample.truth, params.alpha, region).total
        if not torch.isfinite(loss):
            params.requires_grad_(False)
            raise TrainingDiverged(f"non-finite loss at iteration {it}", last_finite, history)
        names = list(work.tensors)
        grads = dict(zip(names, torch.autograd.grad(loss, [work.tensors[k] for k in names], allow_unused=True)))
        grads = {k: (g if g is not None else torch.zeros_like(work.tensors[k])) for k, g in grads.items()}
        params.requires_grad_(False)
        sgd_step(params, grads, state, opt)
        running.append(loss.item())

        if it % snap_every == 0 or it == max_it:
            if not all(torch.isfinite(t).all() for t in params.tensors.values()):
                raise TrainingDiverged(f"non-finite parameters at iteration {it}", last_finite, history)
            last_finite = params.clone()
            report = validate(graph, params, val, threshold, val_mode) if val else None
            path = ""
            if ckpt_dir is not None:
                path = str(ckpt_dir / f"snapshot_{it:07d}.ckpt")
                checkpoint_save(params, path, graph, extra=checkpoint_extra)
            record = TrainRecord(iteration=it, train_loss=float(np.mean(running)), val_metrics=report,
                                 checkpoint_path=path)
            running = []
            history.append(record)
            score = _selection_score(report, select_by) if report is not None else float(it)
            if score > best_score:
                best, best_score = params.clone(), score
            if progress is not None:
                progress(record)
    return best, history


def write_log(history: Sequence[TrainRecord], path, header_comments: Sequence[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in header_comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in history:
            w.writerow(r.row())
