"""FOV-restricted segmentation metrics: SE, SP, ACC, F1, MCC and rank-based AUC."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("SE", "SP", "ACC", "AUC", "MCC", "F1")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN


@dataclass
class MetricsReport:
    se: float
    sp: float
    acc: float
    auc: float
    mcc: float
    f1: float
    counts: ConfusionCounts | None
    threshold: float
    # names of metrics whose denominator vanished and were reported as 0
    flags: tuple[str, ...] = field(default_factory=tuple)

    def as_row(self) -> dict[str, float]:
        return {
            "SE": self.se,
            "SP": self.sp,
            "ACC": self.acc,
            "AUC": self.auc,
            "MCC": self.mcc,
            "F1": self.f1,
        }


def _check_shapes(*maps: np.ndarray) -> None:
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise MetricsError(f"shape mismatch: {sorted(shapes)}")


def _fov_values(values, truth, fov):
    values = np.asarray(values)
    truth = np.asarray(truth)
    fov = np.ones(truth.shape, dtype=bool) if fov is None else np.asarray(fov).astype(bool)
    _check_shapes(values, truth, fov)
    if not fov.any():
        raise MetricsError("FOV mask is empty")
    return values[fov], truth[fov].astype(bool)


def confusion(pred_binary, truth, fov=None) -> ConfusionCounts:
    """Count TP/FP/TN/FN over pixels where ``fov`` is set."""
    pred, gt = _fov_values(pred_binary, truth, fov)
    pred = pred.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(TP=tp, FP=fp, TN=tn, FN=fn)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def scalar_metrics(c: ConfusionCounts) -> tuple[tuple[float, float, float, float, float], tuple[str, ...]]:
    """Return ``((se, sp, acc, f1, mcc), flags)``.

    A metric with a zero denominator is reported as 0 and its name is added
    to ``flags`` so batch tables stay total.
    """
    flags: list[str] = []
    tp, fp, tn, fn = c.TP, c.FP, c.TN, c.FN
    se = _ratio(tp, tp + fn, "SE", flags)
    sp = _ratio(tn, tn + fp, "SP", flags)
    acc = _ratio(tp + tn, tp + fn + tn + fp, "ACC", flags)
    pr = _ratio(tp, tp + fp, "PR", flags)
    f1 = _ratio(2 * pr * se, pr + se, "F1", flags)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = _ratio(tp * tn - fp * fn, math.sqrt(den), "MCC", flags)
    return (se, sp, acc, f1, mcc), tuple(flags)


def auc(prob, truth, fov=None) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores, gt = _fov_values(prob, truth, fov)
    n_pos = int(np.count_nonzero(gt))
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC undefined: FOV contains a single class")
    ranks = rankdata(scores.astype(np.float64), method="average")
    u = ranks[gt].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(prob, truth, fov=None, thresholds: Sequence[float] | None = None) -> list[tuple[float, float]]:
    """(1 - SP, SE) at each threshold, using the ``p >= t`` convention.

    With ``thresholds=None`` the full grid is used: every distinct score plus
    one value above the maximum.
    """
    scores, gt = _fov_values(prob, truth, fov)
    n_pos = int(np.count_nonzero(gt))
    n_neg = gt.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC undefined: FOV contains a single class")
    if thresholds is None:
        thresholds = full_threshold_grid(scores)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise MetricsError("thresholds must be sorted ascending")
    pos_sorted = np.sort(scores[gt])
    neg_sorted = np.sort(scores[~gt])
    # count of scores >= t
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    return [(float(f / n_neg), float(t / n_pos)) for f, t in zip(fp, tp)]


def full_threshold_grid(scores) -> np.ndarray:
    distinct = np.unique(np.asarray(scores, dtype=np.float64))
    return np.append(distinct, np.nextafter(distinct[-1], np.inf))


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    pts = sorted(points)
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(np.trapezoid(y, x))


def binarize(prob, threshold: float) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def evaluate(prob, truth, fov=None, threshold: float = 0.5) -> MetricsReport:
    counts = confusion(binarize(prob, threshold), truth, fov)
    (se, sp, acc, f1, mcc), flags = scalar_metrics(counts)
    return MetricsReport(
        se=se, sp=sp, acc=acc, auc=auc(prob, truth, fov), mcc=mcc, f1=f1,
        counts=counts, threshold=threshold, flags=flags,
    )


def macro_average(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean of per-image reports; counts are summed for reference."""
    if not reports:
        raise MetricsError("cannot aggregate zero reports")
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
    counts = None
    if all(r.counts is not None for r in reports):
        counts = ConfusionCounts(
            TP=sum(r.counts.TP for r in reports),
            FP=sum(r.counts.FP for r in reports),
            TN=sum(r.counts.TN for r in reports),
            FN=sum(r.counts.FN for r in reports),
        )
    flags = tuple(sorted({f for r in reports for f in r.flags}))
    return MetricsReport(
        se=mean("se"), sp=mean("sp"), acc=mean("acc"), auc=mean("auc"),
        mcc=mean("mcc"), f1=mean("f1"), counts=counts,
        threshold=reports[0].threshold, flags=flags,
    )


def best_f1_threshold(probs, truths, fovs, grid=None) -> float:
    """Threshold maximizing macro F1 over a set of images (ties -> lowest threshold)."""
    grid = np.round(np.arange(0.01, 1.0, 0.01), 2) if grid is None else np.asarray(grid)
    best_t, best_f1 = float(grid[0]), -1.0
    for t in grid:
        f1s = []
        for p, y, m in zip(probs, truths, fovs):
            (_, _, _, f1, _), _ = scalar_metrics(confusion(binarize(p, float(t)), y, m))
            f1s.append(f1)
        score = float(np.mean(f1s))
        if score > best_f1:
            best_t, best_f1 = float(t), score
    return best_t


def write_roc_csv(points, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("fpr,tpr\n")
        for x, y in points:
            fh.write(f"{x:.8f},{y:.8f}\n")
