"""Deterministic geometric augmentation with fixed per-dataset plans.

A plan step is a composition of primitive transforms applied left to right.
Rotation angles are clockwise in image coordinates (row axis pointing down),
so a 90 degree rotation moves pixel ``(r, c)`` of a square image of side S to
``(c, S - 1 - r)``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataio import Dataset, FundusSample

PLAN_VERSION = "1"
KINDS = ("identity", "rotate", "flip_h", "flip_v", "scale")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    angle: float = 0.0
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "rotate" and not 0 < self.angle < 360:
            raise ValueError(f"rotation angle must lie in (0, 360), got {self.angle}")
        if self.kind == "scale" and self.factor <= 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")

    def label(self) -> str:
        if self.kind == "rotate":
            return f"rotate({self.angle:g})"
        if self.kind == "scale":
            return f"scale({self.factor:g})"
        return self.kind


Step = tuple[TransformSpec, ...]


@dataclass(frozen=True)
class AugmentPlan:
    dataset: Dataset
    transforms: tuple[Step, ...]
    version: str = PLAN_VERSION

    def __len__(self) -> int:
        return len(self.transforms)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "transform", "plan_version", "dataset"])
        for i, step in enumerate(self.transforms):
            w.writerow([i, "+".join(t.label() for t in step), self.version, self.dataset.value])
        return buf.getvalue()


IDENTITY = TransformSpec("identity")
FLIP_H = TransformSpec("flip_h")
FLIP_V = TransformSpec("flip_v")


def _rot(angle: float) -> TransformSpec:
    return TransformSpec("rotate", angle=float(angle))


def _core12() -> list[Step]:
    return [
        (IDENTITY,),
        (_rot(90),), (_rot(180),), (_rot(270),),
        (FLIP_H,), (FLIP_V,),
        (TransformSpec("scale", factor=0.8),), (TransformSpec("scale", factor=1.2),),
        (_rot(90), FLIP_H), (_rot(270), FLIP_H),
        (_rot(45), FLIP_H), (_rot(135), FLIP_H),
    ]


def default_plan(dataset) -> AugmentPlan:
    """Fixed plan per dataset: DRIVE 13 steps, CHASE_DB1 16, STARE 40.

    SYNTHETIC reuses the DRIVE plan.
    """
    dataset = Dataset.parse(dataset)
    if dataset in (Dataset.DRIVE, Dataset.SYNTHETIC):
        steps = _core12() + [(_rot(315), FLIP_H)]
    elif dataset is Dataset.CHASE_DB1:
        steps = _core12() + [(_rot(a),) for a in (45, 135, 225, 315)]
    elif dataset is Dataset.STARE:
        rotations = [(IDENTITY,)] + [(_rot(a),) for a in range(18, 360, 18)]
        flipped = [(FLIP_H,)] + [(_rot(a), FLIP_H) for a in range(18, 360, 18)]
        steps = rotations + flipped
    else:
        raise ValueError(f"no augmentation plan for dataset {dataset}")
    return AugmentPlan(dataset=dataset, transforms=tuple(steps))


def identity_plan(dataset=Dataset.SYNTHETIC) -> AugmentPlan:
    return AugmentPlan(dataset=Dataset.parse(dataset), transforms=((IDENTITY,),))


def _fit(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Center-crop or zero-pad the first two axes to ``shape``."""
    h, w = arr.shape[:2]
    H, W = shape
    out = np.zeros((H, W) + arr.shape[2:], dtype=arr.dtype)
    sr, dr = max(0, (h - H) // 2), max(0, (H - h) // 2)
    sc, dc = max(0, (w - W) // 2), max(0, (W - w) // 2)
    n_r, n_c = min(h, H), min(w, W)
    out[dr:dr + n_r, dc:dc + n_c] = arr[sr:sr + n_r, sc:sc + n_c]
    return out


def _affine(arr: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    h, w = arr.shape[:2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    if arr.ndim == 2:
        return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant", cval=0.0)
    return np.stack(
        [ndimage.affine_transform(arr[..., k], matrix, offset=offset, order=order, mode="constant", cval=0.0)
         for k in range(arr.shape[2])],
        axis=-1,
    )


def _apply_array(arr: np.ndarray, t: TransformSpec, order: int) -> np.ndarray:
    if t.kind == "identity":
        return arr
    if t.kind == "flip_h":
        return arr[:, ::-1].copy()
    if t.kind == "flip_v":
        return arr[::-1].copy()
    if t.kind == "rotate":
        if t.angle % 90 == 0:
            return _fit(np.rot90(arr, k=-int(t.angle // 90), axes=(0, 1)), arr.shape[:2])
        theta = np.deg2rad(t.angle)
        c, s = np.cos(theta), np.sin(theta)
        # maps output coordinates back to input coordinates
        return _affine(arr, np.array([[c, -s], [s, c]]), order)
    # scale about the image center
    return _affine(arr, np.eye(2) / t.factor, order)


def apply_transform(sample: FundusSample, t: TransformSpec | Step, suffix: str | None = None) -> FundusSample:
    steps = (t,) if isinstance(t, TransformSpec) else tuple(t)
    image, truth, fov = sample.image, sample.truth, sample.fov
    for spec in steps:
        image = _apply_array(image, spec, order=1)
        truth = _apply_array(truth, spec, order=0)
        fov = _apply_array(fov, spec, order=0)
    return replace(
        sample,
        id=sample.id if suffix is None else f"{sample.id}_{suffix}",
        image=np.clip(image, 0.0, 1.0),
        truth=(truth > 0).astype(np.uint8),
        fov=(fov > 0).astype(np.uint8),
    )


def augment_set(split: Sequence[FundusSample], plan: AugmentPlan) -> list[FundusSample]:
    """Sample-major, transform-minor expansion; ids get an ``_a<k>`` suffix."""
    return [
        apply_transform(s, step, suffix=f"a{k:02d}")
        for s in split
        for k, step in enumerate(plan.transforms)
    ]
