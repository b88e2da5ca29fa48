"""Image-level and 9-patch prediction, plus binarization."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
import torch

from .dataio import FundusSample
from .metrics import binarize  # noqa: F401  re-exported
from .model import ModelGraph, Params, forward


@dataclass(frozen=True)
class PatchLayout:
    patch_size: tuple[int, int]
    offsets: tuple[tuple[int, int], ...]  # 9 anchors, row-major
    image_size: tuple[int, int]
    scale_up: int = 2


def make_layout(H: int, W: int) -> PatchLayout:
    """3x3 grid of half-size patches: anchors at the start, center and end of each axis."""
    if H < 2 or W < 2:
        raise ValueError(f"image must be at least 2x2, got {H}x{W}")
    h, w = math.ceil(H / 2), math.ceil(W / 2)
    rows = (0, (H - h) // 2, H - h)
    cols = (0, (W - w) // 2, W - w)
    return PatchLayout(patch_size=(h, w), offsets=tuple((r, c) for r in rows for c in cols), image_size=(H, W))


def unique_anchors(layout: PatchLayout) -> list[tuple[tuple[int, int], int]]:
    """Distinct anchors in first-seen order with their multiplicity."""
    counts = Counter(layout.offsets)
    seen: list[tuple[tuple[int, int], int]] = []
    for a in layout.offsets:
        if a not in dict(seen):
            seen.append((a, counts[a]))
    return seen


def stitch_weights(layout: PatchLayout) -> list[np.ndarray]:
    """Per-anchor H x W weight maps (uniform averaging) that sum to 1 at every pixel."""
    H, W = layout.image_size
    h, w = layout.patch_size
    anchors = unique_anchors(layout)
    cover = np.zeros((H, W))
    for (r, c), k in anchors:
        cover[r:r + h, c:c + w] += k
    if (cover == 0).any():
        raise AssertionError("patch layout leaves pixels uncovered")
    maps = []
    for (r, c), k in anchors:
        m = np.zeros((H, W))
        m[r:r + h, c:c + w] = k
        maps.append(m / cover)
    return maps


def upsample2(arr: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling on a sample-aligned grid.

    Source sample ``i`` lands on output index ``2i``; odd outputs are the mean
    of their two neighbors, with the last sample replicated at the far edge.
    """
    arr = np.asarray(arr, dtype=np.float64)
    for axis in (0, 1):
        n = arr.shape[axis]
        out_shape = list(arr.shape)
        out_shape[axis] = 2 * n
        out = np.empty(out_shape)
        nxt = np.concatenate([np.take(arr, range(1, n), axis=axis), np.take(arr, [n - 1], axis=axis)], axis=axis)
        idx_even = [slice(None)] * arr.ndim
        idx_odd = [slice(None)] * arr.ndim
        idx_even[axis] = slice(0, None, 2)
        idx_odd[axis] = slice(1, None, 2)
        out[tuple(idx_even)] = arr
        out[tuple(idx_odd)] = 0.5 * (arr + nxt)
        arr = out
    return arr


def downsample2(arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`upsample2`: bilinear sampling at the source-grid positions."""
    return np.asarray(arr)[::2, ::2]


def predict_image(graph: ModelGraph, params: Params, image) -> np.ndarray:
    with torch.no_grad():
        out = forward(graph, params, image)
    return out.fuse_prob.double().numpy()


def patch_images(image: np.ndarray, layout: PatchLayout | None = None) -> list[np.ndarray]:
    """The 9 crops, each upsampled 2x, in anchor order."""
    image = np.asarray(image, dtype=np.float64)
    layout = layout or make_layout(*image.shape[:2])
    h, w = layout.patch_size
    return [upsample2(image[r:r + h, c:c + w]) for r, c in layout.offsets]


def patch_samples(sample: FundusSample) -> list[FundusSample]:
    """Training samples for patch mode: 9 crops upsampled 2x (labels by nearest neighbor)."""
    layout = make_layout(*sample.shape)
    h, w = layout.patch_size
    out = []
    for k, (r, c) in enumerate(layout.offsets):
        crop = lambda a: a[r:r + h, c:c + w]
        near = lambda a: np.repeat(np.repeat(crop(a), 2, axis=0), 2, axis=1)
        out.append(replace(
            sample,
            id=f"{sample.id}_p{k}",
            image=np.clip(upsample2(crop(sample.image)), 0.0, 1.0),
            truth=near(sample.truth),
            fov=near(sample.fov),
        ))
    return out


def predict_patchwise(graph: ModelGraph, params: Params, image) -> np.ndarray:
    """Predict each upsampled patch, bring it back to native scale, average overlaps."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    H, W = image.shape[:2]
    layout = make_layout(H, W)
    h, w = layout.patch_size
    anchors = unique_anchors(layout)
    probs = [downsample2(predict_image(graph, params, upsample2(image[r:r + h, c:c + w]))) for (r, c), _ in anchors]
    # average deviations from the first covering prediction so equal predictions stitch exactly
    base = np.full((H, W), np.nan)
    for ((r, c), _), prob in zip(anchors, probs):
        region = base[r:r + h, c:c + w]
        np.copyto(region, prob, where=np.isnan(region))
    result = base.copy()
    for ((r, c), _), wmap, prob in zip(anchors, stitch_weights(layout), probs):
        result[r:r + h, c:c + w] += wmap[r:r + h, c:c + w] * (prob - base[r:r + h, c:c + w])
    return result


def predict(graph: ModelGraph, params: Params, image, mode: str = "image") -> np.ndarray:
    if mode == "image":
        return predict_image(graph, params, image)
    if mode == "patch":
        return predict_patchwise(graph, params, image)
    raise ValueError(f"mode must be 'image' or 'patch', got {mode!r}")
