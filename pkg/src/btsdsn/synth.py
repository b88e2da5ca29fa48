"""Seeded synthetic fundus-like corpus: bright curvy filaments on a shaded background."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataio import Dataset, FundusSample, write_sample

MIN_VESSEL_FRACTION = 0.02
MAX_VESSEL_FRACTION = 0.20


def _bezier(ctrl: np.ndarray, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def rasterize_curve(mask: np.ndarray, ctrl: np.ndarray, width: float) -> None:
    """Stamp disks of diameter ``width`` along a cubic Bezier curve (in place)."""
    H, W = mask.shape
    length = np.sum(np.linalg.norm(np.diff(ctrl, axis=0), axis=1))
    pts = _bezier(ctrl, max(16, int(4 * length)))
    r = width / 2.0
    rr = int(np.ceil(r))
    offsets = [(dy, dx) for dy in range(-rr, rr + 1) for dx in range(-rr, rr + 1)]
    for y, x in pts:
        cy, cx = int(round(y)), int(round(x))
        for dy, dx in offsets:
            py, px = cy + dy, cx + dx
            if 0 <= py < H and 0 <= px < W and (py - y) ** 2 + (px - x) ** 2 <= r * r + 0.25:
                mask[py, px] = 1


def vessel_mask(rng: np.random.Generator, size: int, n_curves: int | None = None) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.uint8)
    if n_curves is None:
        n_curves = max(1, round(int(rng.integers(5, 9)) * size / 128))
    for _ in range(n_curves):
        ctrl = rng.uniform(-0.1 * size, 1.1 * size, size=(4, 2))
        width = float(rng.integers(1, 5))
        rasterize_curve(mask, ctrl, width)
    return mask


def synth_sample(rng: np.random.Generator, size: int, sample_id: str) -> FundusSample:
    # redraw until the vessel fraction lands in the target band
    while True:
        truth = vessel_mask(rng, size)
        frac = truth.mean()
        if MIN_VESSEL_FRACTION < frac < MAX_VESSEL_FRACTION:
            break
    yy, xx = np.mgrid[0:size, 0:size] / max(1, size - 1)
    gx, gy = rng.uniform(-0.15, 0.15, size=2)
    shade = 0.35 + gx * (xx - 0.5) + gy * (yy - 0.5)
    tint = np.array([1.0, 0.7, 0.4])
    image = shade[:, :, None] * tint
    contrast = rng.uniform(0.25, 0.35)
    image = image + contrast * truth[:, :, None] * tint
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # quantize now so the sample equals what the PNG round-trip will load
    image = np.rint(image * 255) / 255.0
    fov = np.ones((size, size), dtype=np.uint8)
    return FundusSample(id=sample_id, image=image, truth=truth, fov=fov, source_dataset=Dataset.SYNTHETIC)


def generate(n: int, size: int = 128, seed: int = 0) -> list[FundusSample]:
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, size, f"synth_{i:03d}") for i in range(n)]


def cmd_synth(out_dir, n: int = 12, size: int = 128, seed: int = 0) -> list[FundusSample]:
    """Write ``n`` synthetic samples into the standard dataset layout."""
    samples = generate(n, size, seed)
    out = Path(out_dir)
    for s in samples:
        write_sample(s, out)
    return samples
