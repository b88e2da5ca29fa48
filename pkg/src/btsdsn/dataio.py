"""Dataset ingestion, fixed splits, FOV masks and probability-map persistence.

Expected layout under a dataset root::

    <root>/images/*.{tif,ppm,jpg,png,gif}
    <root>/truth/*          vessel ground truth, one per image
    <root>/mask/*           FOV masks (optional except for DRIVE)

Truth and mask files are matched to an image when their stem starts with the
image stem (``im0001`` -> ``im0001.ah.ppm``, ``Image_01L`` ->
``Image_01L_1stHO.png``) or, failing that, when the leading ``_``-separated
token agrees (``21_training`` -> ``21_manual1.gif``). Among several candidates
the lexicographically first wins, which picks the first observer for all three
public datasets.
"""
from __future__ import annotations

import enum
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".tif", ".tiff", ".ppm", ".jpg", ".jpeg", ".png", ".gif", ".bmp"}


class Dataset(str, enum.Enum):
    DRIVE = "DRIVE"
    STARE = "STARE"
    CHASE_DB1 = "CHASE_DB1"
    SYNTHETIC = "SYNTHETIC"

    @classmethod
    def parse(cls, name: "str | Dataset") -> "Dataset":
        if isinstance(name, Dataset):
            return name
        key = str(name).strip().upper().replace("-", "_")
        if key == "CHASE":
            key = "CHASE_DB1"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(
                f"unknown dataset {name!r}; expected one of {[d.value for d in cls]}"
            ) from None


class DatasetLoadError(RuntimeError):
    """Required files are missing or the directory does not match the convention."""


class SampleStructureError(ValueError):
    """A sample's arrays disagree in shape or value range."""


class FOVError(ValueError):
    pass


@dataclass
class FundusSample:
    id: str
    image: np.ndarray  # H x W x C float in [0, 1]
    truth: np.ndarray  # H x W uint8 in {0, 1}
    fov: np.ndarray  # H x W uint8 in {0, 1}
    source_dataset: Dataset = Dataset.SYNTHETIC

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        validate_sample(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]


def validate_sample(s: FundusSample) -> None:
    h, w = s.image.shape[:2]
    if s.image.ndim != 3 or s.image.shape[2] not in (1, 3):
        raise SampleStructureError(f"{s.id}: image must be HxWxC with C in {{1, 3}}, got {s.image.shape}")
    for name in ("truth", "fov"):
        arr = getattr(s, name)
        if arr.shape != (h, w):
            raise SampleStructureError(f"{s.id}: {name} shape {arr.shape} != image shape {(h, w)}")
        if not np.isin(arr, (0, 1)).all():
            raise SampleStructureError(f"{s.id}: {name} is not binary")
    if s.image.size and (s.image.min() < 0 or s.image.max() > 1):
        raise SampleStructureError(f"{s.id}: image intensities outside [0, 1]")


@dataclass
class DatasetSplit:
    dataset: Dataset
    train: list[FundusSample] = field(default_factory=list)
    val: list[FundusSample] = field(default_factory=list)
    test: list[FundusSample] = field(default_factory=list)
    # resolved loader options, recorded in reports
    options: dict = field(default_factory=dict)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass(frozen=True)
class SplitRule:
    pool: int  # images in the official training pool
    train: int
    val: int
    test: int


SPLIT_RULES = {
    Dataset.DRIVE: SplitRule(pool=20, train=15, val=5, test=20),
    Dataset.STARE: SplitRule(pool=10, train=7, val=3, test=10),
    Dataset.CHASE_DB1: SplitRule(pool=20, train=15, val=5, test=8),
}

DEFAULT_GREEN_ONLY = {Dataset.STARE: True}
DEFAULT_RESCALE = {Dataset.CHASE_DB1: 0.5}
FOV_THRESHOLD = 0.04


@dataclass
class LoadOptions:
    green_only: bool | None = None  # None -> dataset default
    rescale: float | None = None  # None -> dataset default
    fov_threshold: float = FOV_THRESHOLD

    def resolve(self, dataset: Dataset) -> dict:
        return {
            "green_only": DEFAULT_GREEN_ONLY.get(dataset, False) if self.green_only is None else self.green_only,
            "rescale": DEFAULT_RESCALE.get(dataset, 1.0) if self.rescale is None else self.rescale,
            "fov_threshold": self.fov_threshold,
        }


def synthetic_split_sizes(n: int) -> tuple[int, int, int]:
    """2/3 train, 1/6 validation, 1/6 test (12 images -> 8/2/2)."""
    if n < 3:
        raise DatasetLoadError(f"SYNTHETIC corpus needs at least 3 images, found {n}")
    val = max(1, round(n / 6))
    test = max(1, round(n / 6))
    return n - val - test, val, test


def _list_images(d: Path) -> list[Path]:
    if not d.is_dir():
        return []
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _stem(p: Path) -> str:
    return p.name[: -len(p.suffix)] if p.suffix else p.name


def _match(image: Path, candidates: list[Path]) -> Path | None:
    stem = _stem(image)
    hits = [c for c in candidates if _stem(c).startswith(stem)]
    if not hits:
        token = re.split(r"[_.]", stem)[0]
        hits = [c for c in candidates if re.split(r"[_.]", _stem(c))[0] == token]
    return min(hits, key=lambda p: p.name) if hits else None


def read_image(path: Path) -> np.ndarray:
    """Read an image as float in [0, 1], HxWxC (C in {1, 3})."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
        arr = np.asarray(im)
    arr = arr.astype(np.float64) / (65535.0 if arr.dtype == np.uint16 else 255.0)
    return arr[:, :, None] if arr.ndim == 2 else arr


def read_binary(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def _rescale(arr: np.ndarray, factor: float, order: int) -> np.ndarray:
    if factor == 1.0:
        return arr
    h, w = arr.shape[:2]
    out_h, out_w = max(1, round(h * factor)), max(1, round(w * factor))
    zoom = (out_h / h, out_w / w) + ((1,) if arr.ndim == 3 else ())
    return ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=True)


def _load_sample(image_path: Path, truth_path: Path, mask_path: Path | None,
                 dataset: Dataset, opts: dict) -> FundusSample:
    sid = _stem(image_path)
    image = read_image(image_path)
    truth = read_binary(truth_path)
    if truth.shape != image.shape[:2]:
        raise SampleStructureError(f"{sid}: truth shape {truth.shape} != image shape {image.shape[:2]}")
    fov = read_binary(mask_path) if mask_path is not None else None
    if fov is not None and fov.shape != image.shape[:2]:
        raise SampleStructureError(f"{sid}: mask shape {fov.shape} != image shape {image.shape[:2]}")
    if fov is None:
        fov = derive_fov(image, opts["fov_threshold"])
    factor = opts["rescale"]
    if factor != 1.0:
        image = np.clip(_rescale(image, factor, order=1), 0.0, 1.0)
        truth = _rescale(truth, factor, order=0)
        fov = _rescale(fov, factor, order=0)
    if opts["green_only"] and image.shape[2] == 3:
        image = image[:, :, 1:2]
    image = np.ascontiguousarray(image)
    if dataset is Dataset.DRIVE and mask_path is not None and np.any(truth & (1 - fov)):
        warnings.warn(f"{sid}: vessel pixels outside the provided FOV mask", stacklevel=2)
    return FundusSample(id=sid, image=image, truth=truth, fov=fov, source_dataset=dataset)


def _discover(root: Path, dataset: Dataset) -> list[tuple[Path, Path, Path | None]]:
    images = _list_images(root / "images")
    truths = _list_images(root / "truth")
    masks = _list_images(root / "mask")
    if not images:
        raise DatasetLoadError(f"no images found under {root / 'images'}")
    missing: list[str] = []
    triples = []
    for img in images:
        truth = _match(img, truths)
        mask = _match(img, masks) if masks else None
        if truth is None:
            missing.append(str(root / "truth" / f"{_stem(img)}*"))
        if mask is None and dataset is Dataset.DRIVE:
            missing.append(str(root / "mask" / f"{_stem(img)}*"))
        triples.append((img, truth, mask))
    if missing:
        raise DatasetLoadError("missing files:\n  " + "\n  ".join(missing))
    return triples


def _drive_pools(triples):
    """DRIVE: names carrying 'training'/'test' decide the pool, otherwise first 20 train."""
    names = [t[0].name.lower() for t in triples]
    if any("train" in n for n in names) and any("test" in n for n in names):
        pool = [t for t, n in zip(triples, names) if "train" in n]
        test = [t for t, n in zip(triples, names) if "train" not in n]
        return pool, test
    return triples[:20], triples[20:]


def load_dataset(root, dataset, options: LoadOptions | None = None) -> DatasetSplit:
    """Load a dataset directory and apply its fixed train/val/test convention.

    Splits (first/rest in ascending filename order): DRIVE 15/5/20 from the
    20 training + 20 test images, STARE 7/3/10, CHASE_DB1 15/5/8, SYNTHETIC
    2/3 : 1/6 : 1/6.
    """
    root = Path(root)
    dataset = Dataset.parse(dataset)
    opts = (options or LoadOptions()).resolve(dataset)
    if not root.is_dir():
        raise DatasetLoadError(f"dataset root {root} does not exist")
    triples = _discover(root, dataset)

    if dataset is Dataset.SYNTHETIC:
        n_train, n_val, _ = synthetic_split_sizes(len(triples))
        pool, test = triples[: n_train + n_val], triples[n_train + n_val:]
    else:
        rule = SPLIT_RULES[dataset]
        expected = rule.pool + rule.test
        if len(triples) != expected:
            raise DatasetLoadError(f"{dataset.value} expects {expected} images, found {len(triples)} under {root}")
        if dataset is Dataset.DRIVE:
            pool, test = _drive_pools(triples)
        else:
            pool, test = triples[: rule.pool], triples[rule.pool:]
        if len(pool) != rule.pool or len(test) != rule.test:
            raise DatasetLoadError(
                f"{dataset.value}: training pool/test sizes {len(pool)}/{len(test)}, expected {rule.pool}/{rule.test}"
            )
        n_train = rule.train

    load = lambda ts: [_load_sample(i, t, m, dataset, opts) for i, t, m in ts]
    pool_samples = load(pool)
    split = DatasetSplit(
        dataset=dataset,
        train=pool_samples[:n_train],
        val=pool_samples[n_train:],
        test=load(test),
        options=opts,
    )
    ids = [s.id for s in split.train + split.val + split.test]
    if len(set(ids)) != len(ids):
        raise DatasetLoadError(f"duplicate sample ids under {root}")
    log.info("loaded %s from %s: train/val/test = %s", dataset.value, root, split.sizes)
    return split


def derive_fov(image: np.ndarray, threshold: float = FOV_THRESHOLD, min_component: int = 0) -> np.ndarray:
    """FOV mask: largest connected bright region, holes filled.

    A pixel is a candidate when its channel-mean intensity exceeds
    ``threshold * max`` of that mean image. Components smaller than
    ``min_component`` pixels are discarded.
    """
    image = np.asarray(image, dtype=np.float64)
    mean = image.mean(axis=2) if image.ndim == 3 else image
    peak = mean.max() if mean.size else 0.0
    candidates = mean > threshold * peak if peak > 0 else np.zeros(mean.shape, bool)
    labels, n = ndimage.label(candidates)
    if n == 0:
        raise FOVError(f"derived FOV is empty; try a threshold below {threshold}")
    sizes = np.bincount(labels.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < max(1, min_component):
        raise FOVError(f"largest FOV component has {sizes[best - 1]} pixels (< {min_component}); try a lower threshold")
    mask = ndimage.binary_fill_holes(labels == best)
    return mask.astype(np.uint8)


def to_uint8(prob: np.ndarray) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if prob.size and (np.nanmin(prob) < 0 or np.nanmax(prob) > 1):
        raise ValueError("probability map values must lie in [0, 1]")
    return np.rint(prob * 255.0).astype(np.uint8)


def save_probability_map(prob: np.ndarray, path, metadata: dict | None = None) -> None:
    """Write an 8-bit grayscale PNG with value round(255 p)."""
    info = PngInfo()
    for k, v in (metadata or {}).items():
        info.add_text(str(k), str(v))
    Image.fromarray(to_uint8(prob), mode="L").save(Path(path), format="PNG", pnginfo=info)


def load_probability_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_binary_map(mask: np.ndarray, path, metadata: dict | None = None) -> None:
    save_probability_map(np.asarray(mask, dtype=np.float64), path, metadata)


def write_sample(sample: FundusSample, root, fmt: str = "png") -> None:
    """Write one sample into the standard layout (used by the synthetic generator)."""
    root = Path(root)
    for sub in ("images", "truth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    img = np.rint(sample.image * 255).astype(np.uint8)
    img = img[:, :, 0] if img.shape[2] == 1 else img
    Image.fromarray(img).save(root / "images" / f"{sample.id}.{fmt}")
    Image.fromarray(sample.truth * 255).save(root / "truth" / f"{sample.id}.{fmt}")
    Image.fromarray(sample.fov * 255).save(root / "mask" / f"{sample.id}.{fmt}")


def iter_all(split: DatasetSplit) -> Iterable[FundusSample]:
    yield from split.train
    yield from split.val
    yield from split.test
