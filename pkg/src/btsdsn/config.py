"""Experiment configuration: defaults <- config file <- command-line flags.

Config files are flat ``key = value`` text. ``#`` starts a comment and an
``include = other.cfg`` line pulls in another file first (relative paths
resolve against the including file), so a file only needs the keys it changes.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .augment import PLAN_VERSION
from .dataio import Dataset, LoadOptions
from .model import (DESK_WIDTHS, FULL_WIDTHS, RESNET_BLOCKS, VGG_CONVS, ModelGraph, build_graph,
                    normalize_backbone, normalize_variant)
from .trainer import DESK_OPTIMIZER, FINETUNE_OPTIMIZER, OptimizerConfig

DATA_ROOT_ENV = "BTSDSN_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; surfaced as a usage error by the CLI."""


def _int_list(v) -> tuple[int, ...] | None:
    if v is None or v == "":
        return None
    if isinstance(v, (list, tuple)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).replace(",", " ").split())


def _float_list(v) -> tuple[float, ...] | None:
    if v is None or v == "":
        return None
    if isinstance(v, (list, tuple)):
        return tuple(float(x) for x in v)
    return tuple(float(x) for x in str(v).replace(",", " ").split())


def _bool(v) -> bool | None:
    if v is None or isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    if s in ("", "none", "auto"):
        return None
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_float(v):
    return None if v in (None, "", "none", "auto") else float(v)


def _opt_int(v):
    return None if v in (None, "", "none", "auto") else int(v)


@dataclass
class ExperimentConfig:
    dataset: str = "SYNTHETIC"
    variant: str = "BTS-DSN"
    backbone: str = "vgg_groups"
    mode: str = "image"
    # "auto": full preset when fine-tuning from a pretrained checkpoint, desk preset otherwise
    scale: str = "auto"
    channel_widths: tuple[int, ...] | None = None
    group_depths: tuple[int, ...] | None = None
    tap_channels: int = 16
    fuse_on: str = "logits"
    alpha: tuple[float, ...] | None = None
    learning_rate: float | None = None
    momentum: float | None = None
    weight_decay: float | None = None
    max_iterations: int | None = None
    snapshot_every: int | None = None
    augment: str = "default"
    augment_plan_version: str = PLAN_VERSION
    threshold: str = "0.5"
    select_by: str = "AUC"
    loss_in_fov: bool = False
    green_only: bool | None = None
    rescale: float | None = None
    pretrained: str | None = None
    seed: int = 0
    output_dir: str = "runs/default"
    data_dir: str | None = None
    data_root: str | None = None

    _CONVERTERS = {
        "channel_widths": _int_list,
        "group_depths": _int_list,
        "alpha": _float_list,
        "tap_channels": int,
        "learning_rate": _opt_float,
        "momentum": _opt_float,
        "weight_decay": _opt_float,
        "max_iterations": _opt_int,
        "snapshot_every": _opt_int,
        "loss_in_fov": lambda v: bool(_bool(v)),
        "green_only": _bool,
        "rescale": _opt_float,
        "seed": int,
        "pretrained": lambda v: None if v in (None, "", "none") else str(v),
        "data_dir": lambda v: None if v in (None, "") else str(v),
        "data_root": lambda v: None if v in (None, "") else str(v),
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        try:
            self.dataset = Dataset.parse(self.dataset).value
            self.variant = normalize_variant(self.variant)
            self.backbone = normalize_backbone(self.backbone)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode not in ("image", "patch"):
            raise ConfigError(f"mode must be 'image' or 'patch', got {self.mode!r}")
        if self.scale not in ("auto", "desk", "full"):
            raise ConfigError(f"scale must be auto, desk or full, got {self.scale!r}")
        if self.augment not in ("default", "none"):
            raise ConfigError(f"augment must be 'default' or 'none', got {self.augment!r}")
        if self.augment_plan_version != PLAN_VERSION:
            raise ConfigError(f"augment plan version {self.augment_plan_version} unavailable (have {PLAN_VERSION})")
        if self.threshold != "best-f1":
            try:
                t = float(self.threshold)
            except ValueError:
                raise ConfigError(f"threshold must be a number in [0, 1] or 'best-f1', got {self.threshold!r}") from None
            if not 0 <= t <= 1:
                raise ConfigError(f"threshold must lie in [0, 1], got {t}")
        if self.select_by.upper() not in ("SE", "SP", "ACC", "AUC", "MCC", "F1"):
            raise ConfigError(f"unknown selection metric {self.select_by!r}")

    # -- construction -----------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        current = asdict(base) if base is not None else {}
        names = set(cls.field_names())
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            conv = cls._CONVERTERS.get(key, lambda v: v if v is None else str(v))
            try:
                current[key] = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
        return cls(**current)

    @classmethod
    def load(cls, path, overrides: Mapping[str, Any] | None = None) -> "ExperimentConfig":
        cfg = cls.from_mapping(read_config_file(path)) if path else cls()
        return cls.from_mapping(overrides or {}, base=cfg)

    # -- resolution -------------------------------------------------------

    @property
    def dataset_enum(self) -> Dataset:
        return Dataset.parse(self.dataset)

    @property
    def effective_scale(self) -> str:
        if self.scale != "auto":
            return self.scale
        return "full" if self.pretrained else "desk"

    def resolved_widths(self) -> tuple[int, ...]:
        if self.channel_widths is not None:
            return self.channel_widths
        return FULL_WIDTHS[self.backbone] if self.effective_scale == "full" else DESK_WIDTHS

    def resolved_depths(self) -> tuple[int, ...] | None:
        if self.group_depths is not None:
            return self.group_depths
        if self.effective_scale == "full":
            return VGG_CONVS if self.backbone == "vgg_groups" else RESNET_BLOCKS
        return None

    def graph(self, in_channels: int, variant: str | None = None) -> ModelGraph:
        try:
            return build_graph(
                variant or self.variant, self.backbone,
                channel_widths=self.resolved_widths(), group_depths=self.resolved_depths(),
                tap_channels=self.tap_channels, in_channels=in_channels, fuse_on=self.fuse_on,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer(self) -> OptimizerConfig:
        base = dict(FINETUNE_OPTIMIZER[self.backbone] if self.effective_scale == "full" else DESK_OPTIMIZER)
        for key in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, key) is not None:
                base[key] = getattr(self, key)
        try:
            return OptimizerConfig(max_iterations=self.max_iterations, snapshot_every=self.snapshot_every,
                                   seed=self.seed, **base)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def load_options(self) -> LoadOptions:
        return LoadOptions(green_only=self.green_only, rescale=self.rescale)

    def dataset_dir(self, dataset: str | Dataset | None = None) -> Path:
        ds = Dataset.parse(dataset or self.dataset)
        if self.data_dir and (dataset is None or ds is self.dataset_enum):
            return Path(self.data_dir)
        root = self.data_root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"no data location: set data_dir, data_root or ${DATA_ROOT_ENV}")
        return Path(root) / ds.value

    def resolved(self) -> dict:
        """Every field plus the concrete values the presets resolve to."""
        d = asdict(self)
        d["channel_widths"] = list(self.resolved_widths())
        depths = self.resolved_depths()
        d["group_depths"] = list(depths) if depths is not None else None
        opt = self.optimizer()
        d.update(learning_rate=opt.learning_rate, momentum=opt.momentum, weight_decay=opt.weight_decay)
        d["alpha"] = list(self.alpha) if self.alpha is not None else None
        d["scale"] = self.effective_scale
        # locations do not change results; keep artifacts comparable across directories
        for key in ("output_dir", "data_dir", "data_root"):
            d.pop(key)
        return d

    def to_json(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def read_config_file(path, _seen: set | None = None) -> dict[str, str]:
    path = Path(path)
    seen = _seen or set()
    if path.resolve() in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(path.resolve())
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "include":
            inc = Path(value)
            values.update(read_config_file(inc if inc.is_absolute() else path.parent / inc, seen))
        else:
            values[key] = value
    return values
