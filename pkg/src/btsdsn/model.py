"""Deeply-supervised side-output network with short connections.

The graph is declarative (``ModelGraph``) and parameters live in a flat,
named tensor set (``Params``); ``forward`` is a pure function of the two plus
an image. Variants:

=========  =====  ==========  ==========
variant    sides  bottom-top  top-bottom
=========  =====  ==========  ==========
HED        5      no          no
DSN        4      no          no
BS-DSN     4      yes         no
BTS-DSN    4      yes         yes
=========  =====  ==========  ==========
"""
from __future__ import annotations

import graphlib
import hashlib
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

VARIANTS = ("HED", "DSN", "BS-DSN", "BTS-DSN")
BACKBONES = ("vgg_groups", "resnet_groups")
CHECKPOINT_VERSION = 1

VARIANT_FLAGS = {
    "HED": (5, False, False),
    "DSN": (4, False, False),
    "BS-DSN": (4, True, False),
    "BTS-DSN": (4, True, True),
}

# desk-scale and full-scale channel presets
DESK_WIDTHS = (8, 16, 32, 64)
TOY_WIDTHS = (2, 4, 8, 16)
FULL_WIDTHS = {
    "vgg_groups": (64, 128, 256, 512, 512),
    "resnet_groups": (64, 256, 512, 1024),
}
VGG_CONVS = (2, 2, 3, 3, 3)
RESNET_BLOCKS = (3, 4, 23)  # res2, res3, res4


class GraphConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or structurally invalid."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint was produced for a different graph."""


def normalize_variant(name: str) -> str:
    key = name.strip().upper().replace("_", "-")
    aliases = {"BSDSN": "BS-DSN", "BTSDSN": "BTS-DSN"}
    key = aliases.get(key.replace("-", ""), key)
    if key not in VARIANTS:
        raise GraphConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return key


def normalize_backbone(name: str) -> str:
    key = name.strip().lower()
    key = {"vgg": "vgg_groups", "resnet": "resnet_groups"}.get(key, key)
    if key not in BACKBONES:
        raise GraphConfigError(f"unknown backbone {name!r}; expected one of {BACKBONES}")
    return key


@dataclass(frozen=True)
class ModelGraph:
    backbone: str = "vgg_groups"
    num_sides: int = 4
    bottom_top: bool = True
    top_bottom: bool = True
    tap_channels: int = 16
    channel_widths: tuple[int, ...] = DESK_WIDTHS
    # vgg: 3x3 convs per group; resnet: bottleneck blocks for groups 2..M
    group_depths: tuple[int, ...] = (2, 2, 2, 2)
    in_channels: int = 3
    fuse_on: str = "logits"
    input_mean: float = 0.5
    variant: str = "custom"

    @property
    def group_strides(self) -> list[int]:
        if self.backbone == "vgg_groups":
            return [2 ** g for g in range(self.num_sides)]
        return [2 ** (g + 1) for g in range(self.num_sides)]

    def fuse_channels(self, m: int) -> int:
        """Channels of feat_conv<m>_fuse (1-based side index)."""
        extra = self.top_bottom if m == 1 else self.bottom_top
        return self.tap_channels + int(extra)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        d["group_depths"] = list(self.group_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        d = dict(d)
        d["channel_widths"] = tuple(d["channel_widths"])
        d["group_depths"] = tuple(d["group_depths"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dependencies(self) -> dict[str, set[str]]:
        M = self.num_sides
        deps: dict[str, set[str]] = {"input": set()}
        for g in range(1, M + 1):
            deps[f"group{g}"] = {"input" if g == 1 else f"group{g - 1}"}
            deps[f"feat_conv{g}"] = {f"group{g}"}
        if self.top_bottom:
            # taps the raw deepest group output only, which keeps the graph acyclic
            deps[f"feat_{M}_1"] = {f"group{M}"}
        for m in range(1, M + 1):
            parts = {f"feat_conv{m}"}
            if m == 1 and self.top_bottom:
                parts.add(f"feat_{M}_1")
            if m > 1 and self.bottom_top:
                parts.add(f"feat_{m - 1}_{m}")
            deps[f"feat_conv{m}_fuse"] = parts
            deps[f"side{m}"] = {f"feat_conv{m}_fuse"}
            if self.bottom_top and m < M:
                deps[f"feat_{m}_{m + 1}"] = {f"feat_conv{m}_fuse"}
        deps["fuse"] = {f"side{m}" for m in range(1, M + 1)}
        return deps

    def topological_order(self) -> list[str]:
        return list(graphlib.TopologicalSorter(self.dependencies()).static_order())


def validate_graph(g: ModelGraph) -> None:
    if g.backbone not in BACKBONES:
        raise GraphConfigError(f"unknown backbone {g.backbone!r}")
    if g.num_sides < 1:
        raise GraphConfigError("num_sides must be >= 1")
    if (g.bottom_top or g.top_bottom) and g.num_sides < 2:
        raise GraphConfigError("short connections need at least 2 side outputs")
    if g.top_bottom and not g.bottom_top:
        raise GraphConfigError("top_bottom requires bottom_top (BTS-DSN extends BS-DSN)")
    if g.top_bottom and g.num_sides != 4:
        raise GraphConfigError("top_bottom connection is defined for exactly 4 backbone taps")
    if g.backbone == "resnet_groups" and g.num_sides > 4:
        raise GraphConfigError("resnet_groups provides 4 groups (res5 is dropped); HED needs 5")
    if len(g.channel_widths) != g.num_sides:
        raise GraphConfigError(f"channel_widths has {len(g.channel_widths)} entries, need {g.num_sides}")
    n_depths = g.num_sides if g.backbone == "vgg_groups" else g.num_sides - 1
    if len(g.group_depths) != n_depths:
        raise GraphConfigError(f"group_depths has {len(g.group_depths)} entries, need {n_depths}")
    if g.backbone == "resnet_groups" and any(d < 1 for d in g.group_depths):
        raise GraphConfigError("resnet groups need at least one block each")
    if g.fuse_on not in ("logits", "probs"):
        raise GraphConfigError(f"fuse_on must be 'logits' or 'probs', got {g.fuse_on!r}")
    if min(g.channel_widths) < 1 or g.tap_channels < 1:
        raise GraphConfigError("channel counts must be positive")
    s = g.group_strides
    if any(b <= a for a, b in zip(s, s[1:])):
        raise GraphConfigError("group strides must be strictly increasing")


def build_graph(variant: str = "BTS-DSN", backbone: str = "vgg_groups", *,
                channel_widths: Sequence[int] | None = None,
                group_depths: Sequence[int] | None = None,
                num_sides: int | None = None,
                bottom_top: bool | None = None,
                top_bottom: bool | None = None,
                tap_channels: int = 16,
                in_channels: int = 3,
                fuse_on: str = "logits",
                input_mean: float = 0.5) -> ModelGraph:
    """Resolve a named variant (plus optional explicit overrides) into a graph.

    ``channel_widths`` with 4 entries is extended for the 5-group HED variant
    by repeating the last width.
    """
    variant = normalize_variant(variant)
    backbone = normalize_backbone(backbone)
    m_default, bt_default, tb_default = VARIANT_FLAGS[variant]
    M = m_default if num_sides is None else num_sides
    widths = tuple(channel_widths) if channel_widths is not None else DESK_WIDTHS
    if len(widths) < M:
        widths = widths + (widths[-1],) * (M - len(widths))
    widths = widths[:M]
    if group_depths is None:
        group_depths = (2,) * M if backbone == "vgg_groups" else (1,) * (M - 1)
    else:
        group_depths = tuple(group_depths)
        n = M if backbone == "vgg_groups" else M - 1
        if len(group_depths) < n:
            group_depths = group_depths + (group_depths[-1],) * (n - len(group_depths))
        group_depths = group_depths[:n]
    g = ModelGraph(
        backbone=backbone,
        num_sides=M,
        bottom_top=bt_default if bottom_top is None else bottom_top,
        top_bottom=tb_default if top_bottom is None else top_bottom,
        tap_channels=tap_channels,
        channel_widths=tuple(int(w) for w in widths),
        group_depths=tuple(int(d) for d in group_depths),
        in_channels=in_channels,
        fuse_on=fuse_on,
        input_mean=input_mean,
        variant=variant,
    )
    validate_graph(g)
    return g


def full_graph(variant: str, backbone: str, in_channels: int = 3) -> ModelGraph:
    """Full-width graph: VGG16 conv1-conv4(5), or ResNet-101 conv1/res2-res4."""
    backbone = normalize_backbone(backbone)
    depths = VGG_CONVS if backbone == "vgg_groups" else RESNET_BLOCKS
    return build_graph(variant, backbone, channel_widths=FULL_WIDTHS[backbone],
                       group_depths=depths, in_channels=in_channels)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Params:
    tensors: dict[str, torch.Tensor]
    fixed: dict[str, torch.Tensor]
    alpha: tuple[float, ...]
    graph_hash: str
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> torch.Tensor:
        return self.tensors["fuse.h"]

    def names(self) -> list[str]:
        return list(self.tensors)

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "Params":
        return Params(
            tensors={k: v.detach().clone() for k, v in self.tensors.items()},
            fixed={k: v.detach().clone() for k, v in self.fixed.items()},
            alpha=self.alpha, graph_hash=self.graph_hash, seed=self.seed, meta=dict(self.meta),
        )

    def to(self, dtype: torch.dtype) -> "Params":
        return Params(
            tensors={k: v.detach().to(dtype) for k, v in self.tensors.items()},
            fixed={k: v.to(dtype) for k, v in self.fixed.items()},
            alpha=self.alpha, graph_hash=self.graph_hash, seed=self.seed, meta=dict(self.meta),
        )

    def requires_grad_(self, flag: bool = True) -> "Params":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def equal(self, other: "Params") -> bool:
        if self.tensors.keys() != other.tensors.keys() or self.fixed.keys() != other.fixed.keys():
            return False
        same = lambda a, b: a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
        return (all(same(self.tensors[k], other.tensors[k]) for k in self.tensors)
                and all(same(self.fixed[k], other.fixed[k]) for k in self.fixed)
                and tuple(self.alpha) == tuple(other.alpha))


def bilinear_kernel(factor: int) -> np.ndarray:
    """Exact bilinear interpolation kernel of size ``2f - f % 2``."""
    size = 2 * factor - factor % 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size, dtype=np.float64)
    w = 1.0 - np.abs(og - center) / factor
    return np.outer(w, w)


def layer_shapes(graph: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Every learnable entry with its shape, in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = graph.in_channels
    widths = graph.channel_widths

    def conv(name, cout, cin_, k):
        shapes[f"{name}.weight"] = (cout, cin_, k, k)
        shapes[f"{name}.bias"] = (cout,)

    if graph.backbone == "vgg_groups":
        for g in range(1, graph.num_sides + 1):
            for k in range(1, graph.group_depths[g - 1] + 1):
                conv(f"conv{g}_{k}", widths[g - 1], cin, 3)
                cin = widths[g - 1]
    else:
        conv("conv1", widths[0], cin, 7)
        cin = widths[0]
        for g in range(2, graph.num_sides + 1):
            cout = widths[g - 1]
            mid = max(1, cout // 4)
            for b in range(1, graph.group_depths[g - 2] + 1):
                prefix = f"res{g}_{b}"
                conv(f"{prefix}.a", mid, cin, 1)
                conv(f"{prefix}.b", mid, mid, 3)
                conv(f"{prefix}.c", cout, mid, 1)
                if b == 1:
                    conv(f"{prefix}.proj", cout, cin, 1)
                cin = cout
    M = graph.num_sides
    for m in range(1, M + 1):
        conv(f"tap{m}", graph.tap_channels, widths[m - 1], 1)
    if graph.top_bottom:
        conv(f"msg{M}_1", 1, widths[M - 1], 3)
    for m in range(1, M + 1):
        if graph.bottom_top and m < M:
            conv(f"msg{m}_{m + 1}", 1, graph.fuse_channels(m), 1)
        conv(f"side{m}", 1, graph.fuse_channels(m), 1)
    shapes["fuse.h"] = (M,)
    return shapes


def _is_backbone(name: str) -> bool:
    return name.startswith("conv") or name.startswith("res")


def init_params(graph: ModelGraph, seed: int = 0, pretrained=None,
                alpha: Sequence[float] | None = None, dtype: torch.dtype = torch.float32) -> Params:
    """Seeded initialization.

    Backbone kernels ~ N(0, 2 / fan_in); tap, message and side kernels
    ~ N(0, 1 / fan_in); biases 0; fusion weights 1/M. Upsampling kernels are
    fixed bilinear weights. ``pretrained`` (a checkpoint path or Params)
    overrides backbone entries, which must match in shape.
    """
    validate_graph(graph)
    rng = np.random.default_rng(seed)
    M = graph.num_sides
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in layer_shapes(graph).items():
        if name == "fuse.h":
            arr = np.full(shape, 1.0 / M)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 2.0 if _is_backbone(name) else 1.0
            arr = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        tensors[name] = torch.from_numpy(arr).to(dtype)
    fixed = {
        f"up{f}.kernel": torch.from_numpy(bilinear_kernel(f)).to(dtype)
        for f in sorted(set(graph.group_strides)) if f > 1
    }
    alpha = tuple(float(a) for a in (alpha if alpha is not None else [1.0] * M))
    if len(alpha) != M:
        raise GraphConfigError(f"alpha needs {M} entries, got {len(alpha)}")
    params = Params(tensors=tensors, fixed=fixed, alpha=alpha, graph_hash=graph.config_hash(), seed=seed)
    if pretrained is not None:
        _load_backbone(params, pretrained)
    return params


def _load_backbone(params: Params, pretrained) -> None:
    src = pretrained if isinstance(pretrained, Params) else checkpoint_load(pretrained)
    problems = []
    for name, t in src.tensors.items():
        if not _is_backbone(name) or name not in params.tensors:
            continue
        want = tuple(params.tensors[name].shape)
        if tuple(t.shape) != want:
            problems.append(f"{name}: checkpoint {tuple(t.shape)} vs graph {want}")
            continue
        params.tensors[name] = t.detach().to(params.tensors[name].dtype).clone()
    if problems:
        raise CheckpointMismatchError("backbone shape mismatch:\n  " + "\n  ".join(problems))


# ---------------------------------------------------------------------------
# forward


@dataclass
class SideOutputs:
    side_logits: list[torch.Tensor]
    side_probs: list[torch.Tensor]
    fuse_logit: torch.Tensor
    fuse_prob: torch.Tensor
    # feat_conv<m>_fuse tensors, only when requested
    features: dict[str, torch.Tensor] | None = None


def _conv(x, params, name, stride=1, padding=0):
    t = params.tensors
    return F.conv2d(x, t[f"{name}.weight"], t[f"{name}.bias"], stride=stride, padding=padding)


def _upsample(x: torch.Tensor, factor: int, params: Params, H: int, W: int) -> torch.Tensor:
    if factor == 1:
        return x[:, :, :H, :W]
    c = x.shape[1]
    k = params.fixed[f"up{factor}.kernel"].to(x.dtype)
    weight = k.expand(c, 1, *k.shape).contiguous()
    # one replicated border pixel keeps full kernel support at the image edges
    x = F.pad(x, (1, 1, 1, 1), mode="replicate")
    x = F.conv_transpose2d(x, weight, stride=factor, padding=factor // 2, groups=c)
    return x[:, :, factor:factor + H, factor:factor + W]


def _backbone(graph: ModelGraph, params: Params, x: torch.Tensor) -> list[torch.Tensor]:
    outs = []
    if graph.backbone == "vgg_groups":
        h = x
        for g in range(1, graph.num_sides + 1):
            if g > 1:
                h = F.max_pool2d(h, 2, 2, ceil_mode=True)
            for k in range(1, graph.group_depths[g - 1] + 1):
                h = F.relu(_conv(h, params, f"conv{g}_{k}", padding=1))
            outs.append(h)
        return outs
    h = F.relu(_conv(x, params, "conv1", stride=2, padding=3))
    outs.append(h)
    for g in range(2, graph.num_sides + 1):
        if g == 2:
            h = F.max_pool2d(h, 3, 2, padding=1)
        for b in range(1, graph.group_depths[g - 2] + 1):
            prefix = f"res{g}_{b}"
            stride = 2 if (b == 1 and g > 2) else 1
            y = F.relu(_conv(h, params, f"{prefix}.a", stride=stride))
            y = F.relu(_conv(y, params, f"{prefix}.b", padding=1))
            y = _conv(y, params, f"{prefix}.c")
            shortcut = _conv(h, params, f"{prefix}.proj", stride=stride) if b == 1 else h
            h = F.relu(y + shortcut)
        outs.append(h)
    return outs


def _as_input(graph: ModelGraph, image, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image, dtype=dtype)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] != graph.in_channels:
        raise ValueError(f"expected HxWx{graph.in_channels} image, got shape {tuple(x.shape)}")
    return (x - graph.input_mean).permute(2, 0, 1).unsqueeze(0)


def check_input_size(graph: ModelGraph, H: int, W: int) -> None:
    s = max(graph.group_strides)
    if H < s or W < s:
        raise ValueError(f"input {H}x{W} is smaller than the largest group stride {s}")


def forward(graph: ModelGraph, params: Params, image, return_features: bool = False) -> SideOutputs:
    """Side logits/probabilities and the fused map, all at input resolution."""
    if params.graph_hash != graph.config_hash():
        raise CheckpointMismatchError("params were created for a different graph")
    H, W = int(np.shape(image)[0]), int(np.shape(image)[1])
    check_input_size(graph, H, W)
    dtype = params.tensors["fuse.h"].dtype
    x = _as_input(graph, image, dtype)
    M = graph.num_sides
    strides = graph.group_strides

    groups = _backbone(graph, params, x)
    feats = [_upsample(_conv(groups[m], params, f"tap{m + 1}"), strides[m], params, H, W) for m in range(M)]

    fused: list[torch.Tensor] = []
    if graph.top_bottom:
        msg = _upsample(_conv(groups[-1], params, f"msg{M}_1", padding=1), strides[-1], params, H, W)
        fused.append(torch.cat([feats[0], msg], dim=1))
    else:
        fused.append(feats[0])
    for m in range(1, M):
        if graph.bottom_top:
            msg = _conv(fused[m - 1], params, f"msg{m}_{m + 1}")
            fused.append(torch.cat([feats[m], msg], dim=1))
        else:
            fused.append(feats[m])

    side_logits = [_conv(fused[m], params, f"side{m + 1}")[0, 0] for m in range(M)]
    side_probs = [torch.sigmoid(z) for z in side_logits]
    h = params.tensors["fuse.h"]
    terms = side_logits if graph.fuse_on == "logits" else side_probs
    fuse_logit = sum(h[m] * terms[m] for m in range(M))
    features = {f"feat_conv{m + 1}_fuse": fused[m] for m in range(M)} if return_features else None
    return SideOutputs(side_logits, side_probs, fuse_logit, torch.sigmoid(fuse_logit), features)


def describe(graph: ModelGraph, params: Params | None = None) -> list[tuple[str, tuple[int, ...], str]]:
    rows = [(name, shape, "learnable") for name, shape in layer_shapes(graph).items()]
    for f in sorted(set(graph.group_strides)):
        if f > 1:
            k = bilinear_kernel(f).shape
            rows.append((f"up{f}.kernel", k, "fixed"))
    return rows


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(params: Params, path, graph: ModelGraph | None = None, extra: dict | None = None) -> None:
    """Write a zip archive of named ``.npy`` tensors plus a JSON header."""
    meta = {
        "format": "btsdsn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "graph_hash": params.graph_hash,
        "seed": params.seed,
        "alpha": list(params.alpha),
        "graph": graph.to_dict() if graph is not None else params.meta.get("graph"),
        "extra": extra if extra is not None else params.meta.get("extra", {}),
    }
    if graph is not None and graph.config_hash() != params.graph_hash:
        raise CheckpointMismatchError("params do not belong to the given graph")
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in params.tensors.items()}
    arrays.update({f"fixed/{k}": v.detach().cpu().numpy() for k, v in params.fixed.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def checkpoint_load(path, graph: ModelGraph | None = None) -> Params:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(bytes(arrays.pop("__meta__")).decode())
    except (zipfile.BadZipFile, ValueError, KeyError, OSError, EOFError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc
    if meta.get("format") != "btsdsn-checkpoint":
        raise CheckpointError(f"{path} is not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if graph is not None and graph.config_hash() != meta["graph_hash"]:
        raise CheckpointMismatchError(
            f"checkpoint graph hash {meta['graph_hash']} does not match graph {graph.config_hash()} ({graph.variant})"
        )
    tensors = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    fixed = {k[len("fixed/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("fixed/")}
    if "fuse.h" not in tensors:
        raise CheckpointError(f"{path} has no fusion weights")
    return Params(
        tensors=tensors, fixed=fixed, alpha=tuple(meta["alpha"]),
        graph_hash=meta["graph_hash"], seed=int(meta["seed"]),
        meta={"graph": meta.get("graph"), "extra": meta.get("extra", {})},
    )


def graph_from_checkpoint(params: Params) -> ModelGraph:
    if not params.meta.get("graph"):
        raise CheckpointError("checkpoint does not embed its graph configuration")
    return ModelGraph.from_dict(params.meta["graph"])
