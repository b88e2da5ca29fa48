import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from btsdsn.model import (DESK_WIDTHS, TOY_WIDTHS, CheckpointError, CheckpointMismatchError, GraphConfigError,
                          ModelGraph, _upsample, bilinear_kernel, build_graph, checkpoint_load, checkpoint_save,
                          describe, forward, graph_from_checkpoint, init_params, layer_shapes, full_graph)

VARIANTS = ["HED", "DSN", "BS-DSN", "BTS-DSN"]
RESNET_VARIANTS = ["DSN", "BS-DSN", "BTS-DSN"]
# HED needs a fifth group, which the ResNet backbone does not have
COMBOS = [(v, "vgg_groups") for v in VARIANTS] + [(v, "resnet_groups") for v in RESNET_VARIANTS]


@pytest.mark.parametrize("variant, flags", [
    ("HED", (5, False, False)), ("DSN", (4, False, False)),
    ("BS-DSN", (4, True, False)), ("BTS-DSN", (4, True, True)),
])
def test_variant_flags(variant, flags):
    g = build_graph(variant)
    assert (g.num_sides, g.bottom_top, g.top_bottom) == flags


def test_strides_per_backbone():
    assert build_graph("DSN").group_strides == [1, 2, 4, 8]
    assert build_graph("DSN", "resnet_groups").group_strides == [2, 4, 8, 16]


def test_inconsistent_flags_rejected():
    with pytest.raises(GraphConfigError):
        build_graph("DSN", top_bottom=True)
    with pytest.raises(GraphConfigError):
        build_graph("HED", bottom_top=True, top_bottom=True)
    with pytest.raises(GraphConfigError):
        build_graph("HED", "resnet_groups")
    with pytest.raises(GraphConfigError):
        build_graph("DSN", num_sides=1, bottom_top=True)
    with pytest.raises(ValueError):
        build_graph("UNET")


def test_h_init_and_seed_determinism():
    g = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    p = init_params(g, seed=3)
    assert p.h.tolist() == [0.25] * 4
    assert init_params(g, seed=3).equal(p)
    assert not init_params(g, seed=4).equal(p)
    assert init_params(build_graph("HED", channel_widths=TOY_WIDTHS), 0).h.tolist() == pytest.approx([0.2] * 5)


def test_bilinear_kernel_closed_form():
    k = bilinear_kernel(2)
    assert k.shape == (4, 4)
    assert k[1, 1] == k[1, 2] == k[2, 1] == k[2, 2] == 9 / 16
    w = np.array([0.25, 0.75, 0.75, 0.25])
    np.testing.assert_array_equal(k, np.outer(w, w))
    assert bilinear_kernel(8).shape == (16, 16)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4, 8, 16]), st.integers(1, 7), st.integers(1, 7), st.integers(0, 999))
def test_fixed_upsampling_is_bilinear_with_edge_clamp(f, h, w, seed):
    g = build_graph("DSN", "resnet_groups", channel_widths=TOY_WIDTHS)
    p = init_params(g, 0, dtype=torch.float64)
    x = torch.from_numpy(np.random.default_rng(seed).random((1, 2, h, w)))
    ours = _upsample(x, f, p, h * f, w * f)
    ref = F.interpolate(x, scale_factor=f, mode="bilinear", align_corners=False)
    torch.testing.assert_close(ours, ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("variant, backbone", COMBOS)
@pytest.mark.parametrize("size", [(64, 64), (37, 50)])
def test_shapes_and_channel_accounting(backbone, variant, size):
    g = build_graph(variant, backbone, channel_widths=DESK_WIDTHS)
    p = init_params(g, seed=0)
    H, W = size
    out = forward(g, p, np.random.default_rng(0).random((H, W, 3)), return_features=True)
    assert len(out.side_logits) == g.num_sides
    for z, q in zip(out.side_logits, out.side_probs):
        assert z.shape == (H, W)
        torch.testing.assert_close(q, torch.sigmoid(z), rtol=0, atol=0)
    assert out.fuse_prob.shape == (H, W)
    assert bool(((out.fuse_prob > 0) & (out.fuse_prob < 1)).all())
    for m in range(1, g.num_sides + 1):
        c = out.features[f"feat_conv{m}_fuse"].shape[1]
        if m == 1:
            assert c == (17 if g.top_bottom else 16)
        else:
            assert c == (17 if g.bottom_top else 16)


def test_full_widths_accounting():
    # layer shapes only: full-width forward is too slow for a unit test
    g = full_graph("BTS-DSN", "vgg_groups")
    s = layer_shapes(g)
    assert s["conv4_3.weight"] == (512, 512, 3, 3)
    assert s["tap1.weight"] == (16, 64, 1, 1)
    assert s["msg4_1.weight"] == (1, 512, 3, 3)
    assert s["side1.weight"] == (1, 17, 1, 1)
    assert s["msg1_2.weight"] == (1, 17, 1, 1)
    r = layer_shapes(full_graph("DSN", "resnet_groups"))
    assert r["res4_23.c.weight"] == (1024, 256, 1, 1)
    assert r["side4.weight"] == (1, 16, 1, 1)


@pytest.mark.parametrize("variant, backbone", COMBOS)
def test_fusion_linearity_at_logit_level(backbone, variant):
    g = build_graph(variant, backbone, channel_widths=TOY_WIDTHS)
    p = init_params(g, seed=2, dtype=torch.float64)
    p.tensors["fuse.h"] = torch.linspace(-0.7, 1.3, g.num_sides, dtype=torch.float64)
    img = np.random.default_rng(1).random((32, 32, 3))
    out = forward(g, p, img)
    manual = sum(float(p.h[m]) * out.side_logits[m] for m in range(g.num_sides))
    assert float((out.fuse_logit - manual).abs().max()) <= 1e-12
    p2 = p.clone()
    p2.tensors["fuse.h"] = 2 * p.h
    doubled = forward(g, p2, img).fuse_logit
    assert float((doubled - 2 * out.fuse_logit).abs().max()) <= 1e-12


def test_constant_bias_network():
    g = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    p = init_params(g, seed=0, dtype=torch.float64)
    biases = [0.3, -1.2, 2.0, 0.0]
    for name, t in p.tensors.items():
        if name != "fuse.h":
            t.zero_()
    for m, b in enumerate(biases, 1):
        p.tensors[f"side{m}.bias"].fill_(b)
    out = forward(g, p, np.random.default_rng(0).random((16, 20, 3)))
    for m, b in enumerate(biases):
        assert torch.all(out.side_probs[m] == torch.sigmoid(torch.tensor(b, dtype=torch.float64)))
    assert torch.allclose(out.fuse_logit, torch.full((16, 20), sum(biases) / 4, dtype=torch.float64), atol=1e-15)


def test_single_pixel_hand_composition():
    g = build_graph("DSN", num_sides=1, channel_widths=(1,), group_depths=(1,), tap_channels=1, in_channels=1)
    p = init_params(g, seed=5, dtype=torch.float64)
    v = {k: t.numpy().ravel() for k, t in p.tensors.items()}
    for k in v:
        if k.endswith(".bias"):
            p.tensors[k].fill_(0.1)
    v = {k: t.numpy().ravel().copy() for k, t in p.tensors.items()}
    # 3x3 conv on a zero-padded 1x1 image only sees its center tap
    x = 1.0 - g.input_mean
    group = max(0.0, v["conv1_1.weight"][4] * x + v["conv1_1.bias"][0])
    tap = v["tap1.weight"][0] * group + v["tap1.bias"][0]
    side = v["side1.weight"][0] * tap + v["side1.bias"][0]
    out = forward(g, p, np.ones((1, 1, 1)))
    assert float(out.side_logits[0][0, 0]) == pytest.approx(side, abs=1e-15)
    assert float(out.fuse_logit[0, 0]) == pytest.approx(v["fuse.h"][0] * side, abs=1e-15)
    # M = 1 with h = 1: the fused map is the single side map
    p.tensors["fuse.h"].fill_(1.0)
    out = forward(g, p, np.ones((1, 1, 1)))
    assert torch.equal(out.fuse_prob, out.side_probs[0])


def test_forward_is_deterministic():
    g = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    p = init_params(g, seed=0)
    img = np.random.default_rng(0).random((24, 24, 3))
    assert torch.equal(forward(g, p, img).fuse_prob, forward(g, p, img).fuse_prob)


def test_undersized_input_rejected():
    g = build_graph("DSN", "resnet_groups", channel_widths=TOY_WIDTHS)
    with pytest.raises(ValueError, match="stride"):
        forward(g, init_params(g, 0), np.zeros((8, 40, 3)))


def test_params_for_other_graph_rejected():
    g = build_graph("DSN", channel_widths=TOY_WIDTHS)
    p = init_params(build_graph("BS-DSN", channel_widths=TOY_WIDTHS), 0)
    with pytest.raises(CheckpointMismatchError):
        forward(g, p, np.zeros((16, 16, 3)))


def test_one_entry_per_declared_layer():
    g = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    p = init_params(g, 0)
    assert list(p.tensors) == list(layer_shapes(g))
    assert {n for n, _, k in describe(g) if k == "fixed"} == set(p.fixed)


@pytest.mark.parametrize("variant", VARIANTS)
def test_topological_order_is_valid(variant):
    g = build_graph(variant)
    order = g.topological_order()
    pos = {n: i for i, n in enumerate(order)}
    for node, deps in g.dependencies().items():
        assert all(pos[d] < pos[node] for d in deps)
    if g.top_bottom:
        assert g.dependencies()["feat_4_1"] == {"group4"}


def test_checkpoint_round_trip(tmp_path):
    g = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    p = init_params(g, seed=9, alpha=(1, 2, 3, 4))
    checkpoint_save(p, tmp_path / "a.ckpt", g, extra={"note": "x"})
    q = checkpoint_load(tmp_path / "a.ckpt", g)
    assert q.equal(p) and q.seed == 9 and q.graph_hash == g.config_hash()
    assert graph_from_checkpoint(q) == g
    assert q.meta["extra"] == {"note": "x"}


def test_checkpoint_mismatch_and_corruption(tmp_path):
    g = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    checkpoint_save(init_params(g, 0), tmp_path / "a.ckpt", g)
    with pytest.raises(CheckpointMismatchError):
        checkpoint_load(tmp_path / "a.ckpt", build_graph("DSN", channel_widths=TOY_WIDTHS))
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "bad.ckpt")
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "trunc.ckpt")
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "missing.ckpt")


def test_pretrained_backbone(tmp_path):
    g = build_graph("DSN", channel_widths=TOY_WIDTHS)
    src = init_params(g, seed=1)
    checkpoint_save(src, tmp_path / "bb.ckpt", g)
    bts = build_graph("BTS-DSN", channel_widths=TOY_WIDTHS)
    p = init_params(bts, seed=2, pretrained=tmp_path / "bb.ckpt")
    assert torch.equal(p.tensors["conv3_1.weight"], src.tensors["conv3_1.weight"])
    assert not torch.equal(p.tensors["tap1.weight"], src.tensors["tap1.weight"])
    with pytest.raises(CheckpointMismatchError):
        init_params(build_graph("DSN", channel_widths=DESK_WIDTHS), 0, pretrained=tmp_path / "bb.ckpt")


def test_graph_dict_round_trip():
    g = build_graph("BS-DSN", "resnet_groups", channel_widths=TOY_WIDTHS)
    assert ModelGraph.from_dict(g.to_dict()) == g
    assert g.config_hash() != build_graph("BTS-DSN", "resnet_groups", channel_widths=TOY_WIDTHS).config_hash()
