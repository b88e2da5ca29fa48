import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btsdsn.augment import (PLAN_VERSION, AugmentPlan, TransformSpec, apply_transform, augment_set, default_plan)
from btsdsn.dataio import Dataset, FundusSample
from oracles import rotate90_cw_index


def sample(rng, H=12, W=12, sid="s"):
    return FundusSample(
        id=sid,
        image=rng.random((H, W, 3)),
        truth=(rng.random((H, W)) < 0.2).astype(np.uint8),
        fov=np.ones((H, W), np.uint8),
        source_dataset=Dataset.DRIVE,
    )


@pytest.mark.parametrize("dataset, n", [("DRIVE", 13), ("STARE", 40), ("CHASE_DB1", 16)])
def test_plan_sizes_and_identity_once(dataset, n):
    plan = default_plan(dataset)
    assert len(plan) == n
    identities = [s for s in plan.transforms if all(t.kind == "identity" for t in s)]
    assert len(identities) == 1
    assert len(set(plan.transforms)) == n
    assert plan.version == PLAN_VERSION


def test_plan_is_pure_function_of_dataset():
    assert default_plan("STARE") == default_plan(Dataset.STARE)
    assert default_plan("DRIVE").to_csv() == default_plan("DRIVE").to_csv()


def test_plan_csv_dump():
    lines = default_plan("DRIVE").to_csv().strip().splitlines()
    assert lines[0] == "index,transform,plan_version,dataset"
    assert len(lines) == 14
    assert lines[1].startswith("0,identity,")


def test_unknown_dataset_and_invalid_specs():
    with pytest.raises(ValueError):
        default_plan("KITTI")
    with pytest.raises(ValueError):
        TransformSpec("rotate", angle=0)
    with pytest.raises(ValueError):
        TransformSpec("rotate", angle=360)
    with pytest.raises(ValueError):
        TransformSpec("scale", factor=0)
    with pytest.raises(ValueError):
        TransformSpec("shear")


def test_identity_is_bitwise(rng):
    s = sample(rng)
    out = apply_transform(s, TransformSpec("identity"))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.truth, s.truth)


@pytest.mark.parametrize("kind", ["flip_h", "flip_v"])
def test_flip_involution(rng, kind):
    s = sample(rng)
    t = TransformSpec(kind)
    twice = apply_transform(apply_transform(s, t), t)
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.truth, s.truth)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.data())
def test_rotate90_index_oracle(S, data):
    r = data.draw(st.integers(0, S - 1))
    c = data.draw(st.integers(0, S - 1))
    truth = np.zeros((S, S), np.uint8)
    truth[r, c] = 1
    s = FundusSample("x", np.zeros((S, S, 1)), truth, np.ones((S, S), np.uint8), Dataset.DRIVE)
    out = apply_transform(s, TransformSpec("rotate", angle=90))
    assert list(zip(*np.nonzero(out.truth))) == [rotate90_cw_index(r, c, S)]


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 14), st.integers(4, 14), st.sampled_from(
    [TransformSpec("flip_h"), TransformSpec("flip_v"), TransformSpec("rotate", angle=90.0),
     TransformSpec("rotate", angle=180.0), TransformSpec("rotate", angle=270.0)]), st.integers(0, 99))
def test_exact_transforms_preserve_vessel_count(H, W, t, seed):
    rng = np.random.default_rng(seed)
    S = max(H, W) if t.kind == "rotate" and t.angle != 180 else None
    H, W = (S, S) if S else (H, W)
    s = sample(rng, H, W)
    out = apply_transform(s, t)
    assert out.truth.sum() == s.truth.sum()
    assert out.shape == s.shape


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(default_plan("STARE").transforms + default_plan("CHASE_DB1").transforms), st.integers(0, 99))
def test_every_step_keeps_shape_and_binary_labels(step, seed):
    rng = np.random.default_rng(seed)
    s = sample(rng, 11, 14)
    out = apply_transform(s, step)
    assert out.image.shape == s.image.shape
    assert set(np.unique(out.truth)) <= {0, 1} and set(np.unique(out.fov)) <= {0, 1}
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_rotation_background_is_zero():
    s = FundusSample("x", np.ones((10, 10, 3)), np.ones((10, 10), np.uint8), np.ones((10, 10), np.uint8),
                     Dataset.DRIVE)
    out = apply_transform(s, TransformSpec("rotate", angle=45))
    assert out.image[0, 0].max() == 0 and out.truth[0, 0] == 0 and out.fov[0, 0] == 0


def test_augment_set_order_and_ids(rng):
    samples = [sample(rng, sid=f"s{i}") for i in range(3)]
    plan = default_plan("DRIVE")
    out = augment_set(samples, plan)
    assert len(out) == 39
    assert out[0].id == "s0_a00" and out[13].id == "s1_a00" and out[38].id == "s2_a12"
    assert np.array_equal(out[13].image, samples[1].image)
    assert augment_set([], plan) == []


def test_augment_set_length_is_product(rng):
    plan = AugmentPlan(Dataset.DRIVE, ((TransformSpec("identity"),), (TransformSpec("flip_h"),)))
    assert len(augment_set([sample(rng) for _ in range(5)], plan)) == 10
