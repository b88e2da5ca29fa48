import csv
import hashlib
import io
import subprocess
import sys

import numpy as np
import pytest

from btsdsn.cli import main
from btsdsn.dataio import load_dataset, load_probability_map
from btsdsn.synth import MAX_VESSEL_FRACTION, MIN_VESSEL_FRACTION, generate
from oracles import make_fake_dataset

TOY = ["--channel-widths", "2,4,8,16"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.reader(io.StringIO("\n".join(lines))))


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "-n", "6", "--size", "16", "--seed", "1"]) == 0
    return root


def _train_args(root, out, *extra):
    return ["train", "--dataset", "SYNTHETIC", "--data-dir", str(root), "--output-dir", str(out),
            "--max-iterations", "8", "--snapshot-every", "4", *TOY, *extra]


def test_synth_corpus(synth_root):
    split = load_dataset(synth_root, "SYNTHETIC")
    assert split.sizes == (4, 1, 1)
    for s in generate(4, size=128, seed=0):
        assert MIN_VESSEL_FRACTION < s.truth.mean() < MAX_VESSEL_FRACTION
    a, b = generate(2, 32, seed=9), generate(2, 32, seed=9)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.truth, y.truth) for x, y in zip(a, b))


def test_synth_loads_four_samples(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "-n", "4", "--size", "128"]) == 0
    split = load_dataset(tmp_path, "SYNTHETIC")
    assert sum(split.sizes) == 4


def test_train_artifacts_and_determinism(synth_root, tmp_path, capsys):
    assert main(_train_args(synth_root, tmp_path / "a")) == 0
    assert "iter 4 " in capsys.readouterr().out
    assert main(_train_args(synth_root, tmp_path / "b")) == 0
    for name in ("train_log.csv", "config.txt"):
        assert (tmp_path / "a" / name).is_file()
    assert sha(tmp_path / "a" / "train_log.csv") == sha(tmp_path / "b" / "train_log.csv")
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("# config: {") and '"seed": 0' in log[0]
    assert len(rows(tmp_path / "a" / "train_log.csv")) == 3
    assert (tmp_path / "a" / "best.ckpt").is_file()


def test_eval_rows_and_predict(synth_root, tmp_path):
    assert main(_train_args(synth_root, tmp_path / "run")) == 0
    ckpt = tmp_path / "run" / "best.ckpt"
    out = tmp_path / "eval.csv"
    argv = ["eval", "--checkpoint", str(ckpt), "--dataset", "SYNTHETIC", "--data-dir", str(synth_root),
            "--out", str(out), "--prob-dir", str(tmp_path / "probs")]
    assert main(argv) == 0
    r = rows(out)
    assert r[0] == ["image", "dataset", "variant", "backbone", "mode", "SE", "SP", "ACC", "AUC", "MCC", "F1"]
    assert len(r) - 1 == 1 + 1  # |test| + mean row
    assert r[-1][0] == "mean"
    first = sha(out)
    assert main(argv) == 0 and sha(out) == first
    image = next((synth_root / "images").iterdir())
    assert main(["predict", "--checkpoint", str(ckpt), "--image", str(image), "--mode", "patch",
                 "--out-prob", str(tmp_path / "p.png"), "--out-bin", str(tmp_path / "b.png")]) == 0
    prob = load_probability_map(tmp_path / "p.png")
    assert prob.shape == (16, 16)
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--dataset", "SYNTHETIC",
                 "--data-dir", str(synth_root)]) == 1


def test_ablate_schema_and_reproducibility(synth_root, tmp_path):
    base = ["ablate", "--dataset", "SYNTHETIC", "--data-dir", str(synth_root), "--max-iterations", "4",
            "--snapshot-every", "2", "--augment", "none", *TOY]
    a, b = tmp_path / "a" / "ablate.csv", tmp_path / "b" / "ablate.csv"
    assert main([*base, "--output-dir", str(tmp_path / "a"), "--out", str(a)]) == 0
    assert main([*base, "--output-dir", str(tmp_path / "b"), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    r = rows(a)
    assert r[0] == ["dataset", "variant", "backbone", "mode", "SE", "SP", "ACC", "AUC", "MCC", "F1"]
    assert [x[1] for x in r[1:]] == ["HED", "DSN", "BS-DSN", "BTS-DSN"]
    c = tmp_path / "c.csv"
    assert main(["ablate", "--dataset", "SYNTHETIC", "--data-dir", str(synth_root), "--max-iterations", "2",
                 "--augment", "none", "--backbone", "resnet", *TOY, "--output-dir", str(tmp_path / "c"),
                 "--out", str(c)]) == 0
    assert [x[1] for x in rows(c)[1:]] == ["DSN", "BS-DSN", "BTS-DSN"]


@pytest.fixture(scope="module")
def cross_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_fake_dataset(root / "STARE", "STARE", size=(24, 24), seed=1)
    make_fake_dataset(root / "DRIVE", "DRIVE", size=(24, 26), seed=2)
    return root


def test_crosstrain_stare_to_drive(cross_root, tmp_path):
    base = ["cross-train", "--train-dataset", "STARE", "--test-dataset", "DRIVE", "--data-root", str(cross_root),
            "--max-iterations", "6", "--snapshot-every", "3", *TOY]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main([*base, "--output-dir", str(tmp_path / "ra"), "--out", str(a)]) == 0
    assert main([*base, "--output-dir", str(tmp_path / "rb"), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    r = rows(a)
    assert r[0] == ["train_dataset", "test_dataset", "SE", "SP", "ACC", "AUC"]
    assert r[1][:2] == ["STARE", "DRIVE"]
    assert all(0 <= float(v) <= 1 for v in r[1][2:])


def test_crosstrain_same_dataset_is_usage_error(cross_root, tmp_path, capsys):
    code = main(["cross-train", "--train-dataset", "DRIVE", "--test-dataset", "DRIVE", "--data-root",
                 str(cross_root), "--output-dir", str(tmp_path)])
    assert code == 2
    assert "different" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert main(["train", "--dataset", "FOO"]) == 2
    assert main(["bogus"]) == 2
    assert main(["train", "--max-iterations", "x"]) == 2
    assert main(["augment-plan", "KITTI"]) == 2
    assert main(["model", "describe", "--variant", "HED", "--backbone", "resnet"]) == 2


def test_missing_data_is_runtime_error(tmp_path):
    assert main(["train", "--dataset", "STARE", "--data-dir", str(tmp_path / "missing"),
                 "--output-dir", str(tmp_path / "o")]) == 1


def test_augment_plan_and_describe(capsys):
    assert main(["augment-plan", "CHASE_DB1"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 17
    assert main(["model", "describe", "--variant", "BTS-DSN", "--channel-widths", "2,4,8,16"]) == 0
    out = capsys.readouterr().out
    assert "msg4_1.weight,1x16x3x3,learnable" in out and "up8.kernel,16x16,fixed" in out


def test_module_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "btsdsn", "train", "--dataset", "FOO"], capture_output=True,
                          text=True)
    assert proc.returncode == 2
    assert "unknown dataset" in proc.stderr
