import hashlib
import json
import os

import numpy as np
import pytest

from grasptk.cli import main


def _digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


TINY_MODEL = {
    "feat_dim": 16,
    "sa_widths": [8, 12, 14, 16],
    "head_dim": 8,
    "heads": 2,
    "time_hidden": 16,
    "task_dim": 8,
    "steps": 5,
    "group_k": 4,
    "epochs": 1,
    "lr": 0.001,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset + trained pipeline shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run")
    os.makedirs(run, exist_ok=True)
    dcfg = root / "dataset.json"
    dcfg.write_text(json.dumps({"n_targets": 2, "n_points": 96, "families": ["boxes"]}))
    assert main(["dataset", "gen", "--config", str(dcfg), "--seed", "0", "--out", data]) in (0, None)
    tcfg = root / "train.json"
    tcfg.write_text(json.dumps({"model": TINY_MODEL}))
    for stage in ("contact", "part", "direction"):
        assert main(["train", stage, "--data", data, "--config", str(tcfg),
                     "--seed", "0", "--out", run]) in (0, None)
    return root, data, run


def test_dataset_gen_deterministic(workspace, tmp_path):
    root, data, run = workspace
    again = str(tmp_path / "data2")
    dcfg = root / "dataset.json"
    assert main(["dataset", "gen", "--config", str(dcfg), "--seed", "0", "--out", again]) in (0, None)
    with open(os.path.join(data, "manifest.json")) as fh:
        m1 = json.load(fh)
    with open(os.path.join(again, "manifest.json")) as fh:
        m2 = json.load(fh)
    assert m1["file_hashes"] == m2["file_hashes"]


def test_train_outputs_exist(workspace):
    root, data, run = workspace
    for stage in ("contact", "part", "direction"):
        assert os.path.exists(os.path.join(run, f"{stage}.ckpt"))
        assert os.path.exists(os.path.join(run, f"{stage}_curve.csv"))
    with open(os.path.join(run, "pipeline.json")) as fh:
        manifest = json.load(fh)
    assert set(manifest["stages"]) == {"contact", "part", "direction"}


def test_train_rerun_bitwise_identical(workspace, tmp_path):
    root, data, run = workspace
    run2 = str(tmp_path / "run2")
    tcfg = root / "train.json"
    assert main(["train", "contact", "--data", data, "--config", str(tcfg),
                 "--seed", "0", "--out", run2]) in (0, None)
    assert _digest(os.path.join(run, "contact.ckpt")) == _digest(
        os.path.join(run2, "contact.ckpt"))
    assert _digest(os.path.join(run, "contact_curve.csv")) == _digest(
        os.path.join(run2, "contact_curve.csv"))


def test_transfer_deterministic(workspace, tmp_path):
    root, data, run = workspace
    with open(os.path.join(data, "manifest.json")) as fh:
        manifest = json.load(fh)
    rec = manifest["samples"][0]
    template = os.path.join(data, rec["template_base"] + ".xyz")
    target = os.path.join(data, rec["target_base"] + ".xyz")
    out1 = str(tmp_path / "t1.maps")
    out2 = str(tmp_path / "t2.maps")
    args = ["transfer", "--manifest", os.path.join(run, "pipeline.json"),
            "--template", template, "--target", target,
            "--task", str(rec["task"]), "--seed", "7"]
    assert main(args + ["--out", out1]) in (0, None)
    assert main(args + ["--out", out2]) in (0, None)
    assert _digest(out1) == _digest(out2)


def test_synthesize_deterministic_and_valid(workspace, tmp_path):
    root, data, run = workspace
    with open(os.path.join(data, "manifest.json")) as fh:
        manifest = json.load(fh)
    rec = manifest["samples"][0]
    obj = os.path.join(data, rec["target_base"] + ".xyz")
    maps = os.path.join(data, rec["target_base"] + ".maps")
    shape_json = tmp_path / "shape.json"
    shape_json.write_text(json.dumps({**rec["target_spec"],
                                      "transform": rec["target_transform"]}))
    out1 = str(tmp_path / "g1.q")
    out2 = str(tmp_path / "g2.q")
    args = ["synthesize", "--maps", maps, "--object", obj, "--hand",
            os.path.join(data, "hand.spec"), "--shape", str(shape_json)]
    assert main(args + ["--out", out1]) in (0, None)
    assert main(args + ["--out", out2]) in (0, None)
    assert _digest(out1) == _digest(out2)
    assert os.path.exists(str(tmp_path / "g1_energy.csv"))
    from grasptk.hand import load_hand_spec
    from grasptk.synthesis import load_grasp

    hand = load_hand_spec(os.path.join(data, "hand.spec"))
    q = load_grasp(out1, hand)
    assert q.shape == (hand.dof,)
    assert np.isfinite(q).all()


def test_eval_runs_and_is_deterministic(workspace, tmp_path):
    root, data, run = workspace
    out1 = str(tmp_path / "eval1.csv")
    out2 = str(tmp_path / "eval2.csv")
    args = ["eval", "--dir", data, "--manifest", os.path.join(run, "pipeline.json"),
            "--split", "test", "--seed", "0"]
    assert main(args + ["--out", out1]) in (0, None)
    assert main(args + ["--out", out2]) in (0, None)
    assert _digest(out1) == _digest(out2)
    lines = open(out1).read().strip().splitlines()
    assert lines[0] == "sample,pen_norm,pen_mm,coverage_pct,contact_error"
    assert len(lines) >= 2


def test_inspect_writes_ply(workspace, tmp_path):
    root, data, run = workspace
    with open(os.path.join(data, "manifest.json")) as fh:
        manifest = json.load(fh)
    rec = manifest["samples"][0]
    out = str(tmp_path / "viz")
    assert main(["inspect", "--dir", data, "--sample", rec["target_base"],
                 "--out", out]) in (0, None)
    for name in ("contact.ply", "part.ply", "direction.ply"):
        path = os.path.join(out, name)
        assert os.path.exists(path)
        assert open(path).readline().strip() == "ply"


def test_cli_reports_errors_cleanly(tmp_path, capsys):
    code = main(["transfer", "--manifest", str(tmp_path / "missing.json"),
                 "--template", "x.xyz", "--target", "y.xyz", "--task", "0",
                 "--out", str(tmp_path / "o.maps")])
    assert code not in (None, 0)
