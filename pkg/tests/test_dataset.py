import json

import numpy as np
import pytest

import grasptk.dataset as ds
import grasptk.hand as hand
from grasptk.errors import ContractViolation
from grasptk.geometry import sample_surface
from grasptk.metrics import contact_coverage, penetration_depth_hand_into_object


@pytest.fixture(scope="module")
def toy():
    return hand.build_toyhand3()


def small_families():
    return [ds.FamilyConfig("spheres", "sphere", {"radius": (0.8, 1.2)},
                            n_targets=1, n_points=256, tasks=[0]),
            ds.FamilyConfig("boxes", "box",
                            {"hx": (0.5, 0.9), "hy": (0.5, 0.9), "hz": (0.5, 0.9)},
                            n_targets=1, n_points=256, tasks=[0])]


def test_family_config_validation():
    with pytest.raises(ContractViolation):
        ds.FamilyConfig("bad", "sphere", {"radius": (1.0, 1.0)})
    with pytest.raises(ContractViolation):
        ds.FamilyConfig("bad", "sphere", {"radius": (0.8, 1.2)}, n_points=10)


def test_default_families_cover_benchmark():
    fams = ds.default_families()
    assert [f.family for f in fams] == ["sphere", "box", "capsule", "superquadric"]
    assert all(f.n_targets == 20 for f in fams)
    assert all(f.tasks == [0, 1, 2, 3] for f in fams)
    assert len(ds.TASK_NAMES) == 4


def test_gen_family_deterministic():
    cfg = small_families()[0]
    t1, targets1 = ds.gen_family(cfg, seed=3)
    t2, targets2 = ds.gen_family(cfg, seed=3)
    assert t1.key() == t2.key()
    assert [s.key() for s in targets1] == [s.key() for s in targets2]
    _, other = ds.gen_family(cfg, seed=4)
    assert [s.key() for s in other] != [s.key() for s in targets1]


def test_desired_contact_regions():
    from grasptk.geometry import ShapeSpec

    cloud = sample_surface(ShapeSpec("sphere", {"radius": 1.0}), 512, seed=0)
    top = ds.desired_contact(0, cloud)
    bottom = ds.desired_contact(2, cloud)
    z = cloud.points[:, 2]
    assert top[z > 0.8].mean() > 0.6
    assert top[z < -0.2].mean() < 0.1
    assert bottom[z < -0.8].mean() > 0.6
    assert (top >= 0).all() and (top <= 0.85 + 1e-9).all()
    with pytest.raises(ContractViolation):
        ds.desired_contact(9, cloud)


def test_fit_grasp_passes_gates(toy):
    from grasptk.geometry import ShapeSpec

    spec = ShapeSpec("sphere", {"radius": 1.0})
    cloud, shape = ds._prepare_object(spec, 512, seed=0)
    q, _ = ds.fit_grasp_to_region(cloud, shape, toy, task_id=0, seed=0)
    pen = penetration_depth_hand_into_object(shape, toy, q)
    cov = contact_coverage(cloud, toy, q, band=ds.PEN_GATE, shape=shape)
    assert pen <= ds.PEN_GATE
    assert cov >= ds.COV_GATE


def test_build_and_load_dataset_roundtrip(tmp_path, toy):
    out = tmp_path / "bench"
    out.mkdir()
    manifest = ds.build_dataset(str(out), toy, families=small_families(), seed=0)
    assert manifest["schema"] == "grasptk-dataset v1"
    assert manifest["map_gamma"] == ds.DATASET_GAMMA
    with open(out / "manifest.json") as fh:
        on_disk = json.load(fh)
    assert on_disk["hand_hash"] == toy.spec_hash()

    loaded_manifest, loaded_hand, records = ds.load_dataset(str(out))
    assert loaded_hand.spec_hash() == toy.spec_hash()
    assert len(records) == len(manifest["samples"]) == 2
    for rec in records:
        assert rec["x_e"].shape[1] == 3
        rec["maps_e"].validate()
        rec["maps_a"].validate()
        assert rec["task"] in (0, 1, 2, 3)
        shape = ds.normalized_shape_from_record(rec, which="target")
        pen = penetration_depth_hand_into_object(shape, toy, rec["q_a"])
        assert pen <= ds.PEN_GATE + 1e-9


def test_dataset_file_hashes_consistent(tmp_path, toy):
    import hashlib

    out = tmp_path / "bench"
    out.mkdir()
    manifest = ds.build_dataset(str(out), toy, families=small_families()[:1], seed=0)
    for rel, digest in manifest["file_hashes"].items():
        with open(out / rel, "rb") as fh:
            assert hashlib.sha256(fh.read()).hexdigest() == digest
