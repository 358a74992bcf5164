import numpy as np
import pytest

import grasptk.autodiff as ad
import grasptk.hand as hand
import grasptk.synthesis as syn
from grasptk.errors import ContractViolation
from grasptk.geometry import PointCloud, ShapeSpec, sample_surface
from grasptk.maps import MapParams, MapTriple, ground_truth_maps
from grasptk.metrics import contact_coverage, penetration_depth_hand_into_object


@pytest.fixture(scope="module")
def toy():
    return hand.build_toyhand3()


@pytest.fixture(scope="module")
def sphere_setup(toy):
    spec = ShapeSpec("sphere", {"radius": 0.6})
    cloud = sample_surface(spec, 256, seed=0)
    q = hand.mid_limit_config(toy)
    q[0:3] = np.array([0.75, 0.0, 0.0])
    q[3:6] = np.array([0.0, 0.0, np.pi])
    maps = ground_truth_maps(cloud, toy, q, MapParams(gamma=12.0))
    return spec, cloud, q, maps


def test_weights_validation():
    with pytest.raises(ContractViolation):
        syn.SynthesisWeights(l_cont=-1.0)
    with pytest.raises(ContractViolation):
        syn.SynthesisWeights(steps=0)


def test_contact_energy_zero_at_truth(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    params = MapParams(gamma=12.0)
    e_self = syn.contact_energy(cloud, toy, q, maps.contact, params).item()
    q_far = q.copy()
    q_far[0:3] += np.array([0.5, 0.5, 0.0])
    e_far = syn.contact_energy(cloud, toy, q_far, maps.contact, params).item()
    assert e_self < 1e-3
    assert e_far > 10 * e_self


def test_contact_energy_gradient_matches_fd(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    params = MapParams(gamma=12.0)
    rng = np.random.default_rng(1)
    q_probe = q + rng.normal(size=toy.dof) * 0.05

    def f(t):
        return syn.contact_energy(cloud, toy, t, maps.contact, params)

    assert ad.check_gradient(f, q_probe, eps=1e-6) < 1e-4


def test_direction_energy_bounds_and_gradient(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    e = syn.direction_energy(cloud, toy, q, maps.direction, maps.part, maps.contact)
    assert -1.0 - 1e-9 <= e.item() <= 1.0 + 1e-9

    rng = np.random.default_rng(2)
    q_probe = q + rng.normal(size=toy.dof) * 0.05

    def f(t):
        return syn.direction_energy(cloud, toy, t, maps.direction, maps.part, maps.contact)

    assert ad.check_gradient(f, q_probe, eps=1e-6) < 1e-4


def test_penetration_energy_zero_outside_positive_inside(toy):
    spec = ShapeSpec("sphere", {"radius": 0.5})
    q_out = hand.mid_limit_config(toy)
    q_out[0] = 2.0
    assert syn.penetration_energy(spec, toy, q_out).item() == pytest.approx(0.0)
    q_in = hand.mid_limit_config(toy)
    q_in[0:3] = 0.0
    assert syn.penetration_energy(spec, toy, q_in).item() > 0.1


def test_penetration_energy_gradient_matches_fd(toy):
    spec = ShapeSpec("sphere", {"radius": 0.5})
    rng = np.random.default_rng(3)
    q = hand.mid_limit_config(toy)
    q[0:3] = np.array([0.45, 0.1, 0.0])
    q += rng.normal(size=toy.dof) * 0.02

    def f(t):
        return syn.penetration_energy(spec, toy, t)

    assert ad.check_gradient(f, q, eps=1e-6) < 1e-4


def test_keypoint_energy_gradient_matches_fd(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    rng = np.random.default_rng(4)
    q_probe = q + rng.normal(size=toy.dof) * 0.05

    def f(t):
        return syn.keypoint_energy(cloud, toy, t)

    assert ad.check_gradient(f, q_probe, eps=1e-6) < 1e-4


def test_joint_limit_energy_gradient_matches_fd(toy):
    rng = np.random.default_rng(5)
    q = hand.mid_limit_config(toy) + rng.normal(size=toy.dof) * 0.8

    def f(t):
        return hand.joint_limit_penalty(toy, t)

    assert ad.check_gradient(f, q, eps=1e-6) < 1e-4


def test_init_config_outside_object(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    q0 = syn.init_config(cloud, toy, maps)
    assert np.linalg.norm(q0[0:3]) > np.linalg.norm(cloud.points, axis=1).max()


def test_synthesize_runs_exact_steps_and_best_non_increasing(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    w = syn.SynthesisWeights(steps=40)
    q_opt, report = syn.synthesize_grasp(cloud, spec, toy, maps, weights=w,
                                         map_params=MapParams(gamma=12.0))
    assert len(report.rows) == 40
    best = report.best_so_far()
    assert (np.diff(best) <= 1e-15).all()
    assert not report.fault
    l_syn = np.array([r[-1] for r in report.rows])
    assert best[-1] <= l_syn[0]


def test_synthesize_improves_from_shifted_start(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    q0 = q.copy()
    q0[0:3] += np.array([0.15, 0.1, -0.05])
    w = syn.SynthesisWeights(steps=80)
    q_opt, report = syn.synthesize_grasp(cloud, spec, toy, maps, q0=q0, weights=w,
                                         map_params=MapParams(gamma=12.0))
    assert report.rows[-1][-1] < report.rows[0][-1]
    from grasptk.geometry import NormalizationTransform, NormalizedShape
    shape = NormalizedShape(spec, NormalizationTransform(np.zeros(3), 1.0))
    assert penetration_depth_hand_into_object(shape, toy, q_opt) < 0.05


def test_synthesize_without_object_spec(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    w = syn.SynthesisWeights(steps=5)
    q_opt, report = syn.synthesize_grasp(cloud, None, toy, maps, weights=w)
    assert (np.array([r[2] for r in report.rows]) == 0.0).all()


def test_energy_report_csv(tmp_path):
    rep = syn.EnergyReport()
    rep.add(1.0, -0.5, 0.0, 0.0, 0.2, 0.7)
    rep.add(0.9, -0.6, 0.0, 0.0, 0.1, 0.5)
    path = tmp_path / "report.csv"
    rep.save_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("step,e_cont")
    assert len(lines) == 3


def test_grasp_io_roundtrip(tmp_path, toy):
    rng = np.random.default_rng(6)
    q = rng.normal(size=toy.dof)
    path = tmp_path / "grasp.q"
    syn.save_grasp(path, q, toy)
    loaded = syn.load_grasp(path, toy)
    np.testing.assert_array_equal(loaded, q)


def test_contact_coverage_metric_behaves(sphere_setup, toy):
    spec, cloud, q, maps = sphere_setup
    near = contact_coverage(cloud, toy, q, band=0.05)
    q_far = q.copy()
    q_far[0] += 2.0
    far = contact_coverage(cloud, toy, q_far, band=0.05)
    assert near > far
    assert far == pytest.approx(0.0)
