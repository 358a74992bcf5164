import numpy as np
import pytest

import grasptk.hand as hand
import grasptk.metrics as met
from grasptk.geometry import (NormalizationTransform, NormalizedShape, PointCloud, ShapeSpec,
                              sample_surface)


@pytest.fixture(scope="module")
def toy():
    return hand.build_toyhand3()


def test_to_millimeters():
    assert met.to_millimeters(0.02) == pytest.approx(2.0)
    assert met.to_millimeters(0.02, object_radius_m=0.2) == pytest.approx(4.0)


def test_hand_capsule_sdf_signs(toy):
    q = hand.mid_limit_config(toy)
    surf = hand.hand_surface(toy, q)
    on_shell = met.hand_capsule_sdf(toy, q, surf.points[::50])
    # shell points sit on their own capsule; near joints they can be inside
    # a neighboring capsule, so the union distance is <= 0 but never positive
    assert on_shell.max() < 1e-9
    assert on_shell.min() > -max(l.capsule_radius for l in toy.links)
    far = met.hand_capsule_sdf(toy, q, np.array([[5.0, 5.0, 5.0]]))
    assert far[0] > 4.0
    palm = toy.links[0]
    inside = met.hand_capsule_sdf(toy, q, np.array([[palm.capsule_half_length, 0.0, 0.0]]))
    assert inside[0] == pytest.approx(-palm.capsule_radius)


def test_penetration_depth_object_into_hand(toy):
    q = hand.mid_limit_config(toy)
    outside = PointCloud(np.array([[5.0, 0.0, 0.0]]))
    assert met.penetration_depth(outside, toy, q) == pytest.approx(0.0)
    palm = toy.links[0]
    inside = PointCloud(np.array([[palm.capsule_half_length, 0.0, 0.0]]))
    assert met.penetration_depth(inside, toy, q) == pytest.approx(palm.capsule_radius)


def test_penetration_depth_hand_into_object(toy):
    spec = ShapeSpec("sphere", {"radius": 0.5})
    shape = NormalizedShape(spec, NormalizationTransform(np.zeros(3), 1.0))
    q_out = hand.mid_limit_config(toy)
    q_out[0] = 2.0
    assert met.penetration_depth_hand_into_object(shape, toy, q_out) == pytest.approx(0.0)
    q_in = hand.mid_limit_config(toy)
    q_in[0:3] = 0.0
    depth = met.penetration_depth_hand_into_object(shape, toy, q_in)
    assert depth > 0.3


def test_contact_coverage_range_and_shape_gate(toy):
    spec = ShapeSpec("sphere", {"radius": 0.6})
    cloud = sample_surface(spec, 128, seed=0)
    q = hand.mid_limit_config(toy)
    q[0:3] = np.array([0.75, 0.0, 0.0])
    q[3:6] = np.array([0.0, 0.0, np.pi])
    cov = met.contact_coverage(cloud, toy, q, band=0.05)
    assert 0.0 <= cov <= 100.0
    shape = NormalizedShape(spec, NormalizationTransform(np.zeros(3), 1.0))
    cov_exact = met.contact_coverage(cloud, toy, q, band=0.05, shape=shape)
    assert 0.0 <= cov_exact <= 100.0
    cov_tight = met.contact_coverage(cloud, toy, q, band=0.001, shape=shape)
    assert cov_tight <= cov_exact


def test_contact_error_is_rms():
    a = np.array([0.0, 1.0, 0.5])
    b = np.array([0.0, 0.0, 0.5])
    assert met.contact_error(a, b) == pytest.approx(np.sqrt(1.0 / 3.0))
    assert met.contact_error(a, a) == pytest.approx(0.0)
