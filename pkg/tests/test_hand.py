import numpy as np
import pytest

import grasptk.autodiff as ad
import grasptk.hand as hand
from grasptk.errors import ContractViolation


@pytest.fixture(scope="module")
def toy():
    return hand.build_toyhand3()


def test_toyhand3_layout(toy):
    assert toy.dof == 12
    assert toy.part_count == 7
    assert toy.n_surface_points == sum(l.n_samples for l in toy.links)
    parts, links = toy.surface_parts()
    assert len(parts) == toy.n_surface_points
    assert parts.max() == toy.part_count - 1


def test_shadowlike_layout():
    sh = hand.build_shadowlike()
    assert sh.dof == 6 + sum(1 for l in sh.links if l.joint_type == "revolute")
    assert sh.part_count == 16


def test_rotation_from_axis_angle_matches_scipy():
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(0)
    for _ in range(5):
        w = rng.normal(size=3)
        r = hand.rotation_from_axis_angle(ad.tensor(w)).data
        np.testing.assert_allclose(r, Rotation.from_rotvec(w).as_matrix(), atol=1e-10)


def test_fk_root_translation(toy):
    q0 = hand.mid_limit_config(toy)
    s0 = hand.hand_surface(toy, q0)
    q1 = q0.copy()
    q1[:3] += np.array([0.1, -0.2, 0.3])
    s1 = hand.hand_surface(toy, q1)
    delta = np.broadcast_to(np.array([0.1, -0.2, 0.3]), s0.points.shape)
    np.testing.assert_allclose(s1.points - s0.points, delta, atol=1e-12)


def test_fk_root_rotation(toy):
    from scipy.spatial.transform import Rotation

    q0 = hand.mid_limit_config(toy)
    w = np.array([0.3, -0.1, 0.2])
    q1 = q0.copy()
    q1[3:6] = w
    s0 = hand.hand_surface(toy, q0).points
    s1 = hand.hand_surface(toy, q1).points
    np.testing.assert_allclose(s1, s0 @ Rotation.from_rotvec(w).as_matrix().T, atol=1e-10)


def test_fk_rejects_wrong_dof(toy):
    with pytest.raises(ContractViolation):
        hand.hand_surface(toy, np.zeros(toy.dof + 1))


def test_fk_gradients_match_fd(toy):
    rng = np.random.default_rng(4)
    q = hand.mid_limit_config(toy) + rng.normal(size=toy.dof) * 0.1
    w = rng.normal(size=(toy.n_surface_points, 3))

    def f(t):
        if isinstance(t, ad.Tensor):
            _, _, surf, _ = hand.forward_kinematics(toy, t)
            return (surf * w).sum()
        _, _, surf, _ = hand.forward_kinematics(toy, t)
        return float((surf.data * w).sum())

    assert ad.check_gradient(f, q, eps=1e-6) < 1e-5


def test_joint_limit_penalty(toy):
    q = hand.mid_limit_config(toy)
    assert hand.joint_limit_penalty(toy, q).item() == pytest.approx(0.0)
    q_bad = q.copy()
    upper0 = [l.upper for l in toy.links if l.joint_type == "revolute"][0]
    q_bad[6] = upper0 + 0.5
    assert hand.joint_limit_penalty(toy, q_bad).item() == pytest.approx(0.25)


def test_part_centers_and_keypoints_shapes(toy):
    q = hand.mid_limit_config(toy)
    centers = hand.part_centers(toy, q)
    assert centers.shape == (toy.part_count, 3)
    kp = hand.keypoint_positions(toy, q)
    assert kp.shape == (len(toy.keypoints), 3)


def test_surface_points_on_capsules(toy):
    q = hand.mid_limit_config(toy)
    surf = hand.hand_surface(toy, q)
    rots, trans, _, _ = hand.forward_kinematics(toy, q)
    for i, link in enumerate(toy.links):
        idx = np.where(surf.link_ids == i)[0]
        pts = surf.points[idx]
        a = trans[i].data
        ab = rots[i].data @ np.array([2.0 * link.capsule_half_length, 0.0, 0.0])
        t = np.clip((pts - a) @ ab / (ab @ ab), 0.0, 1.0)
        closest = a + t[:, None] * ab
        shell = np.abs(np.linalg.norm(pts - closest, axis=1) - link.capsule_radius)
        assert shell.max() < 1e-9


def test_hand_spec_io_roundtrip(tmp_path, toy):
    path = tmp_path / "hand.spec"
    hand.save_hand_spec(path, toy)
    loaded = hand.load_hand_spec(path)
    assert loaded.spec_hash() == toy.spec_hash()
    q = hand.mid_limit_config(toy)
    np.testing.assert_allclose(hand.hand_surface(loaded, q).points,
                               hand.hand_surface(toy, q).points, atol=1e-15)


def test_spec_hash_sensitive_to_geometry(toy):
    other = hand.build_toyhand3(samples_per_link=24)
    assert other.spec_hash() != toy.spec_hash()
