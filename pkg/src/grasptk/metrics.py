"""Desk-scale evaluation metrics: penetration depth, contact coverage,
contact error.

Penetration depth follows the object-into-hand reading (max depth of object
points inside the hand's capsule shells); the opposite direction
(hand-into-object) is also provided since the synthesis regularizer uses
it.  Distances are in normalized object units; the physical-scale constant
converts to millimeters for reporting.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation
from .geometry import PointCloud, shape_signed_distance
from .hand import HandSpec, forward_kinematics

DEFAULT_OBJECT_RADIUS_M = 0.1  # physical radius a unit-normalized object maps to


def to_millimeters(normalized, object_radius_m=DEFAULT_OBJECT_RADIUS_M):
    return normalized * object_radius_m * 1000.0


def _world_capsules(spec: HandSpec, q):
    """Per-link world capsule segments: (p0, p1, radius)."""
    rots, trans, _, _ = forward_kinematics(spec, q)
    caps = []
    for i, link in enumerate(spec.links):
        r = rots[i].data
        t = trans[i].data
        a = t  # capsule starts at the link origin, runs along local +x
        b = t + r @ np.array([2.0 * link.capsule_half_length, 0.0, 0.0])
        caps.append((a, b, link.capsule_radius))
    return caps


def hand_capsule_sdf(spec: HandSpec, q, query):
    """Signed distance from query points to the union of link capsules."""
    query = np.atleast_2d(np.asarray(query, dtype=np.float64))
    best = np.full(len(query), np.inf)
    for a, b, r in _world_capsules(spec, q):
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-18:
            d = np.linalg.norm(query - a, axis=1) - r
        else:
            t = np.clip((query - a) @ ab / denom, 0.0, 1.0)
            closest = a[None, :] + t[:, None] * ab[None, :]
            d = np.linalg.norm(query - closest, axis=1) - r
        best = np.minimum(best, d)
    return best


def penetration_depth(obj: PointCloud, spec: HandSpec, q) -> float:
    """Max penetration of object points into the hand capsules (0 if disjoint)."""
    sd = hand_capsule_sdf(spec, q, obj.points)
    return float(np.maximum(-sd, 0.0).max())


def penetration_depth_hand_into_object(shape, spec: HandSpec, q) -> float:
    """Max penetration of hand surface points into the object."""
    surface = forward_kinematics(spec, q)[3]
    sd = shape_signed_distance(shape, surface.points)
    return float(np.maximum(-sd, 0.0).max())


def contact_coverage(obj: PointCloud, spec: HandSpec, q, band: float, shape=None) -> float:
    """Percentage of hand surface points within +/- band of the object surface.

    With an analytic `shape`, the distance is the exact signed distance;
    otherwise the nearest object-point distance is used.
    """
    if band <= 0:
        raise ContractViolation("band must be positive")
    surface = forward_kinematics(spec, q)[3]
    if shape is not None:
        d = np.abs(shape_signed_distance(shape, surface.points))
    else:
        from .geometry import nearest_distances

        d, _ = nearest_distances(surface.points, obj.points)
    return 100.0 * float((d <= band).mean())


def contact_error(c_hat, c_truth) -> float:
    """Root-mean-square difference between two contact maps."""
    a = np.asarray(c_hat, dtype=np.float64).reshape(-1)
    b = np.asarray(c_truth, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ContractViolation("contact maps must have equal length")
    return float(np.sqrt(((a - b) ** 2).mean()))
