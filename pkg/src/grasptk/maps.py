"""Object-centric contact, part, and direction maps.

Ground-truth maps are derived from a hand configuration and an object
cloud: the contact map is a sigmoid of the nearest hand-surface distance,
the part map one-hot encodes the nearest hand part, and the direction map
points from each object point to the centroid of its assigned part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, DegenerateInput
from .geometry import PointCloud, nearest_distances
from .hand import HandSurface

CONTACT_LABEL_FLOOR = 0.01  # below this, "closest part" is noise; rows go uniform


@dataclass
class MapTriple:
    """contact (N,), part (N, B) row-simplex, direction (N, 3) unit rows."""

    contact: np.ndarray
    part: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.contact = np.asarray(self.contact, dtype=np.float64).reshape(-1)
        self.part = np.asarray(self.part, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = len(self.contact)
        if self.part.shape[0] != n or self.direction.shape != (n, 3):
            raise ContractViolation("map lengths disagree")

    @property
    def n_parts(self):
        return self.part.shape[1]

    def validate(self, atol=1e-6):
        if self.contact.min() < -atol or self.contact.max() > 1 + atol:
            raise ContractViolation("contact values must lie in [0, 1]")
        if self.part.min() < -atol:
            raise ContractViolation("part rows must be non-negative")
        if np.abs(self.part.sum(axis=1) - 1.0).max() > 1e-6:
            raise ContractViolation("part rows must sum to 1 within 1e-6")
        norms = np.linalg.norm(self.direction, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ContractViolation("direction rows must be unit within 1e-6")
        return self


@dataclass
class MapParams:
    gamma: float = 100.0  # contact sharpness in normalized units

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractViolation("gamma must be positive")


def contact_from_distances(distances, gamma):
    """c = 2 * sigmoid(-gamma * d): 1 at contact, -> 0 far away.

    Works for plain arrays and Tensors (differentiable path for E_cont).
    """
    if isinstance(distances, ad.Tensor):
        return 2.0 * ad.sigmoid(-gamma * distances)
    return 2.0 / (1.0 + np.exp(gamma * np.asarray(distances)))


def compute_contact_map(obj: PointCloud, hand: HandSurface, params: MapParams | None = None):
    params = params or MapParams()
    d, _ = nearest_distances(obj.points, hand.points)
    return contact_from_distances(d, params.gamma)


def compute_part_map(obj: PointCloud, hand: HandSurface, n_parts=None):
    """One-hot row per object point at the nearest hand part (ties -> lowest id)."""
    b = int(hand.part_labels.max()) + 1 if n_parts is None else n_parts
    n = len(obj.points)
    dist = np.full((n, b), np.inf)
    for part in range(b):
        idx = np.where(hand.part_labels == part)[0]
        if len(idx) == 0:
            continue
        d, _ = nearest_distances(obj.points, hand.points[idx])
        dist[:, part] = d
    if not np.isfinite(dist).any(axis=1).all():
        raise DegenerateInput("a part in use has no surface points")
    onehot = np.zeros((n, b))
    onehot[np.arange(n), dist.argmin(axis=1)] = 1.0
    return onehot


def compute_direction_map(obj: PointCloud, part_map, centers):
    """Unit vectors from each object point to its assigned part center."""
    centers = np.asarray(centers, dtype=np.float64)
    assign = np.asarray(part_map).argmax(axis=1)
    vec = centers[assign] - obj.points
    norms = np.linalg.norm(vec, axis=1)
    if (norms < 1e-12).any():
        bad = int(np.argmin(norms))
        raise DegenerateInput(f"object point {bad} coincides with its part center")
    return vec / norms[:, None]


def uniform_far_rows(part_map, contact, floor=CONTACT_LABEL_FLOOR):
    """Replace part rows of non-contacted points with the uniform distribution."""
    out = np.array(part_map, dtype=np.float64)
    far = np.asarray(contact) <= floor
    out[far] = 1.0 / part_map.shape[1]
    return out


def exact_part_distances(obj: PointCloud, spec, q):
    """(N, B) distance from each object point to each part's capsule shells.

    Uses the analytic capsule geometry rather than the sampled shell points,
    so the contact kernel is not polluted by surface-sample spacing.
    """
    from .hand import forward_kinematics

    rots, trans, _, _ = forward_kinematics(spec, q)
    n, b = len(obj.points), spec.part_count
    dist = np.full((n, b), np.inf)
    for i, link in enumerate(spec.links):
        a = trans[i].data
        ab = rots[i].data @ np.array([2.0 * link.capsule_half_length, 0.0, 0.0])
        denom = float(ab @ ab)
        if denom < 1e-18:
            t = np.zeros(n)
        else:
            t = np.clip((obj.points - a) @ ab / denom, 0.0, 1.0)
        closest = a[None, :] + t[:, None] * ab[None, :]
        d = np.abs(np.linalg.norm(obj.points - closest, axis=1) - link.capsule_radius)
        dist[:, link.part] = np.minimum(dist[:, link.part], d)
    return dist


def ground_truth_maps(obj: PointCloud, spec, q, params: MapParams | None = None) -> MapTriple:
    """Full labeled MapTriple for a hand configuration on an object.

    Part rows are the nearest-part one-hot at every point, contacted or not,
    so the part field is a dense region labeling rather than a sparse one;
    only contacted rows are ever scored or used downstream.
    """
    from .hand import part_centers

    params = params or MapParams()
    dist = exact_part_distances(obj, spec, q)
    c = contact_from_distances(dist.min(axis=1), params.gamma)
    n = len(obj.points)
    p = np.zeros((n, spec.part_count))
    p[np.arange(n), dist.argmin(axis=1)] = 1.0
    centers = part_centers(spec, q).data
    d = compute_direction_map(obj, p, centers)
    return MapTriple(c, p, d).validate()


# -- file format -------------------------------------------------------------


def save_maps(path, maps: MapTriple):
    n, b = maps.part.shape
    with open(path, "w") as fh:
        fh.write(f"#maps {n} {b}\n")
        for i in range(n):
            row = [f"{maps.contact[i]:.17g}"]
            row += [f"{v:.17g}" for v in maps.part[i]]
            row += [f"{v:.17g}" for v in maps.direction[i]]
            fh.write(" ".join(row) + "\n")


def load_maps(path) -> MapTriple:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "#maps":
            raise ContractViolation(f"bad map-file header in {path}")
        n, b = int(header[1]), int(header[2])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (n, 1 + b + 3):
        raise ContractViolation("map-file body does not match header")
    return MapTriple(data[:, 0], data[:, 1 : 1 + b], data[:, 1 + b :])
