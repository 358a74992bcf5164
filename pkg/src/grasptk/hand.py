"""Configurable articulated hand with differentiable forward kinematics.

A hand is a tree of links.  Each non-root link attaches to its parent
through a fixed offset transform followed by an optional revolute joint
about a fixed axis.  Link surfaces are capsule shells sampled at a fixed
density; each link belongs to exactly one of B parts.  The configuration
vector is q = [root translation (3), root rotation axis-angle (3), joint
angles (k-6)].

Forward kinematics is written against the autodiff Tensor type so every
world quantity (surface points, part centers, keypoints) is differentiable
with respect to q.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, DegenerateInput

_EX = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
_EY = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
_EZ = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])


@dataclass
class Link:
    name: str
    parent: int  # -1 for root
    offset: np.ndarray  # fixed local translation from parent frame (3,)
    joint_type: str  # "revolute" or "fixed"
    axis: np.ndarray  # unit 3-vector (revolute only)
    lower: float
    upper: float
    part: int
    capsule_radius: float
    capsule_half_length: float
    n_samples: int

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)
        if self.joint_type not in ("revolute", "fixed"):
            raise ContractViolation(f"bad joint type '{self.joint_type}'")
        if self.joint_type == "revolute":
            n = np.linalg.norm(self.axis)
            if abs(n - 1.0) > 1e-9:
                self.axis = self.axis / n
            if self.lower > self.upper:
                raise ContractViolation("joint lower limit exceeds upper limit")


def _capsule_shell(radius, half_length, n, seed):
    """Deterministic sample of a capsule shell along +x from the link origin.

    The capsule spans [0, 2*half_length] along x so the link origin sits at
    the joint end.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    ux, rest = u[:, 0], u[:, 1:]
    rho = np.linalg.norm(rest, axis=1)
    # radial extent of a capsule centered at origin, axis x
    with np.errstate(divide="ignore"):
        t_cyl = radius / np.maximum(rho, 1e-300)
    ax = np.abs(ux)
    disc = np.maximum(radius**2 - (1.0 - ax * ax) * half_length**2, 0.0)
    t_cap = half_length * ax + np.sqrt(disc)
    t = np.where((t_cyl * ax <= half_length) & (rho > 1e-12), t_cyl, t_cap)
    pts = t[:, None] * u
    pts[:, 0] += half_length  # shift so the capsule starts at the origin
    return pts


@dataclass
class HandSpec:
    """Immutable kinematic description of a hand."""

    name: str
    links: list
    part_count: int
    keypoints: list  # (link index, local 3-vector)
    template_seed: int = 1234
    _templates: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.part_count < 1:
            raise ContractViolation("part count must be >= 1")
        for i, link in enumerate(self.links):
            if link.parent >= i:
                raise ContractViolation("links must be topologically ordered (parent before child)")
            if not 0 <= link.part < self.part_count:
                raise ContractViolation(f"link '{link.name}' part id out of range")
        if self.links[0].parent != -1 or any(l.parent == -1 for l in self.links[1:]):
            raise ContractViolation("exactly the first link may be the root")
        if not self._templates:
            self._templates = [
                _capsule_shell(l.capsule_radius, l.capsule_half_length, l.n_samples,
                               self.template_seed + i)
                for i, l in enumerate(self.links)
            ]

    @property
    def dof(self):
        return 6 + sum(1 for l in self.links if l.joint_type == "revolute")

    @property
    def n_surface_points(self):
        return sum(l.n_samples for l in self.links)

    def link_templates(self):
        return self._templates

    def surface_parts(self):
        """Per-surface-point part label and link id arrays."""
        parts, links = [], []
        for i, l in enumerate(self.links):
            parts.extend([l.part] * l.n_samples)
            links.extend([i] * l.n_samples)
        return np.array(parts), np.array(links)

    def spec_hash(self):
        h = hashlib.sha256()
        for l in self.links:
            h.update(
                f"{l.name}|{l.parent}|{l.offset.tolist()}|{l.joint_type}|{l.axis.tolist()}|"
                f"{l.lower}|{l.upper}|{l.part}|{l.capsule_radius}|{l.capsule_half_length}|"
                f"{l.n_samples};".encode()
            )
        h.update(f"B={self.part_count};K={self.keypoints};seed={self.template_seed}".encode())
        return h.hexdigest()[:16]


@dataclass
class HandSurface:
    points: np.ndarray  # M x 3 world frame
    part_labels: np.ndarray  # M ints in [0, B)
    link_ids: np.ndarray  # M ints


# -- rotation helpers (Tensor) ----------------------------------------------


def _skew_t(w):
    """[w]x as a Tensor from a length-3 Tensor."""
    wx, wy, wz = w[0], w[1], w[2]
    return wx * ad.tensor(_EX) + wy * ad.tensor(_EY) + wz * ad.tensor(_EZ)


def rotation_from_axis_angle(w):
    """Rodrigues rotation from an axis-angle Tensor (3,)."""
    theta = ad.sqrt(ad.sum_(w * w) + 1e-24)
    k = _skew_t(w)
    a = ad.sin(theta) / theta
    b = (1.0 - ad.cos(theta)) / (theta * theta)
    return ad.tensor(np.eye(3)) + a * k + b * (k @ k)


def rotation_about_fixed_axis(axis, angle):
    """Rotation about a constant unit axis by a scalar Tensor angle."""
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    kt = ad.tensor(k)
    return ad.tensor(np.eye(3)) + ad.sin(angle) * kt + (1.0 - ad.cos(angle)) * (kt @ kt)


# -- forward kinematics ------------------------------------------------------


def _check_q(spec, q):
    k = q.shape[0] if isinstance(q, ad.Tensor) else len(q)
    if k != spec.dof:
        raise ContractViolation(f"q has {k} entries, spec '{spec.name}' needs {spec.dof}")


def forward_kinematics(spec: HandSpec, q):
    """World transforms per link plus the labeled hand surface.

    q may be a plain array (fast path still goes through Tensors) or a
    Tensor for gradient flow.  Returns (rotations, translations,
    surface_points_tensor, HandSurface) where rotations/translations are
    lists of Tensors per link.
    """
    qt = q if isinstance(q, ad.Tensor) else ad.tensor(np.asarray(q, dtype=np.float64))
    _check_q(spec, qt)
    t_root = qt[0:3]
    w_root = qt[3:6]
    r_root = rotation_from_axis_angle(w_root)

    rots, trans = [], []
    angle_idx = 6
    for i, link in enumerate(spec.links):
        if link.parent == -1:
            r_parent, t_parent = r_root, t_root
            r_joint = None
        else:
            r_parent, t_parent = rots[link.parent], trans[link.parent]
            r_joint = None
        if link.joint_type == "revolute":
            r_joint = rotation_about_fixed_axis(link.axis, qt[angle_idx])
            angle_idx += 1
        t_world = t_parent + r_parent @ ad.tensor(link.offset)
        r_world = r_parent @ r_joint if r_joint is not None else r_parent
        rots.append(r_world)
        trans.append(t_world)

    pieces = []
    for i, link in enumerate(spec.links):
        local = spec.link_templates()[i]
        world = ad.tensor(local) @ ad.transpose(rots[i]) + ad.reshape(trans[i], (1, 3))
        pieces.append(world)
    surface_t = ad.concat(pieces, axis=0)
    parts, link_ids = spec.surface_parts()
    surface = HandSurface(surface_t.data.copy(), parts, link_ids)
    return rots, trans, surface_t, surface


def hand_surface(spec: HandSpec, q) -> HandSurface:
    """Non-gradient convenience wrapper around forward_kinematics."""
    return forward_kinematics(spec, q)[3]


def joint_angles(spec: HandSpec, q):
    qt = q if isinstance(q, ad.Tensor) else ad.tensor(np.asarray(q, dtype=np.float64))
    _check_q(spec, qt)
    return qt[6:]


def joint_limit_penalty(spec: HandSpec, q):
    """E_q = ||relu(theta - upper) + relu(lower - theta)||^2 (Tensor scalar)."""
    theta = joint_angles(spec, q)
    lowers = np.array([l.lower for l in spec.links if l.joint_type == "revolute"])
    uppers = np.array([l.upper for l in spec.links if l.joint_type == "revolute"])
    over = ad.relu(theta - ad.tensor(uppers))
    under = ad.relu(ad.tensor(lowers) - theta)
    v = over + under
    return ad.sum_(v * v)


def part_centers(spec: HandSpec, q):
    """B x 3 Tensor of per-part surface centroids."""
    _, _, surface_t, _ = forward_kinematics(spec, q)
    parts, _ = spec.surface_parts()
    rows = []
    for b in range(spec.part_count):
        idx = np.where(parts == b)[0]
        if len(idx) == 0:
            raise DegenerateInput(f"part {b} has no surface samples")
        rows.append(ad.mean_(surface_t[idx], axis=0, keepdims=True))
    return ad.concat(rows, axis=0)


def keypoint_positions(spec: HandSpec, q):
    """K x 3 Tensor of world keypoint positions."""
    rots, trans, _, _ = forward_kinematics(spec, q)
    rows = []
    for link_idx, local in spec.keypoints:
        p = rots[link_idx] @ ad.tensor(np.asarray(local, dtype=np.float64)) + trans[link_idx]
        rows.append(ad.reshape(p, (1, 3)))
    return ad.concat(rows, axis=0)


def mid_limit_config(spec: HandSpec):
    """q with zero root pose and all joints at their limit midpoints."""
    q = np.zeros(spec.dof)
    mids = [(l.lower + l.upper) / 2.0 for l in spec.links if l.joint_type == "revolute"]
    q[6:] = mids
    return q


# -- bundled specs -----------------------------------------------------------


def build_toyhand3(samples_per_link=48) -> HandSpec:
    """Three 2-link fingers on a small palm: k = 12, B = 7.

    Link capsules are kept short enough that every surface point lies
    within ~0.09 of its part centroid, so the default reliability
    thresholds (0.1 in normalized object units) keep clean contacts.
    """
    links = []
    links.append(
        Link("palm", -1, np.zeros(3), "fixed", np.array([0.0, 0.0, 1.0]), 0.0, 0.0, 0,
             0.045, 0.055, samples_per_link)
    )
    finger_roots = [
        (np.array([0.11, 0.07, 0.0]), 1),
        (np.array([0.11, -0.07, 0.0]), 3),
        (np.array([0.11, 0.0, 0.06]), 5),
    ]
    for f, (root_offset, part0) in enumerate(finger_roots):
        links.append(
            Link(f"f{f}_prox", 0, root_offset, "revolute", np.array([0.0, 0.0, 1.0])
                 if part0 != 5 else np.array([0.0, 1.0, 0.0]),
                 -0.3, 1.6, part0, 0.028, 0.065, samples_per_link)
        )
        links.append(
            Link(f"f{f}_dist", len(links) - 1, np.array([0.13, 0.0, 0.0]), "revolute",
                 np.array([0.0, 0.0, 1.0]) if part0 != 5 else np.array([0.0, 1.0, 0.0]),
                 -0.1, 1.8, part0 + 1, 0.025, 0.06, samples_per_link)
        )
    keypoints = [(2, np.array([0.13, 0.0, 0.0])), (4, np.array([0.13, 0.0, 0.0])),
                 (6, np.array([0.13, 0.0, 0.0]))]
    return HandSpec("toyhand3", links, 7, keypoints)


def build_shadowlike(samples_per_link=32) -> HandSpec:
    """Five 3-link fingers plus a 2-dof wrist and thumb base: k = 24, B = 16.

    The B=16 partition is palm (wrist + palm + thumb base) and 3 parts per
    finger; a recorded convention, not a canonical segmentation.
    """
    links = []
    links.append(Link("wrist1", -1, np.zeros(3), "revolute", np.array([1.0, 0.0, 0.0]),
                      -0.5, 0.5, 0, 0.03, 0.02, samples_per_link // 2))
    links.append(Link("wrist2", 0, np.array([0.02, 0.0, 0.0]), "revolute",
                      np.array([0.0, 1.0, 0.0]), -0.6, 0.6, 0, 0.03, 0.02,
                      samples_per_link // 2))
    links.append(Link("palm", 1, np.array([0.03, 0.0, 0.0]), "fixed",
                      np.array([0.0, 0.0, 1.0]), 0.0, 0.0, 0, 0.05, 0.07, samples_per_link))
    palm_idx = 2
    ys = [0.075, 0.0375, 0.0, -0.0375]
    for f in range(4):
        parent = palm_idx
        base = np.array([0.14, ys[f], 0.0])
        for seg in range(3):
            links.append(
                Link(f"f{f}_seg{seg}", parent, base if seg == 0 else np.array([0.085, 0.0, 0.0]),
                     "revolute", np.array([0.0, 0.0, 1.0]), -0.26, 1.57,
                     1 + 3 * f + seg, 0.022, 0.04, samples_per_link)
            )
            parent = len(links) - 1
    # thumb: extra base joint (part of palm part) + 3 segments
    links.append(Link("thumb_base", palm_idx, np.array([0.05, 0.11, 0.0]), "revolute",
                      np.array([1.0, 0.0, 0.0]), -1.0, 1.0, 0, 0.025, 0.02,
                      samples_per_link // 2))
    parent = len(links) - 1
    for seg in range(3):
        links.append(
            Link(f"thumb_seg{seg}", parent, np.array([0.05, 0.0, 0.0]) if seg == 0
                 else np.array([0.075, 0.0, 0.0]), "revolute",
                 np.array([0.0, 0.0, 1.0]), -0.7, 1.3, 13 + seg, 0.024, 0.035,
                 samples_per_link)
        )
        parent = len(links) - 1
    keypoint_links = [5, 8, 11, 14, 18]  # distal segment of each finger/thumb
    keypoints = [(i, np.array([0.08, 0.0, 0.0])) for i in keypoint_links]
    return HandSpec("shadowlike", links, 16, keypoints)


BUNDLED_HANDS = {"toyhand3": build_toyhand3, "shadowlike": build_shadowlike}


# -- file format -------------------------------------------------------------


def save_hand_spec(path, spec: HandSpec):
    with open(path, "w") as fh:
        fh.write("handspec v1\n")
        fh.write(f"name {spec.name}\n")
        fh.write(f"parts {spec.part_count}\n")
        fh.write(f"template_seed {spec.template_seed}\n")
        for l in spec.links:
            fh.write(
                "link "
                f"{l.name} {l.parent} "
                f"{l.offset[0]:.17g} {l.offset[1]:.17g} {l.offset[2]:.17g} "
                f"{l.joint_type} {l.axis[0]:.17g} {l.axis[1]:.17g} {l.axis[2]:.17g} "
                f"{l.lower:.17g} {l.upper:.17g} {l.part} "
                f"{l.capsule_radius:.17g} {l.capsule_half_length:.17g} {l.n_samples}\n"
            )
        for link_idx, local in spec.keypoints:
            local = np.asarray(local)
            fh.write(f"keypoint {link_idx} {local[0]:.17g} {local[1]:.17g} {local[2]:.17g}\n")


def load_hand_spec(path) -> HandSpec:
    links, keypoints = [], []
    name, parts, seed = None, None, 1234
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "handspec v1":
            raise ContractViolation(f"bad hand-spec header '{header}'")
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "name":
                name = tok[1]
            elif tok[0] == "parts":
                parts = int(tok[1])
            elif tok[0] == "template_seed":
                seed = int(tok[1])
            elif tok[0] == "link":
                links.append(
                    Link(tok[1], int(tok[2]), np.array([float(t) for t in tok[3:6]]),
                         tok[6], np.array([float(t) for t in tok[7:10]]),
                         float(tok[10]), float(tok[11]), int(tok[12]),
                         float(tok[13]), float(tok[14]), int(tok[15]))
                )
            elif tok[0] == "keypoint":
                keypoints.append((int(tok[1]), np.array([float(t) for t in tok[2:5]])))
            else:
                raise ContractViolation(f"unknown hand-spec record '{tok[0]}'")
    if name is None or parts is None:
        raise ContractViolation("hand-spec file missing name/parts")
    return HandSpec(name, links, parts, keypoints, template_seed=seed)
