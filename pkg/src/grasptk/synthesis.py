"""Energy-based grasp recovery from transferred maps.

Minimizes  L_syn = l_cont*E_cont + l_dir*E_dir + l_h*E_h  over the hand
configuration q with an adaptive-moment optimizer, where
E_h = l_pen*E_pen + l_q*E_q + l_dis*E_dis.  All energies are differentiable
through forward kinematics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .geometry import PointCloud, ShapeSpec, shape_signed_distance_diff
from .hand import (HandSpec, forward_kinematics, joint_limit_penalty, keypoint_positions,
                   mid_limit_config, part_centers)
from .maps import MapParams, MapTriple, contact_from_distances
from .recovery import ReliabilityMask


@dataclass
class SynthesisWeights:
    l_cont: float = 1e-1
    l_dir: float = 1e-2
    l_h: float = 1.0
    l_pen: float = 3.0
    l_q: float = 1.0
    l_dis: float = 1.0
    steps: int = 200
    step_size: float = 5e-3

    def __post_init__(self):
        for name in ("l_cont", "l_dir", "l_h", "l_pen", "l_q", "l_dis"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if self.steps < 1:
            raise ContractViolation("step count must be >= 1")


@dataclass
class EnergyReport:
    """Per-step energy bookkeeping; l_syn is the exact weighted sum."""

    columns = ("e_cont", "e_dir", "e_pen", "e_q", "e_dis", "l_syn")
    rows: list = field(default_factory=list)
    degenerate_direction_rows: int = 0
    fault: bool = False

    def add(self, e_cont, e_dir, e_pen, e_q, e_dis, l_syn):
        self.rows.append((e_cont, e_dir, e_pen, e_q, e_dis, l_syn))

    def best_so_far(self):
        best, out = np.inf, []
        for row in self.rows:
            best = min(best, row[-1])
            out.append(best)
        return np.array(out)

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("step," + ",".join(self.columns) + "\n")
            for i, row in enumerate(self.rows):
                fh.write(f"{i}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def _surface_tensor(spec, q_t):
    return forward_kinematics(spec, q_t)[2]


def contact_energy(obj: PointCloud, spec: HandSpec, q, c_hat, params: MapParams | None = None,
                   surface_t=None):
    """MSE between the predicted contact map and the one implied by q."""
    params = params or MapParams()
    q_t = q if isinstance(q, ad.Tensor) else ad.tensor(np.asarray(q, dtype=np.float64))
    if surface_t is None:
        surface_t = _surface_tensor(spec, q_t)
    d2 = ((obj.points[:, None, :] - surface_t.data[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)  # nearest hand point, held fixed within the step
    sel = surface_t[idx]
    diff = ad.tensor(obj.points) - sel
    dist = ad.norm_rows(diff, eps=1e-300)
    c_bar = contact_from_distances(dist, params.gamma)
    resid = c_bar - ad.tensor(np.asarray(c_hat, dtype=np.float64).reshape(-1, 1))
    return ad.mean_(resid * resid)


def direction_energy(obj: PointCloud, spec: HandSpec, q, d_hat, p_hat, weights,
                     keep=None, centers_t=None, report: EnergyReport | None = None):
    """Negative weighted mean cosine between predicted and current directions.

    Current directions point from each (kept) object point toward the
    centroid of its assigned hand part under configuration q; weights
    default to the predicted contact values.
    """
    q_t = q if isinstance(q, ad.Tensor) else ad.tensor(np.asarray(q, dtype=np.float64))
    if centers_t is None:
        centers_t = part_centers(spec, q_t)
    d_hat = np.asarray(d_hat, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    assign = np.asarray(p_hat).argmax(axis=1)
    sel = np.arange(len(obj.points)) if keep is None else np.where(keep)[0]
    if len(sel) == 0 or w[sel].sum() <= 0.0:
        return ad.tensor(0.0)
    vec = centers_t[assign[sel]] - ad.tensor(obj.points[sel])
    norms = np.linalg.norm(vec.data, axis=1)
    good = norms > 1e-8
    if report is not None:
        report.degenerate_direction_rows += int((~good).sum())
    sel = sel[good]
    vec = vec[np.where(good)[0]]
    wsel = w[sel]
    if wsel.sum() <= 0.0:
        return ad.tensor(0.0)
    d_bar = ad.normalize_rows(vec)
    cos = ad.sum_(d_bar * ad.tensor(d_hat[sel]), axis=-1)
    return -ad.sum_(ad.tensor(wsel) * cos) / wsel.sum()


def penetration_energy(obj_spec, spec: HandSpec, q, surface_t=None):
    """Sum of positive penetration depths of hand points into the object.

    obj_spec may be a ShapeSpec or a NormalizedShape.
    """
    q_t = q if isinstance(q, ad.Tensor) else ad.tensor(np.asarray(q, dtype=np.float64))
    if surface_t is None:
        surface_t = _surface_tensor(spec, q_t)
    sd = shape_signed_distance_diff(obj_spec, surface_t)
    return ad.sum_(ad.relu(-sd))


def keypoint_energy(obj: PointCloud, spec: HandSpec, q, keypoints_t=None):
    """Mean nearest-distance from hand keypoints to the object points."""
    if not spec.keypoints:
        raise ContractViolation("hand spec has no keypoints")
    q_t = q if isinstance(q, ad.Tensor) else ad.tensor(np.asarray(q, dtype=np.float64))
    if keypoints_t is None:
        keypoints_t = keypoint_positions(spec, q_t)
    d2 = ((keypoints_t.data[:, None, :] - obj.points[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)
    diff = keypoints_t - ad.tensor(obj.points[idx])
    return ad.mean_(ad.norm_rows(diff, eps=1e-300))


def init_config(obj: PointCloud, spec: HandSpec, maps: MapTriple | None = None) -> np.ndarray:
    """Deterministic q0: root on the bounding sphere along the negated mean
    direction-map vector, fingers at limit midpoints."""
    q0 = mid_limit_config(spec)
    if maps is not None and np.abs(maps.direction).sum() > 0:
        w = np.maximum(maps.contact, 1e-6)
        mean_dir = (maps.direction * w[:, None]).sum(axis=0)
    else:
        mean_dir = np.array([-1.0, 0.0, 0.0])
    n = np.linalg.norm(mean_dir)
    mean_dir = mean_dir / n if n > 1e-9 else np.array([-1.0, 0.0, 0.0])
    radius = float(np.linalg.norm(obj.points, axis=1).max())
    approach = -mean_dir  # hand sits opposite the intended contact direction
    q0[0:3] = approach * (radius + 0.25)
    # rotate the hand's +x (finger) axis to point back toward the object center
    target = -approach
    x_axis = np.array([1.0, 0.0, 0.0])
    axis = np.cross(x_axis, target)
    s = np.linalg.norm(axis)
    c = float(x_axis @ target)
    if s < 1e-12:
        q0[3:6] = np.array([0.0, 0.0, np.pi]) if c < 0 else 0.0
    else:
        q0[3:6] = axis / s * np.arctan2(s, c)
    return q0


def synthesize_grasp(obj: PointCloud, obj_spec, spec: HandSpec, maps: MapTriple,
                     mask: ReliabilityMask | None = None, q0=None,
                     weights: SynthesisWeights | None = None,
                     map_params: MapParams | None = None, freeze_dofs=None):
    """Optimize q against the transferred maps; returns (q, EnergyReport).

    obj_spec is a ShapeSpec, a NormalizedShape, or None; with None the
    penetration term is dropped.  Masked-out points are excluded from E_dir
    (direction supervision is local); E_cont keeps all points since the
    contact map is globally informative.  freeze_dofs lists configuration
    indices held fixed at their q0 values.
    """
    weights = weights or SynthesisWeights()
    map_params = map_params or MapParams()
    keep = mask.keep if mask is not None else None
    q0 = init_config(obj, spec, maps) if q0 is None else np.asarray(q0, dtype=np.float64)
    freeze = None if freeze_dofs is None else np.asarray(freeze_dofs, dtype=np.int64)

    q = ad.param(q0.copy(), name="q")
    opt = ad.Adam({"q": q}, lr=weights.step_size)
    report = EnergyReport()
    best_q, best_l = q.data.copy(), np.inf

    for _ in range(weights.steps):
        q.grad = None
        q_t = q
        rots_trans = forward_kinematics(spec, q_t)
        surface_t = rots_trans[2]
        centers_t = part_centers_from_surface(spec, surface_t)
        e_cont = contact_energy(obj, spec, q_t, maps.contact, map_params, surface_t=surface_t)
        e_dir = direction_energy(obj, spec, q_t, maps.direction, maps.part, maps.contact,
                                 keep=keep, centers_t=centers_t, report=report)
        if obj_spec is not None:
            e_pen = penetration_energy(obj_spec, spec, q_t, surface_t=surface_t)
        else:
            e_pen = ad.tensor(0.0)
        e_q = joint_limit_penalty(spec, q_t)
        e_dis = keypoint_energy(obj, spec, q_t)
        e_h = weights.l_pen * e_pen + weights.l_q * e_q + weights.l_dis * e_dis
        l_syn = weights.l_cont * e_cont + weights.l_dir * e_dir + weights.l_h * e_h

        vals = [float(e.data) for e in (e_cont, e_dir, e_pen, e_q, e_dis, l_syn)]
        if not np.isfinite(vals).all():
            report.fault = True
            return best_q, report
        report.add(*vals)
        if vals[-1] < best_l:
            best_l, best_q = vals[-1], q.data.copy()

        ad.backward(l_syn)
        if freeze is not None and q.grad is not None:
            q.grad[freeze] = 0.0
        opt.step()

    return best_q, report


def part_centers_from_surface(spec: HandSpec, surface_t):
    """Per-part centroids reusing an already-built surface tensor."""
    parts, _ = spec.surface_parts()
    rows = []
    for b in range(spec.part_count):
        idx = np.where(parts == b)[0]
        rows.append(ad.mean_(surface_t[idx], axis=0, keepdims=True))
    return ad.concat(rows, axis=0)


# -- grasp file --------------------------------------------------------------


def save_grasp(path, q, spec: HandSpec):
    with open(path, "w") as fh:
        fh.write(f"# hand {spec.name} hash {spec.spec_hash()}\n")
        fh.write("q: " + " ".join(f"{v:.17g}" for v in np.asarray(q)) + "\n")


def load_grasp(path, spec: HandSpec | None = None):
    with open(path) as fh:
        header = fh.readline().split()
        body = fh.readline().split()
    if len(header) < 4 or header[1] != "hand":
        raise ContractViolation(f"bad grasp-file header in {path}")
    if spec is not None and header[4] != spec.spec_hash():
        raise ContractViolation("grasp file was written for a different hand spec")
    if body[0] != "q:":
        raise ContractViolation("grasp file missing q record")
    return np.array([float(v) for v in body[1:]])
