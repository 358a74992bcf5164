"""Closed-form joint recovery from direction bundles and reliability filtering.

For a part with points x_i and unit directions d_i, the implied joint
position minimizes D(J) = sum_i (x_i - J)^T (I - d_i d_i^T) (x_i - J),
the total squared point-to-line distance.  The minimizer solves
A J = b with A = sum(I - d d^T), b = sum (I - d d^T) x, via the
Moore-Penrose pseudoinverse (minimum-norm solution when rays are parallel).

Two filtering rules then reject unreliable map content before synthesis:
(i) drop a whole part when its mean residual exceeds tau_a (noisy
directions); (ii) drop individual points farther than tau_b from the
recovered joint (part-map outliers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import PointCloud
from .maps import MapTriple

DEGENERACY_CONDITION = 1e8
CONTACT_GATE = 0.5


@dataclass
class JointEstimate:
    position: np.ndarray  # (3,)
    residual: float  # mean point-to-line distance
    count: int
    degenerate: bool


@dataclass
class FilterParams:
    tau_a: float = 0.1  # mean-residual threshold, rule (i)
    tau_b: float = 0.1  # per-point distance threshold, rule (ii)
    min_part_size: int = 5
    # rule (i) distance flavor: "line" = mean point-to-line residual (default),
    # "point" = mean Euclidean distance to the estimated joint
    rule_i_distance: str = "line"

    def __post_init__(self):
        if self.tau_a <= 0 or self.tau_b <= 0:
            raise ContractViolation("tau_a and tau_b must be positive")
        if self.rule_i_distance not in ("line", "point"):
            raise ContractViolation("rule_i_distance must be 'line' or 'point'")


@dataclass
class ReliabilityMask:
    keep: np.ndarray  # (N,) booleans
    estimates: dict = field(default_factory=dict)  # part -> JointEstimate
    drop_reasons: dict = field(default_factory=dict)  # part -> reason string
    point_reasons: np.ndarray | None = None  # (N,) small ints, see REASONS

    REASONS = {0: "kept", 1: "not-contacted", 2: "too-small", 3: "noisy-directions", 4: "outlier"}


def estimate_joint(points, directions) -> JointEstimate:
    """Least-squares intersection of the rays {x_i + t d_i}."""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    w = len(x)
    if w < 2 or d.shape != x.shape:
        raise ContractViolation("need w >= 2 points with matching directions")
    norms = np.linalg.norm(d, axis=1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ContractViolation("directions must be unit-norm within 1e-6")

    proj = np.eye(3)[None, :, :] - d[:, :, None] * d[:, None, :]  # (w, 3, 3)
    a = proj.sum(axis=0)
    b = np.einsum("wij,wj->i", proj, x)
    sv = np.linalg.svd(a, compute_uv=False)
    degenerate = sv[0] / max(sv[-1], 1e-300) > DEGENERACY_CONDITION
    j = np.linalg.pinv(a, rcond=1.0 / DEGENERACY_CONDITION) @ b
    res_vec = np.einsum("wij,wj->wi", proj, x - j[None, :])
    residual = float(np.linalg.norm(res_vec, axis=1).mean())
    return JointEstimate(j, residual, w, bool(degenerate))


def ray_objective(j, points, directions):
    """D(J): total squared point-to-line distance (oracle-friendly form)."""
    x = np.asarray(points)
    d = np.asarray(directions)
    r = x - np.asarray(j)[None, :]
    along = (r * d).sum(axis=1)
    return float((r * r).sum() - (along * along).sum())


def filter_reliable(obj: PointCloud, maps: MapTriple, params: FilterParams | None = None) -> ReliabilityMask:
    """Apply rules (i)/(ii) over contact-gated part groups."""
    params = params or FilterParams()
    maps.validate()
    n = len(obj.points)
    keep = np.zeros(n, dtype=bool)
    reasons = np.ones(n, dtype=np.int8)  # default: not contacted
    mask = ReliabilityMask(keep, point_reasons=reasons)

    contacted = maps.contact > CONTACT_GATE
    assign = maps.part.argmax(axis=1)
    for part in np.unique(assign[contacted]):
        idx = np.where(contacted & (assign == part))[0]
        if len(idx) < params.min_part_size:
            mask.drop_reasons[int(part)] = "too-small"
            reasons[idx] = 2
            continue
        est = estimate_joint(obj.points[idx], maps.direction[idx])
        mask.estimates[int(part)] = est
        if params.rule_i_distance == "line":
            rule_i_value = est.residual
        else:
            rule_i_value = float(np.linalg.norm(obj.points[idx] - est.position, axis=1).mean())
        if rule_i_value > params.tau_a:
            mask.drop_reasons[int(part)] = "noisy-directions"
            reasons[idx] = 3
            continue
        dist = np.linalg.norm(obj.points[idx] - est.position[None, :], axis=1)
        ok = dist <= params.tau_b
        keep[idx[ok]] = True
        reasons[idx[ok]] = 0
        reasons[idx[~ok]] = 4
    return mask


def save_mask_csv(path, mask: ReliabilityMask, maps: MapTriple):
    assign = maps.part.argmax(axis=1)
    with open(path, "w") as fh:
        fh.write("index,part,kept,reason,part_residual\n")
        for i in range(len(mask.keep)):
            part = int(assign[i])
            est = mask.estimates.get(part)
            res = f"{est.residual:.17g}" if est is not None else ""
            reason = ReliabilityMask.REASONS[int(mask.point_reasons[i])]
            fh.write(f"{i},{part},{int(mask.keep[i])},{reason},{res}\n")
