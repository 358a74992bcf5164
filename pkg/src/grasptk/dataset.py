"""Synthetic template/target families, template grasps, and serialization.

A family is a primitive shape with parameter/deformation ranges; the
template is the range-midpoint instance and targets are sampled from the
ranges.  Tasks are procedural contact-region rules (top cap, side patch,
bottom cap, pinch cap) standing in for free-text task descriptions.
Template and target grasps are fitted by the synthesis optimizer against
the task's desired contact region, then ground-truth maps are recomputed
from the fitted configuration, so every stored sample satisfies the
round-trip joint-recovery invariant by construction.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractViolation, GenerationFailure
from .geometry import (NormalizedShape, PointCloud, ShapeSpec, load_point_cloud,
                       normalize_object, sample_surface, save_point_cloud,
                       shape_signed_distance)
from .hand import HandSpec, hand_surface
from .maps import MapParams, MapTriple, ground_truth_maps, load_maps, save_maps
from .metrics import contact_coverage, penetration_depth_hand_into_object
from .synthesis import SynthesisWeights, load_grasp, save_grasp, synthesize_grasp

TASK_NAMES = ["grasp-top", "grasp-side", "grasp-bottom", "pinch-cap"]

PEN_GATE = 0.02  # normalized units (±2 mm at the default 0.1 m scale)
COV_GATE = 10.0  # percent of hand points in the contact band
DATASET_GAMMA = 12.0  # contact sharpness matched to benchmark cloud spacing


@dataclass
class FamilyConfig:
    name: str
    family: str
    param_ranges: dict  # name -> (lo, hi)
    scale_range: tuple = (1.0, 1.0)  # per-axis anisotropic scale draw
    bump_amp_range: tuple = (0.0, 0.0)
    n_bumps: int = 0
    n_targets: int = 20
    n_points: int = 2048
    tasks: list = field(default_factory=lambda: list(range(len(TASK_NAMES))))

    def __post_init__(self):
        if self.n_points < 64:
            raise ContractViolation("point count must be >= 64")
        for lo, hi in self.param_ranges.values():
            if not lo < hi:
                raise ContractViolation("parameter ranges must be non-degenerate")


def default_families(n_targets=20, n_points=2048):
    """The 4-family benchmark: sphere, box, capsule, superquadric."""
    return [
        FamilyConfig("spheres", "sphere", {"radius": (0.8, 1.2)},
                     scale_range=(0.95, 1.05), bump_amp_range=(0.0, 0.04), n_bumps=2,
                     n_targets=n_targets, n_points=n_points),
        FamilyConfig("boxes", "box", {"hx": (0.5, 0.9), "hy": (0.5, 0.9), "hz": (0.5, 0.9)},
                     n_targets=n_targets, n_points=n_points),
        FamilyConfig("capsules", "capsule",
                     {"radius": (0.35, 0.55), "half_length": (0.45, 0.75)},
                     n_targets=n_targets, n_points=n_points),
        FamilyConfig("superquadrics", "superquadric",
                     {"a1": (0.7, 1.0), "a2": (0.7, 1.0), "a3": (0.7, 1.0),
                      "e1": (0.6, 1.4), "e2": (0.6, 1.4)},
                     n_targets=n_targets, n_points=n_points),
    ]


def _midpoint_spec(config: FamilyConfig) -> ShapeSpec:
    params = {k: 0.5 * (lo + hi) for k, (lo, hi) in config.param_ranges.items()}
    return ShapeSpec(config.family, params)


def _draw_spec(config: FamilyConfig, rng) -> ShapeSpec:
    params = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in config.param_ranges.items()}
    lo, hi = config.scale_range
    scale = tuple(float(rng.uniform(lo, hi)) for _ in range(3))
    bumps = []
    for _ in range(config.n_bumps):
        amp = float(rng.uniform(*config.bump_amp_range))
        if amp > 1e-9:
            c = rng.standard_normal(3)
            bumps.append((tuple(c / np.linalg.norm(c)), amp, float(rng.uniform(0.4, 0.8))))
    return ShapeSpec(config.family, params, scale=scale, bumps=bumps)


def gen_family(config: FamilyConfig, seed: int):
    """(template spec, list of target specs); deterministic per seed."""
    rng = np.random.default_rng(seed)
    template = _midpoint_spec(config)
    targets = [_draw_spec(config, rng) for _ in range(config.n_targets)]
    return template, targets


# -- task regions ------------------------------------------------------------


def desired_contact(task_id: int, cloud: PointCloud):
    """Smooth task-dependent desired contact values on a normalized cloud."""
    x, z = cloud.points[:, 0], cloud.points[:, 2]
    zmax = np.abs(cloud.points[:, 2]).max()
    zn = z / max(zmax, 1e-9)
    if task_id == 0:  # grasp-top: upper cap
        s = 1.0 / (1.0 + np.exp(-(zn - 0.45) / 0.08))
    elif task_id == 1:  # grasp-side: +x patch
        xn = x / max(np.abs(x).max(), 1e-9)
        s = 1.0 / (1.0 + np.exp(-(xn - 0.45) / 0.08))
    elif task_id == 2:  # grasp-bottom: lower cap
        s = 1.0 / (1.0 + np.exp((zn + 0.45) / 0.08))
    elif task_id == 3:  # pinch-cap: tight upper cap
        s = 1.0 / (1.0 + np.exp(-(zn - 0.7) / 0.05))
    else:
        raise ContractViolation(f"unknown task id {task_id}")
    return 0.85 * s


# -- grasp construction ------------------------------------------------------


def _prepare_object(spec: ShapeSpec, n_points, seed):
    cloud_raw = sample_surface(spec, n_points, seed)
    cloud, transform = normalize_object(cloud_raw)
    return cloud, NormalizedShape(spec, transform)


def _region_frame(cloud: PointCloud, shape: NormalizedShape, c_des):
    """Surface anchor point and outward normal for a desired contact region."""
    w = np.maximum(c_des, 1e-9)
    rc = (cloud.points * w[:, None]).sum(axis=0) / w.sum()
    rn = np.linalg.norm(rc)
    u = rc / rn if rn > 1e-9 else np.array([0.0, 0.0, 1.0])
    # walk along the ray to the surface, then take the local normal from the
    # signed-distance gradient (finite differences, exact enough off edges)
    d0 = float(shape_signed_distance(shape, rc[None, :])[0])
    surf = rc - d0 * u
    eps = 1e-4
    g = np.array([
        float(shape_signed_distance(shape, (surf + eps * e)[None, :])[0]
              - shape_signed_distance(shape, (surf - eps * e)[None, :])[0])
        for e in np.eye(3)]) / (2 * eps)
    gn = np.linalg.norm(g)
    n = g / gn if gn > 1e-9 else u
    return surf, n


def _palm_tangent_init(cloud: PointCloud, shape: NormalizedShape, hand: HandSpec, c_des,
                       gap=0.004, roll_axis_hint=None):
    """q0 laying the root link flush against the region, fingers tangential."""
    from scipy.spatial.transform import Rotation

    surf, n = _region_frame(cloud, shape, c_des)
    hint = np.array([0.0, 0.0, 1.0]) if roll_axis_hint is None else np.asarray(roll_axis_hint)
    t1 = np.cross(hint, n)
    if np.linalg.norm(t1) < 1e-6:
        t1 = np.cross(np.array([1.0, 0.0, 0.0]), n)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    rot = np.stack([t1, t2, n], axis=1)  # local x->t1, y->t2, z->n
    palm = hand.links[0]
    q0 = mid_limit_config_soft(hand)
    q0[0:3] = surf + (palm.capsule_radius + gap) * n - palm.capsule_half_length * t1
    q0[3:6] = Rotation.from_matrix(rot).as_rotvec()
    return q0


def mid_limit_config_soft(hand: HandSpec):
    """Limit-midpoint joints pulled slightly toward zero curl."""
    from .hand import mid_limit_config

    q = mid_limit_config(hand)
    q[6:] *= 0.25
    return q


def _dock(cloud: PointCloud, shape: NormalizedShape, hand: HandSpec, q, direction,
          max_travel=0.25, back_travel=0.15, step=0.005, pen_cap=0.8 * PEN_GATE,
          band=PEN_GATE):
    """Slide the whole hand along `direction`, keeping the best coverage pose
    that stays under the penetration cap.

    Travel starts `back_travel` against the slide direction, so a pose that
    already penetrates can be resolved by backing out.  Candidates are scanned
    outward-in and cut at the first penetrating travel, which rules out
    tunneling to the far side.  All candidate translations are scored with one
    batched signed-distance call: the slide is rigid, so the hand surface just
    shifts by t*direction.
    """
    from .geometry import shape_signed_distance
    from .hand import forward_kinematics

    surf = forward_kinematics(hand, q)[3].points
    travels = np.arange(-back_travel, max_travel + 0.5 * step, step)
    pts = surf[None, :, :] + travels[:, None, None] * direction[None, None, :]
    d = shape_signed_distance(shape, pts.reshape(-1, 3)).reshape(len(travels), len(surf))
    pen = np.maximum(-d, 0.0).max(axis=1)
    cov = 100.0 * (np.abs(d) <= band).mean(axis=1)
    blocked = np.where(pen > pen_cap)[0]
    last = blocked[0] if len(blocked) else len(travels)
    if last == 0:
        return q.copy(), float(cov[np.argmin(np.abs(travels))])
    best = int(np.argmax(cov[:last]))
    best_q = q.copy()
    best_q[0:3] = q[0:3] + travels[best] * direction
    return best_q, float(cov[best])


def fit_grasp_to_region(cloud: PointCloud, shape: NormalizedShape, hand: HandSpec,
                        task_id: int, seed: int, weights: SynthesisWeights | None = None,
                        q_init=None):
    """Fit q to a task's desired contact region (no direction supervision).

    Three phases: analytic flush placement of the root link over the region
    (or a caller-provided warm start, typically the family template's fitted
    grasp, which keeps per-part contact layouts consistent across targets),
    energy refinement, then a docking slide along the inward normal to close
    any remaining gap without penetrating.
    """
    c_des = desired_contact(task_id, cloud)
    n, b = len(cloud), hand.part_count
    guide = MapTriple(c_des, np.full((n, b), 1.0 / b),
                      cloud.normals if cloud.normals is not None
                      else cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True))
    # deterministic roll about the region normal: grasps of the same task
    # share an orientation convention across a family's targets, so the
    # per-part contact layout is a stable function of task and geometry
    _, normal = _region_frame(cloud, shape, c_des)
    freeze = None
    if q_init is not None:
        q0 = np.array(q_init, dtype=np.float64)
        # orientation is frozen under a warm start: it pins which finger
        # covers which region, so part layouts stay consistent across a
        # family's targets while translation and curl adapt to the geometry
        freeze = [3, 4, 5]
    else:
        hint = np.array([1.0, 0.0, 0.0]) if abs(normal[2]) >= 0.7 else np.array([0.0, 0.0, 1.0])
        q0 = _palm_tangent_init(cloud, shape, hand, c_des, roll_axis_hint=hint)
    w = weights or SynthesisWeights(l_dir=0.0)
    if q_init is not None:
        # a short refine keeps warm-started fits close to the template pose;
        # long refinement re-solves the grasp and decorrelates part layouts
        w = replace(w, steps=min(w.steps, 12))
    q, report = synthesize_grasp(cloud, shape, hand, guide, q0=q0, weights=w, freeze_dofs=freeze)
    _, normal = _region_frame(cloud, shape, c_des)
    q, _ = _dock(cloud, shape, hand, q, -normal)
    return q, report


def gen_template_grasp(hand: HandSpec, spec: ShapeSpec, task_id: int, seed: int,
                       n_points=2048, max_attempts=20, weights=None, map_params=None,
                       q_init=None):
    """Fitted (q, MapTriple, cloud, shape) passing the quality gates."""
    map_params = map_params or MapParams(gamma=DATASET_GAMMA)
    diagnostics = []
    for attempt in range(max_attempts):
        s = seed + 1000 * attempt
        cloud, shape = _prepare_object(spec, n_points, s)
        q, _ = fit_grasp_to_region(cloud, shape, hand, task_id, s, weights=weights,
                                   q_init=q_init if attempt < max_attempts // 2 else None)
        pen = penetration_depth_hand_into_object(shape, hand, q)
        cov = contact_coverage(cloud, hand, q, band=PEN_GATE, shape=shape)
        if pen <= PEN_GATE and cov >= COV_GATE:
            maps = ground_truth_maps(cloud, hand, q, map_params)
            return q, maps, cloud, shape
        diagnostics.append((attempt, float(pen), float(cov)))
    raise GenerationFailure(
        f"grasp generation failed after {max_attempts} attempts "
        f"(task {task_id}); (attempt, pen, cov) = {diagnostics}")


# -- dataset build -----------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def build_dataset(out_dir, hand: HandSpec, families=None, seed=0, n_points=None,
                  max_attempts=20, weights=None, map_params=None, progress=None):
    """Generate, fit, and serialize the full benchmark; returns the manifest."""
    from .hand import save_hand_spec

    families = families if families is not None else default_families()
    if weights is None:
        weights = SynthesisWeights(l_dir=0.0, steps=60)
    map_params = map_params or MapParams(gamma=DATASET_GAMMA)
    os.makedirs(out_dir, exist_ok=True)
    hand_path = os.path.join(out_dir, "hand.spec")
    save_hand_spec(hand_path, hand)

    records, failures, files = [], [], ["hand.spec"]
    for fam_idx, config in enumerate(families):
        npts = n_points or config.n_points
        fam_dir = os.path.join(out_dir, "families", config.name)
        os.makedirs(fam_dir, exist_ok=True)
        fam_seed = seed + 10_000 * fam_idx
        template_spec, target_specs = gen_family(config, fam_seed)

        n_test = int(round(0.1 * config.n_targets))
        if n_test == 0 and config.n_targets >= 2:
            n_test = 1
        test_targets = set(range(config.n_targets - n_test, config.n_targets))

        # template grasp per task
        template_entries = {}
        for task in config.tasks:
            try:
                q_e, maps_e, cloud_e, shape_e = gen_template_grasp(
                    hand, template_spec, task, fam_seed + 17 * task, n_points=npts,
                    max_attempts=max_attempts, weights=weights, map_params=map_params)
            except GenerationFailure as exc:
                failures.append({"family": config.name, "target": None, "task": task,
                                 "error": str(exc)})
                continue
            base = f"template_t{task}"
            save_point_cloud(os.path.join(fam_dir, base + ".xyz"), cloud_e)
            save_maps(os.path.join(fam_dir, base + ".maps"), maps_e)
            save_grasp(os.path.join(fam_dir, base + ".q"), q_e, hand)
            files += [f"families/{config.name}/{base}{ext}" for ext in (".xyz", ".maps", ".q")]
            template_entries[task] = (q_e, maps_e, cloud_e, shape_e, template_spec)
            if progress:
                progress(f"{config.name} template task {task} done")

        for tgt_idx, tgt_spec in enumerate(target_specs):
            for task in config.tasks:
                if task not in template_entries:
                    continue
                tseed = fam_seed + 100 * (tgt_idx + 1) + 17 * task
                try:
                    q_a, maps_a, cloud_a, shape_a = gen_template_grasp(
                        hand, tgt_spec, task, tseed, n_points=npts,
                        max_attempts=max_attempts, weights=weights, map_params=map_params,
                        q_init=template_entries[task][0])
                except GenerationFailure as exc:
                    failures.append({"family": config.name, "target": tgt_idx,
                                     "task": task, "error": str(exc)})
                    continue
                base = f"target_{tgt_idx}_t{task}"
                save_point_cloud(os.path.join(fam_dir, base + ".xyz"), cloud_a)
                save_maps(os.path.join(fam_dir, base + ".maps"), maps_a)
                save_grasp(os.path.join(fam_dir, base + ".q"), q_a, hand)
                files += [f"families/{config.name}/{base}{ext}"
                          for ext in (".xyz", ".maps", ".q")]
                records.append({
                    "family": config.name,
                    "family_kind": config.family,
                    "target": tgt_idx,
                    "task": task,
                    "split": "test" if tgt_idx in test_targets else "train",
                    "template_base": f"families/{config.name}/template_t{task}",
                    "target_base": f"families/{config.name}/{base}",
                    "target_spec": _spec_dict(tgt_spec),
                    "template_spec": _spec_dict(template_spec),
                    "target_transform": _transform_dict(shape_a.transform),
                    "template_transform": _transform_dict(template_entries[task][3].transform),
                })
                if progress:
                    progress(f"{config.name} target {tgt_idx} task {task} done")

    manifest = {
        "schema": "grasptk-dataset v1",
        "seed": seed,
        "hand_hash": hand.spec_hash(),
        "normalization": "unit max-radius, centroid at origin",
        "normalization_scale_m": 0.1,
        "map_gamma": map_params.gamma,
        "task_names": TASK_NAMES,
        "n_samples": len(records),
        "samples": records,
        "failures": failures,
        "file_hashes": {f: _sha256(os.path.join(out_dir, f)) for f in sorted(files)},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _spec_dict(spec: ShapeSpec):
    return {"family": spec.family, "params": spec.params, "scale": list(spec.scale),
            "bumps": [[list(c), a, w] for c, a, w in spec.bumps]}


def spec_from_dict(d) -> ShapeSpec:
    return ShapeSpec(d["family"], dict(d["params"]), scale=tuple(d["scale"]),
                     bumps=[(tuple(c), a, w) for c, a, w in d["bumps"]])


def _transform_dict(tr):
    return {"centroid": [float(v) for v in tr.centroid], "scale": float(tr.scale)}


def normalized_shape_from_record(rec, which="target") -> NormalizedShape:
    """Analytic shape in the normalized frame of a manifest sample record."""
    from .geometry import NormalizationTransform

    tr = rec[f"{which}_transform"]
    return NormalizedShape(spec_from_dict(rec[f"{which}_spec"]),
                           NormalizationTransform(np.asarray(tr["centroid"], dtype=np.float64),
                                                  float(tr["scale"])))


def load_dataset(out_dir):
    """Manifest plus in-memory records usable by the cascade trainers."""
    from .hand import load_hand_spec

    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != "grasptk-dataset v1":
        raise ContractViolation("unknown dataset manifest schema")
    hand = load_hand_spec(os.path.join(out_dir, "hand.spec"))
    records = []
    cloud_cache = {}

    def cloud(base):
        if base not in cloud_cache:
            cloud_cache[base] = load_point_cloud(os.path.join(out_dir, base + ".xyz"))
        return cloud_cache[base]

    for rec in manifest["samples"]:
        tb, gb = rec["template_base"], rec["target_base"]
        records.append({
            **rec,
            "x_e": cloud(tb).points,
            "maps_e": load_maps(os.path.join(out_dir, tb + ".maps")),
            "q_e": load_grasp(os.path.join(out_dir, tb + ".q"), hand),
            "x_a": cloud(gb).points,
            "maps_a": load_maps(os.path.join(out_dir, gb + ".maps")),
            "q_a": load_grasp(os.path.join(out_dir, gb + ".q"), hand),
        })
    return manifest, hand, records
