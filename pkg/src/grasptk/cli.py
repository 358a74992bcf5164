"""Command-line surface for the toolkit.

Subcommands: dataset gen, train {contact,part,direction}, transfer,
synthesize, eval, inspect.  Exit codes: 0 success, 2 contract violation,
3 numeric fault, 4 generation failure.  All output files are deterministic
given config and seed; wall-clock timings go to stderr only.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import cascade as casc
from . import dataset as ds
from .diffusion import save_loss_curve, save_model, toy_config, ModelConfig
from .errors import GraspTkError
from .geometry import load_point_cloud
from .hand import BUNDLED_HANDS, load_hand_spec
from .maps import MapParams, load_maps, save_maps
from .metrics import (contact_coverage, contact_error, penetration_depth, to_millimeters)
from .recovery import FilterParams, filter_reliable
from .synthesis import SynthesisWeights, save_grasp, synthesize_grasp


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _resolve_hand(arg):
    if arg in BUNDLED_HANDS:
        return BUNDLED_HANDS[arg]()
    return load_hand_spec(arg)


def _model_config(overrides):
    base = toy_config() if overrides.pop("preset", "toy") == "toy" else ModelConfig()
    for k, v in overrides.items():
        if not hasattr(base, k):
            raise GraspTkError(f"unknown model config key '{k}'")
        setattr(base, k, tuple(v) if isinstance(v, list) else v)
    return base


# -- subcommands -------------------------------------------------------------


def cmd_dataset_gen(args):
    cfg = _load_json(args.config) if args.config else {}
    hand = _resolve_hand(cfg.get("hand", "toyhand3"))
    families = None
    if "n_targets" in cfg or "n_points" in cfg:
        families = ds.default_families(cfg.get("n_targets", 20), cfg.get("n_points", 2048))
    if "families" in cfg:
        keep = set(cfg["families"])
        families = [f for f in (families or ds.default_families()) if f.name in keep]
    weights = SynthesisWeights(**{"l_dir": 0.0, "steps": 60, **cfg.get("synthesis", {})})
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    manifest = ds.build_dataset(args.out, hand, families=families, seed=args.seed,
                                weights=weights, progress=progress)
    print(f"dataset: {manifest['n_samples']} samples, {len(manifest['failures'])} failures")


def cmd_train(args):
    cfg = _load_json(args.config) if args.config else {}
    manifest, hand, records = ds.load_dataset(args.data)
    train_records = [r for r in records if r["split"] == "train"]
    base = _model_config(dict(cfg.get("model", {})))
    base.task_vocab = max(base.task_vocab, len(manifest["task_names"]))
    contact_model = None
    if args.stage != "contact":
        pipeline = os.path.join(args.out, "pipeline.json")
        if not os.path.exists(pipeline):
            raise GraspTkError("train contact first: pipeline.json not found in --out")
        models, _ = casc.load_cascade_partial(pipeline)
        contact_model = models["contact"]
    t0 = time.time()
    model, curve = casc.train_stage(
        args.stage, base, train_records, hand.part_count,
        contact_model=contact_model, epochs=cfg.get("epochs"), seed=args.seed,
        progress=(lambda e, row: print(f"epoch {e}: recon {row[1]:.4f} diff {row[2]:.4f}",
                                       file=sys.stderr)) if args.verbose else None)
    print(f"trained {args.stage} in {time.time() - t0:.1f}s", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    save_model(os.path.join(args.out, f"{args.stage}.ckpt"), model)
    save_loss_curve(os.path.join(args.out, f"{args.stage}_curve.csv"), curve)
    casc.update_pipeline_manifest(args.out, args.stage, model,
                                  os.path.join(args.data, "hand.spec"),
                                  manifest["task_names"])
    print(f"{args.stage}: final recon {curve[-1][1]:.5f} diff {curve[-1][2]:.5f}")


def cmd_transfer(args):
    models, _ = casc.load_cascade(args.manifest)
    template_cloud = load_point_cloud(args.template)
    template_maps = load_maps(os.path.splitext(args.template)[0] + ".maps")
    target_cloud = load_point_cloud(args.target)
    maps = casc.transfer_all(models, template_cloud.points, template_maps,
                             target_cloud.points, args.task, args.seed)
    save_maps(args.out, maps)
    print(f"transferred maps -> {args.out}")


def cmd_synthesize(args):
    hand = _resolve_hand(args.hand)
    obj = load_point_cloud(args.object)
    maps = load_maps(args.maps)
    shape = None
    if args.shape:
        sd = _load_json(args.shape)
        if "transform" in sd:
            from .geometry import NormalizationTransform, NormalizedShape

            tr = sd["transform"]
            shape = NormalizedShape(
                ds.spec_from_dict(sd),
                NormalizationTransform(np.asarray(tr["centroid"], dtype=np.float64),
                                       float(tr["scale"])))
        else:
            shape = ds.spec_from_dict(sd)
    mask = None
    if not args.no_filter:
        mask = filter_reliable(obj, maps, FilterParams())
    q, report = synthesize_grasp(obj, shape, hand, maps, mask=mask)
    save_grasp(args.out, q, hand)
    report.save_csv(os.path.splitext(args.out)[0] + "_energy.csv")
    print(f"synthesized grasp -> {args.out} (final L_syn {report.rows[-1][-1]:.5f})")


def cmd_eval(args):
    manifest, hand, records = ds.load_dataset(args.dir)
    models, _ = casc.load_cascade(args.manifest)
    split_records = [r for r in records if r["split"] == args.split]
    rows = []
    plan_cache = {}
    from .geometry import PointCloud

    for i, rec in enumerate(split_records):
        t0 = time.time()
        obj = PointCloud(rec["x_a"])
        maps = casc.transfer_all(models, rec["x_e"], rec["maps_e"], rec["x_a"],
                                 rec["task"], args.seed + i, plan_cache)
        t_transfer = time.time() - t0
        shape = ds.normalized_shape_from_record(rec)
        t0 = time.time()
        mask = filter_reliable(obj, maps, FilterParams())
        q, _ = synthesize_grasp(obj, shape, hand, maps, mask=mask,
                                map_params=MapParams(gamma=manifest.get("map_gamma", 100.0)))
        t_syn = time.time() - t0
        pen = penetration_depth(obj, hand, q)
        cov = contact_coverage(obj, hand, q, band=0.02, shape=shape)
        cerr = contact_error(maps.contact, rec["maps_a"].contact)
        rows.append((rec["target_base"], pen, to_millimeters(pen), cov, cerr))
        if args.verbose:
            print(f"{rec['target_base']}: pen {pen:.4f} cov {cov:.1f} cerr {cerr:.4f} "
                  f"(transfer {t_transfer:.1f}s syn {t_syn:.1f}s)", file=sys.stderr)
    with open(args.out, "w") as fh:
        fh.write("sample,pen_norm,pen_mm,coverage_pct,contact_error\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.17g},{r[2]:.17g},{r[3]:.17g},{r[4]:.17g}\n")
    if rows:
        arr = np.array([r[1:] for r in rows], dtype=np.float64)
        print(f"eval: {len(rows)} samples, mean pen {arr[:, 0].mean():.4f}, "
              f"mean cov {arr[:, 2].mean():.1f}%, mean cerr {arr[:, 3].mean():.4f}")


def cmd_inspect(args):
    maps = load_maps(os.path.join(args.dir, args.sample + ".maps"))
    cloud = load_point_cloud(os.path.join(args.dir, args.sample + ".xyz"))
    os.makedirs(args.out, exist_ok=True)
    _write_ply(os.path.join(args.out, "contact.ply"), cloud.points,
               _gray_colors(maps.contact))
    _write_ply(os.path.join(args.out, "part.ply"), cloud.points,
               _part_colors(maps.part.argmax(axis=1), maps.n_parts))
    _write_ply(os.path.join(args.out, "direction.ply"), cloud.points,
               _gray_colors(0.5 * (maps.direction[:, 2] + 1.0)), normals=maps.direction)
    print(f"wrote colored clouds -> {args.out}")


def _gray_colors(values):
    v = np.clip(np.asarray(values), 0.0, 1.0)
    g = (v * 255).astype(np.uint8)
    return np.stack([g, g, 255 - g], axis=1)


def _part_colors(labels, b):
    rng = np.random.default_rng(0)
    palette = rng.integers(40, 255, size=(max(b, 1), 3), dtype=np.uint8)
    return palette[labels]


def _write_ply(path, points, colors, normals=None):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if normals is not None:
            fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for i in range(len(points)):
            row = " ".join(f"{v:.9g}" for v in points[i])
            if normals is not None:
                row += " " + " ".join(f"{v:.9g}" for v in normals[i])
            row += " " + " ".join(str(int(v)) for v in colors[i])
            fh.write(row + "\n")


# -- parser ------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="grasptk", description=__doc__)
    p.add_argument("--threads", type=int, default=0, help="worker hint (0 = auto)")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    pd = sub.add_parser("dataset", help="dataset operations")
    pds = pd.add_subparsers(dest="dataset_command", required=True)
    g = pds.add_parser("gen", help="generate the synthetic benchmark")
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train", help="train one cascade stage")
    t.add_argument("stage", choices=["contact", "part", "direction"])
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("transfer", help="run the three-stage map transfer")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--template", required=True, help="template .xyz (with sibling .maps)")
    tr.add_argument("--target", required=True, help="target .xyz")
    tr.add_argument("--task", type=int, required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_transfer)

    sy = sub.add_parser("synthesize", help="recover a grasp from maps")
    sy.add_argument("--maps", required=True)
    sy.add_argument("--object", required=True, help="object .xyz")
    sy.add_argument("--hand", required=True, help="bundled name or hand-spec file")
    sy.add_argument("--shape", default=None, help="analytic shape JSON for penetration")
    sy.add_argument("--no-filter", action="store_true", help="skip the reliability filter")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synthesize)

    ev = sub.add_parser("eval", help="evaluate transfer+synthesis on a split")
    ev.add_argument("--dir", required=True, help="dataset directory")
    ev.add_argument("--manifest", required=True, help="pipeline manifest")
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    ins = sub.add_parser("inspect", help="emit colored point clouds for a sample")
    ins.add_argument("--dir", required=True, help="dataset directory")
    ins.add_argument("--sample", required=True, help="sample base path inside the dataset")
    ins.add_argument("--out", required=True)
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GraspTkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
