"""Three-stage cascaded transfer: contact -> part -> direction.

Each stage is an independent `MapDiffusionModel`; later stages condition on
the maps produced by earlier ones.  During part/direction training the
conditioning contact map is ground truth with probability 0.8 and a
model-sampled map with probability 0.2 so that inference-time conditioning
on sampled maps stays in-distribution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

import numpy as np

from .diffusion import MapDiffusionModel, ModelConfig, load_model, save_model, train_model
from .errors import ContractViolation
from .maps import MapTriple

SAMPLED_COND_PROB = 0.2


def stage_config(base: ModelConfig, stage: str, n_parts: int) -> ModelConfig:
    if stage == "contact":
        return replace(base, map_channels=1, template_channels=1, target_cond_channels=0,
                       recon="mse", x0_clip=(-1.0, 1.0), data_scale=2.0, data_shift=-1.0)
    if stage == "part":
        return replace(base, map_channels=n_parts, template_channels=1 + n_parts,
                       target_cond_channels=1, recon="nll", x0_clip=(-1.0, 1.0),
                       data_scale=2.0, data_shift=-1.0, param_type="x0")
    if stage == "direction":
        return replace(base, map_channels=3, template_channels=1 + n_parts + 3,
                       target_cond_channels=1 + n_parts, recon="cosine", x0_clip=(-1.0, 1.0))
    raise ContractViolation(f"unknown stage '{stage}'")


def template_features(stage: str, maps: MapTriple):
    c = maps.contact[:, None]
    if stage == "contact":
        return c
    if stage == "part":
        return np.concatenate([c, maps.part], axis=1)
    return np.concatenate([c, maps.part, maps.direction], axis=1)


def stage_training_sample(stage: str, rec, sampled_contact=None, sampled_part=None):
    """Build one training dict for `MapDiffusionModel.training_loss`.

    rec carries: x_e, maps_e, x_a, maps_a, task (see the dataset module).
    """
    maps_e, maps_a = rec["maps_e"], rec["maps_a"]
    sample = {
        "x_e": rec["x_e"],
        "x_a": rec["x_a"],
        "feats_e": template_features(stage, maps_e),
        "contact_e": maps_e.contact,
        "task": rec["task"],
    }
    ca = maps_a.contact[:, None]
    if stage == "contact":
        sample.update(x0=ca, truth_e=maps_e.contact[:, None], cond_a=None)
    elif stage == "part":
        sample.update(x0=maps_a.part, truth_e=maps_e.part, cond_a=ca,
                      x0_row_weight=1.0 + 10.0 * maps_a.contact)
        if sampled_contact is not None:
            sample["cond_a_alt"] = sampled_contact[:, None]
            sample["alt_prob"] = SAMPLED_COND_PROB
    else:
        sample.update(x0=maps_a.direction, truth_e=maps_e.direction,
                      cond_a=np.concatenate([ca, maps_a.part], axis=1))
        if sampled_contact is not None:
            cond_alt = np.concatenate(
                [sampled_contact[:, None],
                 maps_a.part if sampled_part is None else sampled_part], axis=1)
            sample["cond_a_alt"] = cond_alt
            sample["alt_prob"] = SAMPLED_COND_PROB
    return sample


def finalize_contact(raw):
    return np.clip(raw[:, 0], 0.0, 1.0)


def finalize_part(raw):
    shifted = raw - raw.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def finalize_direction(raw):
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    out = np.where(norms > 1e-8, raw / np.maximum(norms, 1e-300),
                   np.array([[0.0, 0.0, 1.0]]))
    return out


@dataclass
class CascadeModels:
    contact: MapDiffusionModel
    part: MapDiffusionModel
    direction: MapDiffusionModel
    task_names: list

    @property
    def n_parts(self):
        return self.part.cfg.map_channels


def identity_records(records):
    """One template -> itself record per unique (template, task) pair."""
    seen, out = set(), []
    for rec in records:
        key = (rec.get("template_base", id(rec["x_e"])), rec["task"])
        if key in seen:
            continue
        seen.add(key)
        out.append({**rec, "x_a": rec["x_e"], "maps_a": rec["maps_e"],
                    "target_base": rec.get("template_base")})
    return out


def train_stage(stage: str, base_cfg: ModelConfig, records, n_parts,
                contact_model: MapDiffusionModel | None = None,
                epochs=None, seed=None, progress=None, augment_identity=True):
    """Train one cascade stage; later stages get a sampled-contact pool from
    the already-trained contact model for exposure-bias mitigation."""
    cfg = stage_config(base_cfg, stage, n_parts)
    model = MapDiffusionModel(cfg)
    if augment_identity:
        records = list(records) + identity_records(records)
    samples = []
    for i, rec in enumerate(records):
        sampled_c = None
        if stage != "contact" and contact_model is not None:
            sampled_c = sample_contact(contact_model, rec["x_e"], rec["maps_e"],
                                       rec["x_a"], rec["task"], seed=9000 + i)
        samples.append(stage_training_sample(stage, rec, sampled_contact=sampled_c))
    curve = train_model(model, samples, epochs=epochs, seed=seed, progress=progress)
    return model, curve


def sample_contact(model, x_e, maps_e: MapTriple, x_a, task, seed, plan_cache=None):
    raw = model.sample(x_e, template_features("contact", maps_e), x_a, None, task, seed,
                       plan_cache)
    return finalize_contact(raw)


def transfer_all(models: CascadeModels, x_e, maps_e: MapTriple, x_a, task, seed,
                 plan_cache=None) -> MapTriple:
    """Run the three-stage pipeline; deterministic per seed."""
    maps_e.validate()
    c_hat = sample_contact(models.contact, x_e, maps_e, x_a, task, seed, plan_cache)
    p_raw = models.part.sample(x_e, template_features("part", maps_e), x_a,
                               c_hat[:, None], task, seed + 1, plan_cache)
    p_hat = finalize_part(p_raw)
    cond = np.concatenate([c_hat[:, None], p_hat], axis=1)
    d_raw = models.direction.sample(x_e, template_features("direction", maps_e), x_a,
                                    cond, task, seed + 2, plan_cache)
    d_hat = finalize_direction(d_raw)
    return MapTriple(c_hat, p_hat, d_hat).validate()


# -- pipeline manifest -------------------------------------------------------


def save_cascade(out_dir, models: CascadeModels, hand_spec_path, normalization_scale=0.1):
    """Write the three checkpoints plus a manifest tying them together."""
    import os

    paths = {}
    for stage in ("contact", "part", "direction"):
        model = getattr(models, stage)
        path = os.path.join(out_dir, f"{stage}.ckpt")
        save_model(path, model)
        paths[stage] = {"checkpoint": f"{stage}.ckpt", "config": asdict(model.cfg)}
    manifest = {
        "schema": "grasptk-cascade v1",
        "stages": paths,
        "hand_spec": hand_spec_path,
        "task_names": models.task_names,
        "normalization_scale_m": normalization_scale,
    }
    mpath = os.path.join(out_dir, "pipeline.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return mpath


def _config_from_dict(d) -> ModelConfig:
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def load_cascade_partial(manifest_path):
    """Load whichever stages the manifest lists; returns a stage -> model dict."""
    import os

    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != "grasptk-cascade v1":
        raise ContractViolation("unknown pipeline manifest schema")
    base = os.path.dirname(manifest_path)
    loaded = {}
    for stage, entry in manifest["stages"].items():
        cfg = _config_from_dict(entry["config"])
        loaded[stage] = load_model(os.path.join(base, entry["checkpoint"]), cfg)
    return loaded, manifest


def load_cascade(manifest_path):
    loaded, manifest = load_cascade_partial(manifest_path)
    missing = {"contact", "part", "direction"} - set(loaded)
    if missing:
        raise ContractViolation(f"pipeline manifest is missing stages: {sorted(missing)}")
    models = CascadeModels(loaded["contact"], loaded["part"], loaded["direction"],
                           manifest["task_names"])
    return models, manifest


def update_pipeline_manifest(out_dir, stage, model, hand_spec_path, task_names,
                             normalization_scale=0.1):
    """Add/replace one stage entry in out_dir/pipeline.json (created if absent)."""
    import os

    mpath = os.path.join(out_dir, "pipeline.json")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            manifest = json.load(fh)
    else:
        manifest = {"schema": "grasptk-cascade v1", "stages": {},
                    "hand_spec": hand_spec_path, "task_names": list(task_names),
                    "normalization_scale_m": normalization_scale}
    manifest["stages"][stage] = {"checkpoint": f"{stage}.ckpt",
                                 "config": asdict(model.cfg)}
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return mpath
