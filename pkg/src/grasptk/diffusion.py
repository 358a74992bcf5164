"""DDPM machinery and the dual-branch conditional model for map transfer.

One `MapDiffusionModel` class covers all three cascade stages; the stages
differ only in channel counts and reconstruction loss (MSE for contact,
NLL for parts, negative cosine for directions).

Architecture per branch: a lightweight hierarchical point encoder
(farthest-point sampling + fixed-radius grouping + shared perceptron +
max-pool for abstraction; inverse-distance interpolation + perceptron for
propagation, 4 stages each), cross-attention adaptation modules fusing
template and target features in both directions, and per-point decoders
conditioned on a task-id embedding and a sinusoidal timestep embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NumericFault

# -- noise schedule ----------------------------------------------------------


class NoiseSchedule:
    """Linear-beta DDPM schedule."""

    def __init__(self, steps=1000, beta_start=1e-4, beta_end=2e-2):
        if steps < 1:
            raise ContractViolation("steps must be >= 1")
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps)
        if self.betas.min() <= 0.0 or self.betas.max() >= 1.0:
            raise ContractViolation("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigmas = np.sqrt(self.betas)

    def abar(self, t):
        """Cumulative product at step t (1-based); t=0 returns 1."""
        if t == 0:
            return 1.0
        return self.alpha_bars[t - 1]

    def forward_diffuse(self, x0, t, noise):
        """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
        if not 1 <= t <= self.steps:
            raise ContractViolation(f"t={t} outside [1, {self.steps}]")
        x0 = np.asarray(x0, dtype=np.float64)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x0.shape:
            raise ContractViolation("noise shape must match x0")
        ab = self.abar(t)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise

    def posterior_mean(self, z_t, eps_hat, t):
        """mu_theta = (z_t - (1 - a_t)/sqrt(1 - abar_t) * eps_hat)/sqrt(a_t)."""
        a = self.alphas[t - 1]
        ab = self.abar(t)
        return (z_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)

    def posterior_mean_clipped(self, z_t, eps_hat, t, lo, hi):
        """Posterior mean through the implied x0, clamped to [lo, hi].

        Algebraically identical to posterior_mean when the clamp is inactive;
        the clamp stops noise-prediction errors at large t from being
        amplified by the 1/sqrt(abar) factor over the rest of the chain.
        """
        ab = self.abar(t)
        x0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
        return self.posterior_mean_from_x0(z_t, np.clip(x0_hat, lo, hi), t)

    def posterior_mean_from_x0(self, z_t, x0_hat, t):
        """Posterior mean given an x0 estimate directly."""
        a = self.alphas[t - 1]
        b = self.betas[t - 1]
        ab = self.abar(t)
        ab_prev = self.abar(t - 1)
        return (np.sqrt(ab_prev) * b * x0_hat + np.sqrt(a) * (1.0 - ab_prev) * z_t) / (1.0 - ab)


# -- configuration -----------------------------------------------------------


@dataclass
class ModelConfig:
    map_channels: int = 1  # 1 contact, B part, 3 direction
    template_channels: int = 1  # feature channels fed to f_enc beyond xyz
    target_cond_channels: int = 0  # extra conditioning channels beyond the noisy map
    recon: str = "mse"  # "mse" | "nll" | "cosine"
    feat_dim: int = 512
    sa_widths: tuple = (64, 128, 256, 512)
    sa_ratios: tuple = (0.5, 0.25, 0.125, 0.0625)
    sa_radii: tuple = (0.25, 0.5, 1.0, 2.0)
    group_k: int = 16
    heads: int = 4
    head_dim: int = 64
    task_vocab: int = 8
    task_dim: int = 768
    time_dim: int = 128
    time_hidden: int = 512
    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    lr: float = 2e-4
    lambda_diff: float = 1.0
    clip_norm: float = 10.0
    x0_clip: tuple = (-1.0, 1.0)  # implied-x0 clamp during sampling (model space)
    # network output parameterization: "eps" predicts the noise, "x0" predicts
    # the clean map directly.  "x0" is the right choice for maps that are a
    # near-deterministic function of the conditioning (the part field): with
    # eps-parameterization the implied x0 at high t is the prediction scaled
    # by 1/sqrt(abar), so placement information is unexpressible there
    param_type: str = "eps"
    # width of a learned task embedding concatenated to every target point's
    # input features; 0 restricts task conditioning to the decoder head
    task_in_dim: int = 0
    data_scale: float = 1.0  # affine map into diffusion space: x = scale*d + shift
    data_shift: float = 0.0
    # timestep weighting of the denoising loss: "uniform", or "x0cap" which
    # equalizes implied-x0 error across t (capped, normalized to mean 1) so
    # the conditional signal is still learnable at high noise levels
    diff_t_weight: str = "uniform"
    diff_weight_cap: float = 10.0
    epochs: int = 300
    seed: int = 0
    recon_grad_to_target: bool = True

    def schedule(self):
        return NoiseSchedule(self.steps, self.beta_start, self.beta_end)


def toy_config(**overrides):
    """Desk-scale defaults: small widths and a short schedule for CPU runs."""
    cfg = ModelConfig(
        feat_dim=96,
        sa_widths=(24, 48, 72, 96),
        head_dim=24,
        time_hidden=96,
        task_dim=64,
        steps=80,
        beta_end=0.22,
        group_k=10,
        diff_t_weight="x0cap",
        task_in_dim=8,
    )
    return replace(cfg, **overrides)


# -- parameter init ----------------------------------------------------------


def _init_linear(params, rng, name, fan_in, fan_out, zero=False):
    scale = 0.0 if zero else np.sqrt(2.0 / fan_in)
    params[f"{name}.w"] = ad.param(rng.standard_normal((fan_in, fan_out)) * scale, name=f"{name}.w")
    params[f"{name}.b"] = ad.param(np.zeros(fan_out), name=f"{name}.b")


def _linear(params, name, x):
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def _detach(t):
    return ad.tensor(t.data)


# -- encoder plans (geometry-only, reusable across steps) --------------------


def _fps(points, n_out):
    """Deterministic farthest-point sampling starting at index 0."""
    n = len(points)
    n_out = min(n_out, n)
    chosen = np.empty(n_out, dtype=np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, n_out):
        idx = int(dist.argmax())
        chosen[i] = idx
        dist = np.minimum(dist, np.linalg.norm(points - points[idx], axis=1))
    return chosen


@dataclass
class _SAPlan:
    center_idx: np.ndarray  # (S,)
    group_idx: np.ndarray  # (S, K) indices into parent level
    rel_xyz: np.ndarray  # (S, K, 3)


@dataclass
class _FPPlan:
    interp_idx: np.ndarray  # (N_fine, 3) indices into coarse level
    interp_w: np.ndarray  # (N_fine, 3) normalized inverse-distance weights


@dataclass
class EncoderPlan:
    """Sampling/grouping/interpolation structure for one point cloud."""

    xyz_levels: list
    sa: list
    fp: list


def build_plan(points, cfg: ModelConfig) -> EncoderPlan:
    points = np.asarray(points, dtype=np.float64)
    xyz_levels = [points]
    sa_plans = []
    for ratio, radius in zip(cfg.sa_ratios, cfg.sa_radii):
        cur = xyz_levels[-1]
        s = max(1, int(round(len(points) * ratio)))
        centers = _fps(cur, s)
        cxyz = cur[centers]
        d2 = ((cxyz[:, None, :] - cur[None, :, :]) ** 2).sum(axis=2)
        k = min(cfg.group_k, len(cur))
        knn = np.argsort(d2, axis=1)[:, :k]
        kd = np.take_along_axis(d2, knn, axis=1)
        # ball-query style: neighbors beyond the radius collapse to the center
        outside = kd > radius * radius
        knn = np.where(outside, knn[:, :1], knn)
        rel = cur[knn] - cxyz[:, None, :]
        sa_plans.append(_SAPlan(centers, knn, rel))
        xyz_levels.append(cxyz)
    fp_plans = []
    for lvl in range(len(sa_plans), 0, -1):
        fine, coarse = xyz_levels[lvl - 1], xyz_levels[lvl]
        d2 = ((fine[:, None, :] - coarse[None, :, :]) ** 2).sum(axis=2)
        k = min(3, len(coarse))
        idx = np.argsort(d2, axis=1)[:, :k]
        d = np.sqrt(np.take_along_axis(d2, idx, axis=1))
        w = 1.0 / np.maximum(d, 1e-10)
        w /= w.sum(axis=1, keepdims=True)
        fp_plans.append(_FPPlan(idx, w))
    return EncoderPlan(xyz_levels, sa_plans, fp_plans)


def _init_encoder(params, rng, prefix, in_channels, cfg: ModelConfig):
    c = in_channels + 3  # relative xyz is always concatenated
    for i, w in enumerate(cfg.sa_widths):
        _init_linear(params, rng, f"{prefix}.sa{i}.l1", c + 3, w)
        _init_linear(params, rng, f"{prefix}.sa{i}.l2", w, w)
        c = w
    # feature propagation, coarsest to finest; skip widths mirror the SA stack
    skip = [in_channels + 3] + list(cfg.sa_widths[:-1])
    c = cfg.sa_widths[-1]
    widths = list(cfg.sa_widths[-2::-1]) + [cfg.feat_dim]
    for i in range(len(cfg.sa_widths)):
        w = widths[i]
        _init_linear(params, rng, f"{prefix}.fp{i}.l1", c + skip[-1 - i], w)
        _init_linear(params, rng, f"{prefix}.fp{i}.l2", w, w)
        c = w


def _encoder_down(params, prefix, plan: EncoderPlan, feats, cfg: ModelConfig):
    """Abstraction half: feats (N, C_in) -> (per-level skip feats, bottleneck)."""
    x0 = ad.concat([ad.tensor(plan.xyz_levels[0]), feats], axis=1)
    level_feats = [x0]
    f = x0
    for i, sa in enumerate(plan.sa):
        grouped = f[sa.group_idx]  # (S, K, C)
        g = ad.concat([ad.tensor(sa.rel_xyz), grouped], axis=2)
        g = ad.relu(_linear(params, f"{prefix}.sa{i}.l1", g))
        g = ad.relu(_linear(params, f"{prefix}.sa{i}.l2", g))
        f = ad.max_(g, axis=1)
        level_feats.append(f)
    return level_feats, f


def _encoder_up(params, prefix, plan: EncoderPlan, level_feats, f, cfg: ModelConfig):
    """Propagation half: bottleneck f (possibly fused) -> per-point (N, feat_dim)."""
    for i, fp in enumerate(plan.fp):
        skip = level_feats[-2 - i]
        interp = ad.sum_(f[fp.interp_idx] * ad.tensor(fp.interp_w[:, :, None]), axis=1)
        f = ad.concat([interp, skip], axis=1)
        f = ad.relu(_linear(params, f"{prefix}.fp{i}.l1", f))
        f = ad.relu(_linear(params, f"{prefix}.fp{i}.l2", f))
    return f


def _run_encoder(params, prefix, plan: EncoderPlan, feats, cfg: ModelConfig):
    """feats: Tensor (N, C_in); returns per-point features (N, feat_dim)."""
    level_feats, f = _encoder_down(params, prefix, plan, feats, cfg)
    return _encoder_up(params, prefix, plan, level_feats, f, cfg)


# -- adaptation (cross attention) -------------------------------------------


def _init_adapt(params, rng, prefix, cfg: ModelConfig):
    d, h, hd = cfg.sa_widths[-1], cfg.heads, cfg.head_dim
    _init_linear(params, rng, f"{prefix}.q", d, h * hd)
    _init_linear(params, rng, f"{prefix}.k", d, h * hd)
    _init_linear(params, rng, f"{prefix}.mlp1", h * d, d)
    _init_linear(params, rng, f"{prefix}.mlp2", d, d)


def adapt(params, prefix, h_query, h_context, cfg: ModelConfig):
    """Residual cross attention: query rows attend over context rows; the
    per-head readouts of the raw context are merged by a perceptron and
    added back to the query (identity map when the output perceptron is
    zero)."""
    n, d = h_query.shape
    m = h_context.shape[0]
    h, hd = cfg.heads, cfg.head_dim
    q = ad.transpose(ad.reshape(_linear(params, f"{prefix}.q", h_query), (n, h, hd)), (1, 0, 2))
    k = ad.transpose(ad.reshape(_linear(params, f"{prefix}.k", h_context), (m, h, hd)), (1, 0, 2))
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
    attn = ad.softmax(scores, axis=-1)  # (H, N, M)
    ctx = ad.reshape(h_context, (1, m, d)) * ad.tensor(np.ones((h, 1, 1)))
    readout = attn @ ctx  # (H, N, D)
    readout = ad.reshape(ad.transpose(readout, (1, 0, 2)), (n, h * d))
    out = ad.relu(_linear(params, f"{prefix}.mlp1", readout))
    out = _linear(params, f"{prefix}.mlp2", out)
    return h_query + out


# -- embeddings --------------------------------------------------------------


def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


# -- the model ---------------------------------------------------------------


class MapDiffusionModel:
    """Dual-branch conditional diffusion model for one map type."""

    def __init__(self, cfg: ModelConfig, rng=None):
        self.cfg = cfg
        self.schedule = cfg.schedule()
        rng = rng or np.random.default_rng(cfg.seed)
        p = {}
        _init_encoder(p, rng, "f_enc", cfg.template_channels, cfg)
        _init_encoder(p, rng, "g_enc",
                      cfg.target_cond_channels + cfg.map_channels + cfg.task_in_dim, cfg)
        if cfg.task_in_dim > 0:
            p["task_in_table"] = ad.param(
                rng.standard_normal((cfg.task_vocab, cfg.task_in_dim)) * 0.2,
                name="task_in_table")
        _init_adapt(p, rng, "A_a", cfg)
        _init_adapt(p, rng, "A_e", cfg)
        d = cfg.feat_dim
        # target decoder with conditioning injection at the bottleneck
        _init_linear(p, rng, "g_dec.in", d, d)
        _init_linear(p, rng, "g_dec.mid", d, d)
        _init_linear(p, rng, "g_dec.out", d, cfg.map_channels)
        _init_linear(p, rng, "task_proj", cfg.task_dim, d)
        _init_linear(p, rng, "time_proj", cfg.time_hidden, d)
        # template reconstruction head
        out_ch = {"mse": cfg.map_channels, "nll": cfg.map_channels, "cosine": 3}[cfg.recon]
        _init_linear(p, rng, "f_dec.in", d, d)
        _init_linear(p, rng, "f_dec.out", d, out_ch)
        # timestep MLP (sinusoidal -> hidden -> hidden, swish)
        _init_linear(p, rng, "time_mlp.l1", cfg.time_dim, cfg.time_hidden)
        _init_linear(p, rng, "time_mlp.l2", cfg.time_hidden, cfg.time_hidden)
        p["task_table"] = ad.param(rng.standard_normal((cfg.task_vocab, cfg.task_dim)) * 0.02,
                                   name="task_table")
        self.params = p
        if cfg.param_type not in ("eps", "x0"):
            raise ContractViolation(f"unknown param_type '{cfg.param_type}'")
        if cfg.diff_t_weight == "x0cap":
            ab = self.schedule.alpha_bars
            w = 1.0 + np.minimum((1.0 - ab) / ab, cfg.diff_weight_cap)
            self._t_weights = w / w.mean()
        elif cfg.diff_t_weight == "uniform":
            self._t_weights = np.ones(cfg.steps)
        else:
            raise ContractViolation(f"unknown diff_t_weight '{cfg.diff_t_weight}'")

    # -- plan cache ----------------------------------------------------------

    _plan_cache_size = 512

    def __getstate__(self):  # plans hold no parameters; rebuild lazily
        raise TypeError("pickle the checkpoint, not the model")

    def plan_for(self, points, cache=None):
        if cache is None:
            return build_plan(points, self.cfg)
        key = id(points)
        if key not in cache:
            if len(cache) >= self._plan_cache_size:
                cache.pop(next(iter(cache)))
            cache[key] = build_plan(points, self.cfg)
        return cache[key]

    # -- forward pieces ------------------------------------------------------

    def encode_template(self, plan, feats_e):
        """Abstraction half of the template branch: (skip levels, bottleneck)."""
        return _encoder_down(self.params, "f_enc", plan, feats_e, self.cfg)

    def encode_target(self, plan, feats_a):
        """Abstraction half of the target branch: (skip levels, bottleneck)."""
        return _encoder_down(self.params, "g_enc", plan, feats_a, self.cfg)

    def time_feature(self, t):
        emb = ad.tensor(sinusoidal_embedding(float(t), self.cfg.time_dim))
        h = ad.swish(_linear(self.params, "time_mlp.l1", emb))
        return ad.swish(_linear(self.params, "time_mlp.l2", h))

    def decode_target(self, fused, task_id, t):
        if not 0 <= task_id < self.cfg.task_vocab:
            raise ContractViolation(f"task id {task_id} outside vocabulary")
        cond = (_linear(self.params, "task_proj", self.params["task_table"][task_id])
                + _linear(self.params, "time_proj", self.time_feature(t)))
        h = ad.relu(_linear(self.params, "g_dec.in", fused) + ad.reshape(cond, (1, -1)))
        h = ad.relu(_linear(self.params, "g_dec.mid", h))
        return _linear(self.params, "g_dec.out", h)

    def decode_template(self, plan_e, levels_e, fused_bott_e):
        per_point = _encoder_up(self.params, "f_enc", plan_e, levels_e, fused_bott_e, self.cfg)
        h = ad.relu(_linear(self.params, "f_dec.in", per_point))
        out = _linear(self.params, "f_dec.out", h)
        if self.cfg.recon == "nll":
            out = ad.softmax(out, axis=-1)
        return out

    def predict_noise(self, z_t, plan_a, cond_a, h_e_bott, task_id, t):
        """Network output for noisy map z_t (ndarray or Tensor, (m, ch)):
        eps_hat under the "eps" parameterization, x0_hat under "x0".

        Fusion with the template happens at the encoder bottleneck, which
        keeps the attention quadratic in the coarse point count only.
        Returns (eps_hat, target bottleneck features).
        """
        z = z_t if isinstance(z_t, ad.Tensor) else ad.tensor(np.asarray(z_t, dtype=np.float64))
        feats = z if cond_a is None else ad.concat([ad.tensor(cond_a), z], axis=1)
        if self.cfg.task_in_dim > 0:
            if not 0 <= task_id < self.cfg.task_vocab:
                raise ContractViolation(f"task id {task_id} outside vocabulary")
            row = ad.reshape(self.params["task_in_table"][task_id], (1, -1))
            tile = row * ad.tensor(np.ones((z.shape[0], 1)))
            feats = ad.concat([feats, tile], axis=1)
        levels_a, bott_a = self.encode_target(plan_a, feats)
        fused_bott = adapt(self.params, "A_a", bott_a, h_e_bott, self.cfg)
        per_point = _encoder_up(self.params, "g_enc", plan_a, levels_a, fused_bott, self.cfg)
        return self.decode_target(per_point, task_id, t), bott_a

    # -- losses --------------------------------------------------------------

    def recon_loss(self, recon, template_truth, template_contact):
        cfg = self.cfg
        if cfg.recon == "mse":
            resid = recon - ad.tensor(template_truth)
            return ad.mean_(resid * resid)
        if cfg.recon == "nll":
            from .maps import CONTACT_LABEL_FLOOR

            rows = np.where(np.asarray(template_contact) > CONTACT_LABEL_FLOOR)[0]
            if len(rows) == 0:
                return ad.tensor(0.0)
            probs = ad.maximum_c(recon[rows], 1e-12)
            return -ad.mean_(ad.sum_(ad.tensor(template_truth[rows]) * ad.log(probs), axis=-1))
        if cfg.recon == "cosine":
            norms = np.linalg.norm(recon.data, axis=1)
            good = norms > 1e-8
            n_bad = int((~good).sum())
            if n_bad > 0.05 * len(norms):
                raise NumericFault(f"{n_bad} zero-norm direction reconstructions in batch")
            rows = np.where(good)[0]
            pred = ad.normalize_rows(recon[rows])
            truth = np.asarray(template_truth)[rows]
            truth = truth / np.maximum(np.linalg.norm(truth, axis=1, keepdims=True), 1e-12)
            return -ad.mean_(ad.sum_(pred * ad.tensor(truth), axis=-1))
        raise ContractViolation(f"unknown recon loss '{cfg.recon}'")

    def training_loss(self, sample, rng, plan_cache=None):
        """sample keys: x_e, feats_e, contact_e, truth_e, x_a, x0, cond_a, task."""
        cfg = self.cfg
        t = int(rng.integers(1, self.schedule.steps + 1))
        x0 = cfg.data_scale * np.asarray(sample["x0"], dtype=np.float64) + cfg.data_shift
        noise = rng.standard_normal(x0.shape)
        z_t = self.schedule.forward_diffuse(x0, t, noise)

        # exposure-bias mitigation: occasionally condition on a model-sampled
        # upstream map instead of ground truth (see cascade module)
        cond_a = sample.get("cond_a")
        alt = sample.get("cond_a_alt")
        if alt is not None and rng.random() < sample.get("alt_prob", 0.2):
            cond_a = alt

        plan_e = self.plan_for(sample["x_e"], plan_cache)
        plan_a = self.plan_for(sample["x_a"], plan_cache)
        levels_e, bott_e = self.encode_template(plan_e, ad.tensor(sample["feats_e"]))
        out, bott_a = self.predict_noise(z_t, plan_a, cond_a, bott_e, sample["task"], t)
        if cfg.param_type == "x0":
            resid = out - ad.tensor(x0)
            rw = sample.get("x0_row_weight")
            if rw is None:
                l_diff = ad.mean_(resid * resid)
            else:
                w = np.asarray(rw, dtype=np.float64)[:, None]
                l_diff = ad.mean_(ad.tensor(w / w.mean()) * resid * resid)
        else:
            resid = out - ad.tensor(noise)
            l_diff = float(self._t_weights[t - 1]) * ad.mean_(resid * resid)

        bott_a_for_recon = bott_a if cfg.recon_grad_to_target else _detach(bott_a)
        fused_bott_e = adapt(self.params, "A_e", bott_e, bott_a_for_recon, cfg)
        recon = self.decode_template(plan_e, levels_e, fused_bott_e)
        l_recon = self.recon_loss(recon, sample["truth_e"], sample["contact_e"])
        return l_recon, l_diff

    # -- sampling ------------------------------------------------------------

    def sample(self, x_e, feats_e, x_a, cond_a, task_id, seed, plan_cache=None):
        """Full reverse chain from z_T ~ N(0, I); returns the raw map (m, ch)."""
        rng = np.random.default_rng(seed)
        sched = self.schedule
        plan_e = self.plan_for(np.asarray(x_e, dtype=np.float64), plan_cache)
        plan_a = self.plan_for(np.asarray(x_a, dtype=np.float64), plan_cache)
        _, bott_e = self.encode_template(plan_e, ad.tensor(feats_e))
        h_e = _detach(bott_e)
        m = len(x_a)
        z = rng.standard_normal((m, self.cfg.map_channels))
        lo, hi = self.cfg.x0_clip
        for t in range(sched.steps, 0, -1):
            out, _ = self.predict_noise(z, plan_a, cond_a, h_e, task_id, t)
            if self.cfg.param_type == "x0":
                mu = sched.posterior_mean_from_x0(z, np.clip(out.data, lo, hi), t)
            else:
                mu = sched.posterior_mean_clipped(z, out.data, t, lo, hi)
            if t > 1:
                z = mu + sched.sigmas[t - 1] * rng.standard_normal(mu.shape)
            else:
                z = mu
        return (z - self.cfg.data_shift) / self.cfg.data_scale


# -- training loop -----------------------------------------------------------


def train_model(model: MapDiffusionModel, samples, epochs=None, seed=None, progress=None):
    """Joint two-branch training; returns the per-epoch loss curve.

    samples: list of dicts as consumed by `training_loss`.  Deterministic
    given (model init, samples, seed).
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    opt = ad.Adam(model.params, lr=cfg.lr)
    plan_cache = {}
    curve = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        sum_recon = sum_diff = 0.0
        for si in order:
            step += 1
            ad.zero_grads(model.params)
            l_recon, l_diff = model.training_loss(samples[si], rng, plan_cache)
            loss = l_recon + cfg.lambda_diff * l_diff
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericFault(f"non-finite training loss at step {step}")
            ad.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for k, p in model.params.items()}
            grads, _ = ad.clip_global_norm(grads, cfg.clip_norm)
            opt.step(grads)
            sum_recon += float(l_recon.data)
            sum_diff += float(l_diff.data)
        curve.append((epoch, sum_recon / len(samples), sum_diff / len(samples)))
        if progress is not None:
            progress(epoch, curve[-1])
    return curve


def save_loss_curve(path, curve):
    with open(path, "w") as fh:
        fh.write("epoch,l_recon,l_diff\n")
        for epoch, lr_, ld in curve:
            fh.write(f"{epoch},{lr_:.17g},{ld:.17g}\n")


def save_model(path, model: MapDiffusionModel):
    ad.save_checkpoint(path, model.params)


def load_model(path, cfg: ModelConfig) -> MapDiffusionModel:
    model = MapDiffusionModel(cfg)
    stored = ad.load_checkpoint(path)
    if set(stored) != set(model.params):
        raise ContractViolation("checkpoint parameter names do not match the config")
    for k, arr in stored.items():
        if model.params[k].data.shape != arr.shape:
            raise ContractViolation(f"checkpoint shape mismatch for '{k}'")
        model.params[k].data = arr.copy()
    return model
