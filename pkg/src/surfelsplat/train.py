"""Optimization engine: phase schedule (warm-up -> hybrid+MCMC -> BCE),
SGLD position noise, dead-surfel relocation, pruning, and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .dataio import Checkpoint, Dataset, save_checkpoint
from .field import AdamState, Decoder, HashGrid, adam_step
from .geometry import SurfelCloud, logit, quat_frame, sigmoid
from .losses import (LossWeights, bce_loss, distortion_loss, normal_loss,
                     opacity_reg, rgb_loss, total_loss)
from .renderer import RenderConfig, render, render_backward

PHASES = ("warmup", "mcmc", "bce")


@dataclass
class TrainConfig:
    total_iters: int = 30000
    warmup_iters: int = 10000
    bce_start_iter: int = 24000          # 0.8 * total
    mcmc_cap: int = 100000
    relocation_period: int = 100
    dead_threshold: float = 0.005
    prune_threshold: float = 0.01
    noise_lr: float = 5e-4
    tangent_fraction: float = 0.95       # rho: noise share in the tangent plane
    noise_gate_k: float = 100.0
    noise_gate_o: float = 0.05
    beta_init: float = 10.0
    kernel_mode: str = "beta"
    bce_mode: str = "mean"               # "mean" | "sum"

    # latent sizes
    surfel_feat_dim: int = 4
    hash_levels: int = 1
    hash_table_size: int = 2 ** 19
    hash_feat_dim: int = 20
    hash_resolution: int = 1024
    decoder_hidden: int = 256

    # loss weights
    lambda_ssim: float = 0.2
    lambda_dist: float = 100.0
    lambda_normal: float = 0.05
    lambda_opacity: float = 0.01
    lambda_bce: float = 0.01

    # learning rates
    lr_mu: float = 1.6e-4
    lr_mu_final: float = 1.6e-6
    lr_quat: float = 1e-3
    lr_log_s: float = 5e-3
    lr_o_logit: float = 0.05
    lr_b: float = 0.01
    lr_f_g: float = 2.5e-3
    lr_table: float = 1e-2
    lr_decoder: float = 1e-3

    # renderer
    tile_size: int = 16
    t_floor: float = 1e-4
    kappa: float = 3.0
    background: tuple = (1.0, 1.0, 1.0)

    # bookkeeping
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 0         # 0: only final
    init_scale: float = 0.0              # 0: derive from nearest neighbors

    def validate(self) -> None:
        if self.total_iters > 0:
            if not (self.warmup_iters < self.bce_start_iter < self.total_iters):
                raise ValueError(
                    "require warmup_iters < bce_start_iter < total_iters, got "
                    f"{self.warmup_iters}, {self.bce_start_iter}, {self.total_iters}")
        if not 0.0 <= self.tangent_fraction <= 1.0:
            raise ValueError("tangent_fraction must be in [0, 1]")
        if self.kernel_mode not in ("beta", "gaussian"):
            raise ValueError(f"unknown kernel_mode {self.kernel_mode!r}")
        if self.bce_mode not in ("mean", "sum"):
            raise ValueError(f"unknown bce_mode {self.bce_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = {f for f in TrainConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "background" in d:
            d["background"] = tuple(d["background"])
        cfg = TrainConfig(**d)
        cfg.validate()
        return cfg

    @staticmethod
    def paper_preset() -> "TrainConfig":
        return TrainConfig()

    @staticmethod
    def desk_preset() -> "TrainConfig":
        """Scaled-down recipe keeping the phase proportions of the full one."""
        return TrainConfig(
            total_iters=2000,
            warmup_iters=666,
            bce_start_iter=1600,
            mcmc_cap=256,
            relocation_period=100,
            hash_table_size=2 ** 15,
            hash_resolution=256,
            decoder_hidden=64,
            bce_mode="sum",
            lambda_dist=1.0,
            lambda_bce=2e-4,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ssim, self.lambda_dist,
                           self.lambda_normal, self.lambda_opacity,
                           self.lambda_bce)

    def render_config(self, phase: str) -> RenderConfig:
        # warm-up is plain 2DGS: direct RGB surfels and gaussian kernels
        warm = phase == "warmup"
        return RenderConfig(
            tile_size=self.tile_size, t_floor=self.t_floor, kappa=self.kappa,
            kernel_mode="gaussian" if warm else self.kernel_mode,
            background=self.background, bypass_decoder=warm,
        )

    def lr_mu_at(self, iteration: int) -> float:
        if self.total_iters <= 0:
            return self.lr_mu
        frac = min(iteration / self.total_iters, 1.0)
        return self.lr_mu * (self.lr_mu_final / self.lr_mu) ** frac


def phase_for_iter(iteration: int, cfg: TrainConfig) -> str:
    if iteration < cfg.warmup_iters:
        return "warmup"
    if iteration < cfg.bce_start_iter:
        return "mcmc"
    return "bce"


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def init_cloud(dataset: Dataset, cfg: TrainConfig,
               rng: np.random.Generator) -> SurfelCloud:
    """Seed surfels from the dataset point cloud when present, else uniformly
    in the scene box."""
    lo, hi = dataset.scene_aabb
    if dataset.points is not None and len(dataset.points) > 0:
        pts = np.array(dataset.points, dtype=np.float64)  # copy: mu is trained in place
        if len(pts) > cfg.mcmc_cap:
            sel = rng.choice(len(pts), size=cfg.mcmc_cap, replace=False)
            pts = pts[sel]
    else:
        pts = rng.uniform(lo, hi, size=(cfg.mcmc_cap, 3))
    n = len(pts)
    if cfg.init_scale > 0:
        s0 = np.full(n, cfg.init_scale)
    elif n > 1:
        d, _ = cKDTree(pts).query(pts, k=2)
        s0 = np.clip(d[:, 1], 1e-3, 0.5)
    else:
        s0 = np.full(n, 0.1)
    return SurfelCloud(
        mu=pts,
        quat=random_quats(rng, n),
        log_s=np.log(np.stack([s0, s0], axis=1)),
        o_logit=np.zeros(n),                      # opacity 0.5
        b=np.full(n, cfg.beta_init),
        f_g=np.zeros((n, cfg.surfel_feat_dim)),
    )


def init_state(dataset: Dataset, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    cloud = init_cloud(dataset, cfg, rng)
    lo, hi = dataset.scene_aabb
    grid = HashGrid.create(
        levels=cfg.hash_levels, table_size=cfg.hash_table_size,
        feat_dim=cfg.hash_feat_dim, aabb_min=lo, aabb_max=hi,
        finest_resolution=cfg.hash_resolution, rng=rng)
    in_dim = cfg.surfel_feat_dim + grid.out_dim + 16
    decoder = Decoder.create(in_dim, hidden=cfg.decoder_hidden, rng=rng)
    opt_states = {"cloud": AdamState(), "grid": AdamState(), "decoder": AdamState()}
    return cloud, grid, decoder, opt_states, rng


# ---------------------------------------------------------------------------
# MCMC machinery
# ---------------------------------------------------------------------------


def sgld_step(cloud: SurfelCloud, cfg: TrainConfig,
              rng: np.random.Generator) -> None:
    """Inject opacity-gated exploration noise, mostly in the tangent plane."""
    n = cloud.count
    if n == 0 or cfg.noise_lr <= 0:
        return
    xi = rng.normal(size=(n, 3))
    t_u, t_v, nrm = quat_frame(cloud.quat)
    s = cloud.scales
    rho = cfg.tangent_fraction
    eps = rho * (xi[:, 0:1] * s[:, 0:1] * t_u + xi[:, 1:2] * s[:, 1:2] * t_v) \
        + (1.0 - rho) * xi[:, 2:3] * np.min(s, axis=1, keepdims=True) * nrm
    gate = sigmoid(-cfg.noise_gate_k * (cloud.opacity - cfg.noise_gate_o))
    cloud.mu += math.sqrt(2.0 * cfg.noise_lr) * gate[:, None] * eps


def relocate_dead(cloud: SurfelCloud, opt_state: AdamState,
                  rng: np.random.Generator, cfg: TrainConfig) -> int:
    """Respawn dead surfels at opacity-weighted donors; two-way opacity split.

    Both halves get opacity 1 - sqrt(1 - o_donor), so expected coverage is
    conserved: (1 - o_new)^2 = 1 - o_donor.  Returns the relocation count.
    """
    op = cloud.opacity
    dead = np.flatnonzero(op < cfg.dead_threshold)
    if len(dead) == 0:
        return 0
    live = np.flatnonzero(op >= cfg.dead_threshold)
    if len(live) == 0:
        import warnings
        warnings.warn("relocation skipped: no live surfels")
        return 0
    probs = op[live] / op[live].sum()
    donors = live[rng.choice(len(live), size=len(dead), p=probs)]

    cloud.mu[dead] = cloud.mu[donors]
    cloud.quat[dead] = cloud.quat[donors]
    cloud.log_s[dead] = cloud.log_s[donors]
    cloud.f_g[dead] = cloud.f_g[donors]
    o_new = 1.0 - np.sqrt(1.0 - op[donors])
    o_new = np.clip(o_new, 1e-6, 1.0 - 1e-6)
    cloud.o_logit[dead] = logit(o_new)
    cloud.o_logit[donors] = logit(o_new)
    cloud.b[dead] = cfg.beta_init
    cloud.b[donors] = cfg.beta_init

    touched = np.concatenate([dead, donors])
    for buf in (opt_state.m, opt_state.v):
        for arr in buf.values():
            arr[touched] = 0.0
    return len(dead)


def prune(cloud: SurfelCloud, opt_state: AdamState,
          threshold: float) -> SurfelCloud:
    """Drop surfels below the opacity threshold, compacting optimizer state."""
    keep = cloud.opacity >= threshold
    if keep.all():
        return cloud
    for buf in (opt_state.m, opt_state.v):
        for k in list(buf):
            buf[k] = buf[k][keep]
    return cloud.select(keep)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def psnr_of(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((pred - gt) ** 2))
    return float("inf") if mse == 0.0 else -10.0 * math.log10(mse)


def train_step(cloud, grid, decoder, opt_states, dataset, cfg, rng,
               iteration: int) -> dict:
    """One optimization step; returns the log record."""
    phase = phase_for_iter(iteration, cfg)
    rcfg = cfg.render_config(phase)
    view = int(rng.integers(len(dataset)))
    camera = dataset.cameras[view]
    gt = dataset.images[view]

    bundle = render(cloud, grid, decoder, camera, rcfg, save_ctx=True)
    ctx = bundle.ctx
    hw = camera.height * camera.width
    weights = cfg.weights()

    rgb_v, g_rgb = rgb_loss(bundle.rgb, gt, lambda_ssim=cfg.lambda_ssim)
    dist_v, g_w, g_t = distortion_loss(ctx["pix"], ctx["w"], ctx["t"], hw)
    nrm_v, g_nimg, g_aimg = normal_loss(bundle.normal, bundle.depth,
                                        bundle.alpha, camera)
    op_v, g_ol_op = opacity_reg(cloud.o_logit)
    bce_v, g_ol_bce = bce_loss(cloud.o_logit, mode=cfg.bce_mode)
    report = total_loss(rgb_v, dist_v, nrm_v, op_v, bce_v, weights, phase)
    if not math.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss at iteration {iteration}")

    grads = render_backward(
        cloud, grid, decoder, bundle, g_rgb,
        grad_alpha=weights.lambda_normal * g_aimg,
        grad_normal=weights.lambda_normal * g_nimg,
        grad_w_pairs=weights.lambda_dist * g_w,
        grad_t_pairs=weights.lambda_dist * g_t,
    )
    if phase in ("mcmc", "bce"):
        grads["o_logit"] += weights.lambda_opacity * g_ol_op
    if phase == "bce":
        grads["o_logit"] += weights.lambda_bce * g_ol_bce

    lr_cloud = {
        "mu": cfg.lr_mu_at(iteration), "quat": cfg.lr_quat,
        "log_s": cfg.lr_log_s, "o_logit": cfg.lr_o_logit,
        "b": cfg.lr_b, "f_g": cfg.lr_f_g,
    }
    adam_step(cloud.param_dict(), grads, opt_states["cloud"], lr_cloud)
    if phase != "warmup":
        if grid.levels > 0 and grads["table"] is not None:
            adam_step({"table": grid.table}, {"table": grads["table"]},
                      opt_states["grid"], cfg.lr_table)
        if grads["decoder"] is not None:
            adam_step(decoder.param_dict(), grads["decoder"],
                      opt_states["decoder"], cfg.lr_decoder)
    cloud.normalize_rotations()
    cloud.clamp_scales()

    if phase == "mcmc":
        sgld_step(cloud, cfg, rng)
        if (iteration + 1) % cfg.relocation_period == 0:
            relocate_dead(cloud, opt_states["cloud"], rng, cfg)

    return {
        "iter": iteration,
        "phase": phase,
        "losses": report.to_dict(),
        "psnr": psnr_of(bundle.rgb, gt),
        "n_surfels": cloud.count,
        "mean_blends": float(bundle.blends.mean()),
    }


def make_checkpoint(cfg, cloud, grid, decoder, opt_states, iteration, rng):
    return Checkpoint(config=cfg.to_dict(), cloud=cloud, grid=grid,
                      decoder=decoder, opt_states=opt_states,
                      iteration=iteration,
                      rng_state=rng.bit_generator.state)


def train(dataset: Dataset, cfg: TrainConfig,
          out_dir: Optional[Path] = None,
          resume: Optional[Checkpoint] = None,
          log_hook=None):
    """Full schedule; returns (Checkpoint, log records).

    Deterministic given cfg.seed; resuming from a checkpoint reproduces the
    remaining log of the uninterrupted run exactly.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset has no views")
    if resume is not None:
        cloud = resume.cloud
        grid = resume.grid
        decoder = resume.decoder
        opt_states = resume.opt_states
        rng = resume.make_rng()
        start = resume.iteration
    else:
        cloud, grid, decoder, opt_states, rng = init_state(dataset, cfg)
        start = 0

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "log.jsonl", "a")
    else:
        log_file = None

    log = []
    try:
        for it in range(start, cfg.total_iters):
            try:
                rec = train_step(cloud, grid, decoder, opt_states, dataset,
                                 cfg, rng, it)
            except FloatingPointError:
                if out_dir is not None:
                    save_checkpoint(
                        make_checkpoint(cfg, cloud, grid, decoder, opt_states,
                                        it, rng),
                        out_dir / "diagnostic.ckpt")
                raise
            if phase_for_iter(it, cfg) == "bce" \
                    and (it + 1) % cfg.relocation_period == 0:
                cloud = prune(cloud, opt_states["cloud"], cfg.prune_threshold)
            if (it + 1) % cfg.log_interval == 0 or it + 1 == cfg.total_iters:
                log.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
                if log_hook is not None:
                    log_hook(rec)
            if out_dir is not None and cfg.checkpoint_interval > 0 \
                    and (it + 1) % cfg.checkpoint_interval == 0:
                save_checkpoint(
                    make_checkpoint(cfg, cloud, grid, decoder, opt_states,
                                    it + 1, rng),
                    out_dir / f"iter_{it + 1:06d}.ckpt")
    finally:
        if log_file is not None:
            log_file.close()

    ckpt = make_checkpoint(cfg, cloud, grid, decoder, opt_states,
                           cfg.total_iters, rng)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoint.ckpt")
    return ckpt, log
