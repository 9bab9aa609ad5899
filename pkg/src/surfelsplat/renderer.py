"""Tile-based differentiable rasterizer.

Binning happens per tile, but compositing runs on a flat (pixel, surfel)
contribution list sorted by (pixel, depth order).  The per-pixel transmittance
recurrence is evaluated with exactly the scalar operation sequence of a naive
sequential over-operator, so a tiling-free per-pixel reference renderer
matches bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cameras import Camera
from .field import Decoder, HashGrid, sh_encode
from .geometry import (
    KAPPA,
    SurfelCloud,
    beta_kernel,
    beta_kernel_grad,
    gaussian_kernel,
    gaussian_kernel_grad,
    intersect_batch,
    position_sort_key,
    project_aabb_batch,
    quat_frame,
    quat_frame_backward,
    sigmoid,
)

__all__ = [
    "Camera", "RenderConfig", "FrameBundle", "TileBins",
    "bin_and_sort", "render", "render_backward", "render_decomposed",
    "blend_stats",
]


@dataclass
class RenderConfig:
    tile_size: int = 16
    t_floor: float = 1e-4            # transmittance early stop
    kappa: float = KAPPA
    kernel_mode: str = "beta"        # "beta" | "gaussian"
    background: tuple = (1.0, 1.0, 1.0)
    bypass_decoder: bool = False     # warm-up mode: f_g[:3] are sigmoid RGB

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0.0 < self.t_floor < 1.0:
            raise ValueError("t_floor must be in (0, 1)")
        if self.kernel_mode not in ("beta", "gaussian"):
            raise ValueError(f"unknown kernel_mode {self.kernel_mode!r}")

    @property
    def bg(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64)


@dataclass
class TileBins:
    tiles_x: int
    tiles_y: int
    lists: list                     # per tile: sorted surfel index arrays
    rects: np.ndarray               # (N, 4) per-surfel pixel AABBs
    valid: np.ndarray               # (N,) on-screen mask
    depth: np.ndarray               # (N,) camera-space center depth


@dataclass
class FrameBundle:
    rgb: np.ndarray                 # (H, W, 3)
    alpha: np.ndarray               # (H, W)
    depth: np.ndarray               # (H, W) alpha-weighted expected depth
    normal: np.ndarray              # (H, W, 3) alpha-weighted camera-facing normals
    blends: np.ndarray              # (H, W) int contributions blended per pixel
    queries_saved: int = 0          # intersections skipped by the T_floor stop
    ctx: Optional[dict] = None      # saved intermediates for the backward pass


def bin_and_sort(cloud: SurfelCloud, camera: Camera, cfg: RenderConfig) -> TileBins:
    """Per-tile surfel index lists, depth sorted.

    Order is ascending camera-space center depth with a position-hash
    tie-break, so the result is independent of storage order.
    """
    ts = cfg.tile_size
    tiles_x = (camera.width + ts - 1) // ts
    tiles_y = (camera.height + ts - 1) // ts
    rects, valid = project_aabb_batch(cloud, camera, kappa=cfg.kappa)
    z = camera.world_to_cam(cloud.mu)[:, 2]
    key = position_sort_key(cloud.mu)
    order = np.lexsort((np.arange(cloud.count), key, z))

    lists = [[] for _ in range(tiles_x * tiles_y)]
    for i in order:
        if not valid[i]:
            continue
        u0, v0, u1, v1 = rects[i]
        for tv in range(v0 // ts, (v1 - 1) // ts + 1):
            for tu in range(u0 // ts, (u1 - 1) // ts + 1):
                lists[tv * tiles_x + tu].append(i)
    lists = [np.asarray(l, dtype=np.int64) for l in lists]
    return TileBins(tiles_x, tiles_y, lists, rects, valid, z)


def _build_pairs(bins: TileBins, camera: Camera, cfg: RenderConfig):
    """Flatten tile bins into candidate (pixel, surfel, order) pair arrays.

    Pairs are filtered to each surfel's own pixel rect and sorted by
    (pixel, depth order).
    """
    ts = cfg.tile_size
    W, H = camera.width, camera.height
    pix_list, sid_list, ord_list = [], [], []
    for tid, sids in enumerate(bins.lists):
        if len(sids) == 0:
            continue
        tv, tu = divmod(tid, bins.tiles_x)
        u0, v0 = tu * ts, tv * ts
        uu = np.arange(u0, min(u0 + ts, W))
        vv = np.arange(v0, min(v0 + ts, H))
        pix = (vv[:, None] * W + uu[None, :]).ravel()
        k, npx = len(sids), len(pix)
        pix_list.append(np.tile(pix, k))
        sid_list.append(np.repeat(sids, npx))
        ord_list.append(np.repeat(np.arange(k, dtype=np.int64), npx))
    if not pix_list:
        e = np.zeros(0, dtype=np.int64)
        return e, e, e
    pix = np.concatenate(pix_list)
    sid = np.concatenate(sid_list)
    order = np.concatenate(ord_list)
    # keep only pixels inside the surfel's own conservative rect
    u = pix % W
    v = pix // W
    r = bins.rects[sid]
    keep = (u >= r[:, 0]) & (u < r[:, 2]) & (v >= r[:, 1]) & (v < r[:, 3])
    pix, sid, order = pix[keep], sid[keep], order[keep]
    srt = np.lexsort((order, pix))
    return pix[srt], sid[srt], order[srt]


def _rank_groups(pix: np.ndarray):
    """Per-pixel contribution ranks and index groups per rank.

    `pix` must be sorted.  Returns (rank, groups) where groups[r] indexes all
    pairs that are the r-th contribution of their pixel, in pixel order.
    """
    P = len(pix)
    if P == 0:
        return np.zeros(0, dtype=np.int64), []
    first = np.ones(P, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    seg_start = np.where(first, np.arange(P), 0)
    seg_start = np.maximum.accumulate(seg_start)
    rank = np.arange(P) - seg_start
    by_rank = np.argsort(rank, kind="stable")
    counts = np.bincount(rank)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    groups = [by_rank[bounds[r]:bounds[r + 1]] for r in range(len(counts))]
    return rank, groups


def _segment_sum(pix, vals, hw):
    """Per-pixel sums of per-pair values, accumulated in pair order."""
    if vals.ndim == 1:
        return np.bincount(pix, weights=vals, minlength=hw)
    d = vals.shape[1]
    flat_idx = (pix[:, None] * d + np.arange(d)[None, :]).ravel()
    return np.bincount(flat_idx, weights=vals.ravel(), minlength=hw * d).reshape(hw, d)


def render(cloud: SurfelCloud, grid: Optional[HashGrid], decoder: Optional[Decoder],
           camera: Camera, cfg: RenderConfig, save_ctx: bool = False,
           mask_mode: str = "full") -> FrameBundle:
    """Forward render into a FrameBundle.

    mask_mode "surfel_only"/"hash_only" zeroes the complementary latent slice
    of every contribution before blending (geometry and weights unchanged).
    """
    H, W = camera.height, camera.width
    hw = H * W
    dirs = camera.ray_dirs()
    origin = camera.origin
    bg = cfg.bg

    bins = bin_and_sort(cloud, camera, cfg)
    pix, sid, order = _build_pairs(bins, camera, cfg)

    t_u, t_v, nrm = quat_frame(cloud.quat)
    scales = cloud.scales
    opac = sigmoid(cloud.o_logit)

    t, x, uv, r2, ok = intersect_batch(
        origin, dirs[pix], cloud.mu[sid], t_u[sid], t_v[sid], nrm[sid],
        scales[sid], kappa=cfg.kappa,
    )
    pix, sid = pix[ok], sid[ok]
    t, x, uv, r2 = t[ok], x[ok], uv[ok], r2[ok]

    if cfg.kernel_mode == "beta":
        g = beta_kernel(r2, cloud.b[sid])
    else:
        g = gaussian_kernel(r2, cfg.kappa)
    alpha_pair = opac[sid] * g

    rank, groups = _rank_groups(pix)
    P = len(pix)
    w = np.zeros(P)
    Ti = np.ones(P)
    active = np.zeros(P, dtype=bool)
    T_buf = np.ones(hw)
    for sel in groups:
        p = pix[sel]
        a = alpha_pair[sel]
        Tcur = T_buf[p]
        act = Tcur >= cfg.t_floor
        w[sel] = np.where(act, Tcur * a, 0.0)
        Ti[sel] = Tcur
        active[sel] = act
        T_buf[p] = np.where(act, Tcur * (1.0 - a), Tcur)

    alpha_img = _segment_sum(pix, w, hw)
    depth_img = _segment_sum(pix, w * t, hw)

    d_pair = dirs[pix]
    n_pair = nrm[sid]
    flip = np.where(np.sum(n_pair * d_pair, axis=-1) > 0.0, -1.0, 1.0)
    normal_img = _segment_sum(pix, w[:, None] * (flip[:, None] * n_pair), hw)
    blends_img = np.bincount(pix[active], minlength=hw).astype(np.int64)
    queries_saved = int(P - int(active.sum()))

    # hybrid latent per contribution
    if cfg.bypass_decoder:
        feat = sigmoid(cloud.f_g[sid, :3])
        grid_ctx = None
    else:
        assert grid is not None and decoder is not None
        hfeat, grid_ctx = grid.sample_with_grad(x) if save_ctx else (grid.sample(x), None)
        feat = np.concatenate([cloud.f_g[sid], hfeat], axis=1)
        if mask_mode == "surfel_only":
            feat[:, cloud.feat_dim:] = 0.0
        elif mask_mode == "hash_only":
            feat[:, :cloud.feat_dim] = 0.0
        elif mask_mode != "full":
            raise ValueError(f"unknown mask_mode {mask_mode!r}")

    F_pix = _segment_sum(pix, w[:, None] * feat, hw)

    if cfg.bypass_decoder:
        rgb = F_pix + bg[None, :] * (1.0 - alpha_img[:, None])
        dec_ctx = None
    else:
        fg_rgb, dec_ctx = decoder.forward(F_pix, sh_encode(dirs))
        rgb = fg_rgb * alpha_img[:, None] + bg[None, :] * (1.0 - alpha_img[:, None])

    ctx = None
    if save_ctx:
        ctx = dict(
            pix=pix, sid=sid, t=t, x=x, uv=uv, r2=r2, g=g,
            alpha_pair=alpha_pair, w=w, Ti=Ti, active=active, groups=groups,
            flip=flip, feat=feat, F_pix=F_pix, alpha_img=alpha_img,
            grid_ctx=grid_ctx, dec_ctx=dec_ctx, dirs=dirs, origin=origin,
            camera=camera, cfg=cfg, n_cloud=cloud.count, mask_mode=mask_mode,
        )
    return FrameBundle(
        rgb=rgb.reshape(H, W, 3),
        alpha=alpha_img.reshape(H, W),
        depth=depth_img.reshape(H, W),
        normal=normal_img.reshape(H, W, 3),
        blends=blends_img.reshape(H, W),
        queries_saved=queries_saved,
        ctx=ctx,
    )


def render_decomposed(cloud, grid, decoder, camera, cfg, mode: str) -> FrameBundle:
    """Render with the hash slice (surfel_only) or base slice (hash_only) masked."""
    if mode not in ("full", "surfel_only", "hash_only"):
        raise ValueError(f"unknown decomposition mode {mode!r}")
    return render(cloud, grid, decoder, camera, cfg, mask_mode=mode)


def render_backward(cloud: SurfelCloud, grid: Optional[HashGrid],
                    decoder: Optional[Decoder], bundle: FrameBundle,
                    grad_rgb: np.ndarray,
                    grad_alpha: Optional[np.ndarray] = None,
                    grad_depth: Optional[np.ndarray] = None,
                    grad_normal: Optional[np.ndarray] = None,
                    grad_w_pairs: Optional[np.ndarray] = None,
                    grad_t_pairs: Optional[np.ndarray] = None) -> dict:
    """Exact reverse pass of `render` (requires save_ctx=True).

    grad_rgb is (H, W, 3); the optional image/pair gradients come from the
    geometric regularizers.  Returns per-class gradients:
    {mu, quat, log_s, o_logit, b, f_g, table, decoder}.
    """
    ctx = bundle.ctx
    assert ctx is not None, "render must be called with save_ctx=True"
    assert ctx["n_cloud"] == cloud.count, "bundle does not match this cloud"
    cfg: RenderConfig = ctx["cfg"]
    camera: Camera = ctx["camera"]
    hw = camera.height * camera.width
    pix, sid = ctx["pix"], ctx["sid"]
    w, Ti, active = ctx["w"], ctx["Ti"], ctx["active"]
    t, x, uv, r2 = ctx["t"], ctx["x"], ctx["uv"], ctx["r2"]
    alpha_pair, feat, flip = ctx["alpha_pair"], ctx["feat"], ctx["flip"]
    dirs, origin = ctx["dirs"], ctx["origin"]
    bg = cfg.bg

    N = cloud.count
    grads = {
        "mu": np.zeros((N, 3)), "quat": np.zeros((N, 4)),
        "log_s": np.zeros((N, 2)), "o_logit": np.zeros(N),
        "b": np.zeros(N), "f_g": np.zeros_like(cloud.f_g),
    }

    g_rgb = np.asarray(grad_rgb, dtype=np.float64).reshape(hw, 3)
    g_alpha_img = np.zeros(hw)
    if grad_alpha is not None:
        g_alpha_img += grad_alpha.reshape(hw)
    g_depth_img = grad_depth.reshape(hw) if grad_depth is not None else None
    g_normal_img = grad_normal.reshape(hw, 3) if grad_normal is not None else None

    if cfg.bypass_decoder:
        gF = g_rgb
        g_alpha_img += -np.sum(bg[None, :] * g_rgb, axis=1)
        grad_decoder = None
        grad_table = None
    else:
        alpha_img = ctx["alpha_img"]
        fg_rgb = ctx["dec_ctx"][5]
        g_dec_rgb = g_rgb * alpha_img[:, None]
        g_alpha_img += np.sum((fg_rgb - bg[None, :]) * g_rgb, axis=1)
        gin, grad_decoder = decoder.backward(ctx["dec_ctx"], g_dec_rgb)
        gF = gin[:, : feat.shape[1]]
        grad_table = np.zeros_like(grid.table)

    # dL/dw per pair: every forward use of w
    gw = np.einsum("pd,pd->p", feat, gF[pix]) + g_alpha_img[pix]
    if g_depth_img is not None:
        gw += t * g_depth_img[pix]
    n_pair = quat_frame(cloud.quat)[2][sid]
    if g_normal_img is not None:
        gw += np.einsum("pd,pd->p", flip[:, None] * n_pair, g_normal_img[pix])
    if grad_w_pairs is not None:
        gw += grad_w_pairs

    g_feat = w[:, None] * gF[pix]
    g_t_pair = np.zeros_like(t)
    if g_depth_img is not None:
        g_t_pair += w * g_depth_img[pix]
    if grad_t_pairs is not None:
        g_t_pair += grad_t_pairs
    g_n_pair = np.zeros_like(n_pair)
    if g_normal_img is not None:
        g_n_pair += (w * flip)[:, None] * g_normal_img[pix]

    # transmittance recurrence, back to front:
    # dL/da_i = T_i gw_i - (sum_{j>i} w_j gw_j) / (1 - a_i)
    g_alpha_pair = np.zeros_like(alpha_pair)
    acc = np.zeros(hw)
    for sel in reversed(ctx["groups"]):
        p = pix[sel]
        act = active[sel]
        ga = np.where(act, Ti[sel] * gw[sel] - acc[p] / (1.0 - alpha_pair[sel]), 0.0)
        g_alpha_pair[sel] = ga
        acc[p] += np.where(act, w[sel] * gw[sel], 0.0)

    # alpha = opacity * g
    opac = sigmoid(cloud.o_logit)[sid]
    g_kernel = g_alpha_pair * opac
    g_opac = g_alpha_pair * ctx["g"]
    g_ologit_pair = g_opac * opac * (1.0 - opac)

    if cfg.kernel_mode == "beta":
        _, dk_dr2, dk_db = beta_kernel_grad(r2, cloud.b[sid])
        g_b_pair = g_kernel * dk_db
    else:
        _, dk_dr2 = gaussian_kernel_grad(r2, cfg.kappa)
        g_b_pair = None
    g_r2 = g_kernel * dk_dr2

    # latent split: per-surfel slice and hash slice
    if cfg.bypass_decoder:
        fg3 = sigmoid(cloud.f_g[sid, :3])
        g_fg_pair = g_feat * fg3 * (1.0 - fg3)
        dg = 3
        gx = np.zeros_like(x)
    else:
        dg = cloud.feat_dim
        g_fg_pair = g_feat[:, :dg]
        g_hash = g_feat[:, dg:]
        if ctx["mask_mode"] == "surfel_only":
            g_hash = np.zeros_like(g_hash)
        elif ctx["mask_mode"] == "hash_only":
            g_fg_pair = np.zeros_like(g_fg_pair)
        gx = grid.sample_backward(ctx["grid_ctx"], g_hash, grad_table) \
            if grid.levels > 0 else np.zeros_like(x)

    # intersection geometry
    t_u, t_v, nrm = quat_frame(cloud.quat)
    tu_p, tv_p, n_p = t_u[sid], t_v[sid], nrm[sid]
    s_p = cloud.scales[sid]
    d_pair = dirs[pix]
    ks2 = (cfg.kappa * s_p) ** 2
    ru2 = uv[:, 0] ** 2 / ks2[:, 0]
    rv2 = uv[:, 1] ** 2 / ks2[:, 1]
    g_uvu = g_r2 * 2.0 * uv[:, 0] / ks2[:, 0]
    g_uvv = g_r2 * 2.0 * uv[:, 1] / ks2[:, 1]
    g_logs_pair = np.stack([-2.0 * g_r2 * ru2, -2.0 * g_r2 * rv2], axis=1)

    rel = x - cloud.mu[sid]
    gx += g_uvu[:, None] * tu_p + g_uvv[:, None] * tv_p
    g_mu_pair = -(g_uvu[:, None] * tu_p + g_uvv[:, None] * tv_p)
    g_tu_pair = g_uvu[:, None] * rel
    g_tv_pair = g_uvv[:, None] * rel

    g_t_scalar = g_t_pair + np.einsum("pd,pd->p", gx, d_pair)
    dn = np.einsum("pd,pd->p", n_p, d_pair)
    dn = np.where(np.abs(dn) < 1e-300, 1.0, dn)
    a_vec = cloud.mu[sid] - origin[None, :]
    g_mu_pair += (g_t_scalar / dn)[:, None] * n_p
    g_n_pair += (g_t_scalar / dn)[:, None] * (a_vec - t[:, None] * d_pair)

    # scatter per-pair gradients onto surfels (pair order is deterministic)
    def scat(vals):
        return _segment_sum(sid, vals, N)

    grads["mu"] += scat(g_mu_pair)
    grads["log_s"] += scat(g_logs_pair)
    grads["o_logit"] += scat(g_ologit_pair)
    if g_b_pair is not None:
        grads["b"] += scat(g_b_pair)
    if cfg.bypass_decoder:
        grads["f_g"][:, :3] += scat(g_fg_pair)
    else:
        grads["f_g"] += scat(g_fg_pair)
    g_tu_s = scat(g_tu_pair)
    g_tv_s = scat(g_tv_pair)
    g_n_s = scat(g_n_pair)
    grads["quat"] += quat_frame_backward(cloud.quat, g_tu_s, g_tv_s, g_n_s)
    grads["table"] = grad_table
    grads["decoder"] = grad_decoder
    return grads


def blend_stats(bundle: FrameBundle) -> dict:
    """Blends-per-pixel summary plus hash-query savings from the early stop."""
    b = bundle.blends.ravel().astype(np.float64)
    return {
        "mean": float(b.mean()) if b.size else 0.0,
        "p50": float(np.percentile(b, 50)) if b.size else 0.0,
        "p95": float(np.percentile(b, 95)) if b.size else 0.0,
        "queries_saved": int(bundle.queries_saved),
    }
