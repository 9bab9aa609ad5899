"""Shared test fixtures: an independent reference renderer and random-scene
builders used across the suite."""

import numpy as np

from surfelsplat.cameras import Camera, look_at_pose
from surfelsplat.field import Decoder, HashGrid, sh_encode
from surfelsplat.geometry import (EPS_PARALLEL, T_NEAR, SurfelCloud,
                                  beta_kernel, gaussian_kernel, position_sort_key,
                                  quat_frame, sigmoid)


def make_camera(res=16, eye=(0.0, -2.5, 1.2), target=(0.0, 0.0, 0.0),
                fov_deg=50.0):
    f = 0.5 * res / np.tan(0.5 * np.radians(fov_deg))
    return Camera(width=res, height=res, fx=f, fy=f, cx=res / 2.0,
                  cy=res / 2.0, pose=look_at_pose(eye, target))


def make_cloud(rng, n=8, feat_dim=4, box=0.8):
    q = rng.normal(size=(n, 4))
    return SurfelCloud(
        mu=rng.uniform(-box, box, size=(n, 3)),
        quat=q / np.linalg.norm(q, axis=1, keepdims=True),
        log_s=rng.uniform(np.log(0.15), np.log(0.5), size=(n, 2)),
        o_logit=rng.uniform(-1.0, 2.0, size=n),
        b=rng.uniform(-2.0, 2.0, size=n),
        f_g=rng.normal(size=(n, feat_dim)),
    )


def make_grid(rng, table_size=2 ** 10, feat_dim=4, levels=1, resolution=16):
    return HashGrid.create(levels=levels, table_size=table_size,
                           feat_dim=feat_dim, finest_resolution=resolution,
                           init_scale=0.5, rng=rng)


def make_decoder(rng, feat_dim=4, grid_feat=4, hidden=16):
    return Decoder.create(feat_dim + grid_feat + 16, hidden=hidden, rng=rng)


def make_scene(seed, n=8, res=16, feat_dim=4, grid_feat=4):
    rng = np.random.default_rng(seed)
    cloud = make_cloud(rng, n=n, feat_dim=feat_dim)
    grid = make_grid(rng, feat_dim=grid_feat)
    decoder = make_decoder(rng, feat_dim=feat_dim, grid_feat=grid_feat)
    camera = make_camera(res=res)
    return cloud, grid, decoder, camera


def naive_render(cloud, grid, decoder, camera, cfg):
    """Tiling-free per-pixel sequential over-compositing reference.

    Walks surfels in global depth order per pixel with scalar arithmetic,
    mirroring the compositing recurrence directly. Shares only the leaf
    evaluators (kernel,
    hash sample, decoder) with the production renderer; binning, sorting,
    and compositing are independent.
    """
    H, W = camera.height, camera.width
    bg = np.asarray(cfg.background, float)
    z = camera.world_to_cam(cloud.mu)[:, 2]
    key = position_sort_key(cloud.mu)
    order = np.lexsort((np.arange(cloud.count), key, z))
    tus, tvs, ns = quat_frame(cloud.quat)
    scales = cloud.scales
    opac = sigmoid(cloud.o_logit)
    o = camera.origin
    alpha = np.zeros((H, W))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    blends = np.zeros((H, W), dtype=np.int64)
    dirs = camera.ray_dirs().reshape(H, W, 3)
    if cfg.bypass_decoder:
        D = 3
    else:
        D = cloud.feat_dim + (grid.out_dim if grid is not None else 0)
    Fimg = np.zeros((H, W, D))
    for v in range(H):
        for u in range(W):
            d = dirs[v, u]
            T = 1.0
            for i in order:
                if T < cfg.t_floor:
                    break
                n = ns[i]
                dn = float(n[0] * d[0] + n[1] * d[1] + n[2] * d[2])
                if abs(dn) <= EPS_PARALLEL:
                    continue
                a3 = cloud.mu[i] - o
                t = float(n[0] * a3[0] + n[1] * a3[1] + n[2] * a3[2]) / dn
                if t <= T_NEAR:
                    continue
                xpt = o + t * d
                rel = xpt - cloud.mu[i]
                tu, tv = tus[i], tvs[i]
                uu = float(rel[0] * tu[0] + rel[1] * tu[1] + rel[2] * tu[2])
                vv = float(rel[0] * tv[0] + rel[1] * tv[1] + rel[2] * tv[2])
                ru = uu / (cfg.kappa * scales[i, 0])
                rv = vv / (cfg.kappa * scales[i, 1])
                r2 = ru * ru + rv * rv
                if r2 > 1.0:
                    continue
                if cfg.kernel_mode == "beta":
                    g = float(beta_kernel(np.float64(r2), np.float64(cloud.b[i])))
                else:
                    g = float(gaussian_kernel(np.float64(r2), cfg.kappa))
                a = opac[i] * g
                wgt = T * a
                if cfg.bypass_decoder:
                    feat = sigmoid(cloud.f_g[i, :3])
                else:
                    feat = np.concatenate([cloud.f_g[i], grid.sample(xpt[None])[0]])
                Fimg[v, u] += wgt * feat
                alpha[v, u] += wgt
                depth[v, u] += wgt * t
                nf = -n if dn > 0.0 else n
                normal[v, u] += wgt * nf
                blends[v, u] += 1
                T = T * (1.0 - a)
    if cfg.bypass_decoder:
        rgb = Fimg + bg * (1.0 - alpha[..., None])
    else:
        sh = sh_encode(dirs.reshape(-1, 3))
        dec = decoder.decode(Fimg.reshape(-1, D), sh).reshape(H, W, 3)
        rgb = dec * alpha[..., None] + bg * (1.0 - alpha[..., None])
    return rgb, alpha, depth, normal, blends
