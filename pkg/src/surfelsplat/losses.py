"""Training objectives: L1+SSIM photometric, distortion, normal consistency,
opacity regularization, BCE sparsification, and the phase-gated total."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import correlate1d

from .geometry import sigmoid

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LAMBDA_SSIM = 0.2

OPACITY_CLAMP = 1e-6


@dataclass
class LossWeights:
    lambda_ssim: float = LAMBDA_SSIM
    lambda_dist: float = 100.0
    lambda_normal: float = 0.05
    lambda_opacity: float = 0.01
    lambda_bce: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0")


@dataclass
class LossReport:
    rgb: float = 0.0
    dist: float = 0.0
    normal: float = 0.0
    opacity: float = 0.0
    bce: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return k / k.sum()


def _win_filter(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable windowed local mean over valid (fully-covered) pixels."""
    r = len(k) // 2
    out = correlate1d(img, k, axis=0, mode="constant")
    out = correlate1d(out, k, axis=1, mode="constant")
    return out[r:-r, r:-r] if r else out

def _win_filter_adjoint(grad: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    """Adjoint of `_win_filter` (kernel symmetric, so it is another correlation)."""
    r = len(k) // 2
    full = np.zeros(shape, dtype=np.float64)
    if r:
        full[r:-r, r:-r] = grad
    else:
        full[...] = grad
    out = correlate1d(full, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


def ssim(pred: np.ndarray, gt: np.ndarray, grad: bool = False):
    """Mean SSIM over valid windows and channels, optionally with d/dpred.

    11x11 Gaussian window sigma 1.5, C1 = 0.01^2, C2 = 0.03^2 on [0,1] images.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    # shrink the window (odd) for tiny images so valid crops stay non-empty
    win = min(SSIM_WINDOW, pred.shape[0], pred.shape[1])
    win -= 1 - win % 2
    k = _gauss_window(size=win)
    mx = _win_filter(pred, k)
    my = _win_filter(gt, k)
    mxx = _win_filter(pred * pred, k)
    myy = _win_filter(gt * gt, k)
    mxy = _win_filter(pred * gt, k)
    vx = mxx - mx * mx
    vy = myy - my * my
    vxy = mxy - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s_map = (a1 * a2) / (b1 * b2)
    value = float(s_map.mean())
    if not grad:
        return value
    u = np.full_like(s_map, 1.0 / s_map.size)
    d_vx = -s_map / b2 * u
    d_vxy = 2.0 * a1 / (b1 * b2) * u
    d_mx = (2.0 * my * a2 / (b1 * b2) - s_map * 2.0 * mx / b1) * u \
        + d_vx * (-2.0 * mx) + d_vxy * (-my)
    d_mxx = d_vx
    d_mxy = d_vxy
    g = _win_filter_adjoint(d_mx, k, pred.shape) \
        + 2.0 * pred * _win_filter_adjoint(d_mxx, k, pred.shape) \
        + gt * _win_filter_adjoint(d_mxy, k, pred.shape)
    return value, g


def rgb_loss(pred: np.ndarray, gt: np.ndarray, lambda_ssim: float = LAMBDA_SSIM):
    """(1 - l)*meanL1 + l*(1 - SSIM) with the exact gradient w.r.t. pred."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim(pred, gt, grad=True)
    value = (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
    grad = (1.0 - lambda_ssim) * g_l1 - lambda_ssim * g_s
    return value, grad


# ---------------------------------------------------------------------------
# distortion
# ---------------------------------------------------------------------------


def distortion_loss(pix: np.ndarray, w: np.ndarray, t: np.ndarray, n_pixels: int):
    """Per-pixel sum_{i,j} w_i w_j |t_i - t_j| averaged over all pixels.

    Inputs are flat per-contribution arrays; O(k) per pixel via sorted prefix
    sums.  Returns (value, grad_w, grad_t) in the input pair order.
    """
    P = len(pix)
    if P == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    srt = np.lexsort((t, pix))
    ps, ws, ts = pix[srt], w[srt], t[srt]
    first = np.ones(P, dtype=bool)
    first[1:] = ps[1:] != ps[:-1]
    # exclusive prefix sums within each pixel segment
    cw = np.cumsum(ws)
    cwt = np.cumsum(ws * ts)
    seg_off_w = _segment_offsets(first, cw - ws)
    seg_off_wt = _segment_offsets(first, cwt - ws * ts)
    w_below = (cw - ws) - seg_off_w
    wt_below = (cwt - ws * ts) - seg_off_wt
    tot_w = np.bincount(ps, weights=ws, minlength=n_pixels)[ps]
    tot_wt = np.bincount(ps, weights=ws * ts, minlength=n_pixels)[ps]
    w_above = tot_w - w_below - ws
    wt_above = tot_wt - wt_below - ws * ts
    per = ws * (ts * w_below - wt_below)
    value = float(2.0 * per.sum() / n_pixels)
    g_w = 2.0 * (ts * w_below - wt_below + wt_above - ts * w_above) / n_pixels
    g_t = 2.0 * ws * (w_below - w_above) / n_pixels
    grad_w = np.empty(P)
    grad_t = np.empty(P)
    grad_w[srt] = g_w
    grad_t[srt] = g_t
    return value, grad_w, grad_t


def _segment_offsets(first: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Value at each segment start, broadcast over the segment."""
    idx = np.where(first, np.arange(len(first)), 0)
    idx = np.maximum.accumulate(idx)
    return vals[idx]


# ---------------------------------------------------------------------------
# normal consistency
# ---------------------------------------------------------------------------


def depth_normals(depth: np.ndarray, camera, alpha: np.ndarray,
                  alpha_min: float = 0.5):
    """Normals from screen-space finite differences of unprojected depth.

    Returns (n_depth (H, W, 3), valid (H, W)); normals face the camera.
    """
    H, W = depth.shape
    dirs = camera.ray_dirs().reshape(H, W, 3)
    pts = depth[..., None] * dirs  # camera-relative world offsets
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = (pts[:, 2:] - pts[:, :-2]) * 0.5
    dv[1:-1, :] = (pts[2:, :] - pts[:-2, :]) * 0.5
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = True
    cov = alpha > alpha_min
    valid &= cov
    valid[1:-1, 1:-1] &= cov[1:-1, 2:] & cov[1:-1, :-2] & cov[2:, 1:-1] & cov[:-2, 1:-1]
    valid &= norm > 1e-12
    n = np.where(valid[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    facing = np.sum(n * dirs, axis=-1)
    n = np.where((facing > 0)[..., None], -n, n)
    return n, valid


def normal_loss(normal_img: np.ndarray, depth: np.ndarray, alpha: np.ndarray,
                camera):
    """Alpha-weighted (1 - n_render . n_depth) over valid pixels.

    n_depth is treated as a fixed target (no gradient through the depth
    buffer).  Returns (value, grad_normal_img, grad_alpha).
    """
    n_d, valid = depth_normals(depth, camera, alpha)
    cnt = int(valid.sum())
    g_n = np.zeros_like(normal_img)
    g_a = np.zeros_like(alpha)
    if cnt == 0:
        return 0.0, g_n, g_a
    m = normal_img
    norm = np.maximum(np.linalg.norm(m, axis=-1), 1e-12)
    n_hat = m / norm[..., None]
    dot = np.sum(n_hat * n_d, axis=-1)
    per = np.where(valid, alpha * (1.0 - dot), 0.0)
    value = float(per.sum() / cnt)
    # d(n_hat . c)/dm = (c - (n_hat . c) n_hat) / |m|
    coeff = np.where(valid, -alpha / cnt, 0.0)
    g_n = coeff[..., None] * (n_d - dot[..., None] * n_hat) / norm[..., None]
    g_a = np.where(valid, (1.0 - dot) / cnt, 0.0)
    return value, g_n, g_a


# ---------------------------------------------------------------------------
# opacity regularizers
# ---------------------------------------------------------------------------


def opacity_reg(o_logit: np.ndarray):
    """Mean opacity (L1 on sigmoid); returns (value, grad_o_logit)."""
    o_logit = np.asarray(o_logit, dtype=np.float64)
    n = max(o_logit.size, 1)
    sig = sigmoid(o_logit)
    return float(sig.mean()) if o_logit.size else 0.0, sig * (1.0 - sig) / n


def bce_loss(o_logit: np.ndarray, mode: str = "mean"):
    """Binary entropy of opacities, pushing each toward 0 or 1.

    `mode` "mean" keeps the weight N-independent; "sum" follows the summed
    form.  The gradient uses -log(sigma/(1-sigma)) evaluated at the clamped
    opacity.  Returns (value, grad_o_logit).
    """
    o_logit = np.asarray(o_logit, dtype=np.float64)
    if o_logit.size == 0:
        return 0.0, np.zeros(0)
    sig = sigmoid(o_logit)
    sc = np.clip(sig, OPACITY_CLAMP, 1.0 - OPACITY_CLAMP)
    ent = -(sc * np.log(sc) + (1.0 - sc) * np.log(1.0 - sc))
    d_sig = -(np.log(sc) - np.log(1.0 - sc))
    g = d_sig * sig * (1.0 - sig)
    if mode == "mean":
        return float(ent.mean()), g / o_logit.size
    if mode == "sum":
        return float(ent.sum()), g
    raise ValueError(f"unknown bce mode {mode!r}")


def total_loss(rgb: float, dist: float, normal: float, opacity: float,
               bce: float, weights: LossWeights, phase: str) -> LossReport:
    """Weighted total with phase gating: opacity active from the mcmc phase
    onward, BCE only in the bce phase."""
    if phase not in ("warmup", "mcmc", "bce"):
        raise ValueError(f"unknown phase {phase!r}")
    w_op = weights.lambda_opacity if phase in ("mcmc", "bce") else 0.0
    w_bce = weights.lambda_bce if phase == "bce" else 0.0
    total = (rgb + weights.lambda_dist * dist + weights.lambda_normal * normal
             + w_op * opacity + w_bce * bce)
    return LossReport(rgb=rgb, dist=dist, normal=normal, opacity=opacity,
                      bce=bce, total=total)
