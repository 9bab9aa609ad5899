"""Surfel parameterization, local frames, ray-splat intersection and kernels.

All heavy entry points are vectorized over leading batch axes; the scalar
`Surfel` / `Ray` / `Intersection` types are thin convenience wrappers used by
tests and tooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Support multiplier: the bounded kernel domain r2 in [0,1] spans KAPPA times
# the stored scale, so gaussian mode (cut at 3 sigma) and beta mode share one
# culling geometry.
KAPPA = 3.0
EPS_PARALLEL = 1e-8
T_NEAR = 0.01
S_MIN = 1e-6
S_MAX = 1e3


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# scalar types
# ---------------------------------------------------------------------------


@dataclass
class Surfel:
    mu: np.ndarray            # (3,) position, world units
    q: np.ndarray             # (4,) unit quaternion, wxyz
    s: np.ndarray             # (2,) tangent half-extents, > 0
    o_logit: float = 0.0      # opacity pre-sigmoid
    b: float = 10.0           # kernel shape parameter
    f_g: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        self.s = np.clip(np.asarray(self.s, dtype=np.float64), S_MIN, S_MAX)
        self.f_g = np.asarray(self.f_g, dtype=np.float64)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.o_logit))


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dir = np.asarray(self.dir, dtype=np.float64)
        n = np.linalg.norm(self.dir)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")


@dataclass
class Intersection:
    t: float
    x: np.ndarray
    uv: np.ndarray
    r2: float
    g: float


@dataclass
class SurfelCloud:
    """Structure-of-arrays over N surfels.

    Scales are stored as logs and opacity as a logit so gradient updates keep
    them in their valid ranges by construction.
    """

    mu: np.ndarray        # (N, 3)
    quat: np.ndarray      # (N, 4) wxyz, renormalized after each optimizer step
    log_s: np.ndarray     # (N, 2)
    o_logit: np.ndarray   # (N,)
    b: np.ndarray         # (N,)
    f_g: np.ndarray       # (N, D_g)

    def __post_init__(self):
        n = self.mu.shape[0]
        for name in ("mu", "quat", "log_s", "o_logit", "b", "f_g"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            assert arr.shape[0] == n, f"{name} length mismatch"
        assert self.mu.shape == (n, 3)
        assert self.quat.shape == (n, 4)
        assert self.log_s.shape == (n, 2)
        assert self.f_g.ndim == 2

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_s)

    @property
    def opacity(self) -> np.ndarray:
        return sigmoid(self.o_logit)

    @property
    def feat_dim(self) -> int:
        return self.f_g.shape[1]

    def normalize_rotations(self) -> None:
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)

    def clamp_scales(self) -> None:
        np.clip(self.log_s, np.log(S_MIN), np.log(S_MAX), out=self.log_s)

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(
            self.mu.copy(), self.quat.copy(), self.log_s.copy(),
            self.o_logit.copy(), self.b.copy(), self.f_g.copy(),
        )

    def select(self, idx) -> "SurfelCloud":
        return SurfelCloud(
            self.mu[idx], self.quat[idx], self.log_s[idx],
            self.o_logit[idx], self.b[idx], self.f_g[idx],
        )

    def param_dict(self) -> dict:
        return {
            "mu": self.mu, "quat": self.quat, "log_s": self.log_s,
            "o_logit": self.o_logit, "b": self.b, "f_g": self.f_g,
        }

    @staticmethod
    def from_surfels(surfels) -> "SurfelCloud":
        return SurfelCloud(
            mu=np.array([s.mu for s in surfels]).reshape(-1, 3),
            quat=np.array([s.q for s in surfels]).reshape(-1, 4),
            log_s=np.log(np.array([s.s for s in surfels]).reshape(-1, 2)),
            o_logit=np.array([s.o_logit for s in surfels], dtype=np.float64),
            b=np.array([s.b for s in surfels], dtype=np.float64),
            f_g=np.array([s.f_g for s in surfels], dtype=np.float64).reshape(len(surfels), -1),
        )


# ---------------------------------------------------------------------------
# local frames
# ---------------------------------------------------------------------------


def quat_frame(quat: np.ndarray):
    """Tangent/normal frame (t_u, t_v, n) of quaternion-rotated canonical axes.

    `quat` is (..., 4) wxyz and is normalized internally; returns three
    (..., 3) arrays forming an orthonormal right-handed triple.
    """
    q = np.asarray(quat, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    t_u = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)], axis=-1)
    t_v = np.stack([2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)], axis=-1)
    n = np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return t_u, t_v, n


def quat_frame_backward(quat: np.ndarray, g_tu, g_tv, g_n) -> np.ndarray:
    """Gradient of a loss w.r.t. the raw (unnormalized) quaternion.

    Chains the frame Jacobian through the internal normalization.
    """
    q_raw = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)

    def col(a0, a1, a2):
        return np.stack([a0, a1, a2], axis=-1)

    # d(t_u)/d(w,x,y,z)
    dtu = [col(zero, 2 * z, -2 * y), col(zero, 2 * y, 2 * z),
           col(-4 * y, 2 * x, -2 * w), col(-4 * z, 2 * w, 2 * x)]
    dtv = [col(-2 * z, zero, 2 * x), col(2 * y, -4 * x, 2 * w),
           col(2 * x, zero, 2 * z), col(-2 * w, -4 * z, 2 * y)]
    dn = [col(2 * y, -2 * x, zero), col(2 * z, -2 * w, -4 * x),
          col(2 * w, 2 * z, -4 * y), col(2 * x, 2 * y, zero)]

    g_qhat = np.stack(
        [
            np.sum(g_tu * dtu[k] + g_tv * dtv[k] + g_n * dn[k], axis=-1)
            for k in range(4)
        ],
        axis=-1,
    )
    # normalization backward: g_q = (g_qhat - (g_qhat . qhat) qhat) / |q|
    proj = np.sum(g_qhat * q, axis=-1, keepdims=True)
    return (g_qhat - proj * q) / norm


def splat_frame(surfel: Surfel):
    """Scalar frame of one surfel: (t_u, t_v, n)."""
    t_u, t_v, n = quat_frame(surfel.q)
    return t_u, t_v, n


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def beta_exponent(b):
    """Bounded kernel exponent beta(b) = 4*sigmoid(b), in (0, 4)."""
    return 4.0 * sigmoid(b)


def beta_kernel(r2, b):
    """Bounded-support radial falloff (1 - r2)^(4*sigmoid(b)).

    Monotone non-increasing in r2, value in [0, 1]; exactly 0 at r2 = 1.
    """
    r2 = np.asarray(r2, dtype=np.float64)
    base = np.maximum(1.0 - r2, 0.0)
    return np.power(base, beta_exponent(b))


def beta_kernel_grad(r2, b):
    """(value, d/dr2, d/db) of the beta kernel."""
    r2 = np.asarray(r2, dtype=np.float64)
    base = np.maximum(1.0 - r2, 0.0)
    sig = sigmoid(b)
    beta = 4.0 * sig
    val = np.power(base, beta)
    safe = base > 0.0
    d_r2 = np.where(safe, -beta * np.power(np.where(safe, base, 1.0), beta - 1.0), 0.0)
    # d/db = val * log(base) * beta'(b), beta'(b) = 4 sig (1 - sig)
    d_b = np.where(safe, val * np.log(np.where(safe, base, 1.0)) * 4.0 * sig * (1.0 - sig), 0.0)
    return val, d_r2, d_b


def gaussian_kernel(r2, kappa=KAPPA):
    """Gaussian falloff exp(-0.5 * kappa^2 * r2) on the normalized support."""
    return np.exp(-0.5 * kappa * kappa * np.asarray(r2, dtype=np.float64))


def gaussian_kernel_grad(r2, kappa=KAPPA):
    val = gaussian_kernel(r2, kappa)
    return val, -0.5 * kappa * kappa * val


# ---------------------------------------------------------------------------
# ray-splat intersection
# ---------------------------------------------------------------------------


def intersect_batch(origin, dirs, mu, t_u, t_v, n, s, kappa=KAPPA, t_near=T_NEAR):
    """Vectorized plane intersection for per-pair ray/surfel attributes.

    origin: (3,) shared ray origin; dirs: (P, 3) unit directions;
    mu/t_u/t_v/n: (P, 3); s: (P, 2).
    Returns (t, x, uv, r2, valid). Entries with valid == False carry zeros.
    """
    dn = np.sum(n * dirs, axis=-1)
    ok = np.abs(dn) > EPS_PARALLEL
    dn_safe = np.where(ok, dn, 1.0)
    a = mu - origin
    t = np.where(ok, np.sum(n * a, axis=-1) / dn_safe, 0.0)
    ok &= t > t_near
    x = origin + t[:, None] * dirs
    rel = x - mu
    u = np.sum(rel * t_u, axis=-1)
    v = np.sum(rel * t_v, axis=-1)
    ru = u / (kappa * s[:, 0])
    rv = v / (kappa * s[:, 1])
    r2 = ru * ru + rv * rv
    ok &= r2 <= 1.0
    z = np.zeros_like(t)
    return (
        np.where(ok, t, z),
        np.where(ok[:, None], x, 0.0),
        np.where(ok[:, None], np.stack([u, v], axis=-1), 0.0),
        np.where(ok, r2, z),
        ok,
    )


def intersect(ray: Ray, surfel: Surfel, kappa: float = KAPPA,
              kernel_mode: str = "beta", t_near: float = T_NEAR) -> Optional[Intersection]:
    """Scalar ray-splat intersection; None when parallel, behind, or outside support."""
    t_u, t_v, n = splat_frame(surfel)
    t, x, uv, r2, ok = intersect_batch(
        ray.origin, ray.dir[None], surfel.mu[None], t_u[None], t_v[None],
        n[None], surfel.s[None], kappa=kappa, t_near=t_near,
    )
    if not ok[0]:
        return None
    if kernel_mode == "beta":
        g = float(beta_kernel(r2[0], surfel.b))
    else:
        g = float(gaussian_kernel(r2[0], kappa))
    return Intersection(t=float(t[0]), x=x[0], uv=uv[0], r2=float(r2[0]), g=g)


# ---------------------------------------------------------------------------
# screen-space culling
# ---------------------------------------------------------------------------


def project_aabb_batch(cloud: SurfelCloud, camera, kappa=KAPPA):
    """Conservative screen axis-aligned bounds of every surfel's support.

    The support ellipse lies inside the tangent rectangle spanned by
    +-kappa*s_u t_u and +-kappa*s_v t_v; perspective projection of that planar
    rectangle is convex, so the pixel AABB of its projected corners (padded by
    one pixel for rounding) bounds every ray hit.

    Returns (rects, valid): rects (N, 4) int arrays [u0, v0, u1, v1]
    (inclusive-exclusive), valid False when the support is entirely behind the
    near plane or off screen.
    """
    t_u, t_v, n = quat_frame(cloud.quat)
    s = cloud.scales
    eu = kappa * s[:, 0:1] * t_u
    ev = kappa * s[:, 1:2] * t_v
    corners = np.stack(
        [cloud.mu + eu + ev, cloud.mu + eu - ev, cloud.mu - eu + ev, cloud.mu - eu - ev],
        axis=1,
    )  # (N, 4, 3)
    cam = camera.world_to_cam(corners.reshape(-1, 3)).reshape(-1, 4, 3)
    z = cam[:, :, 2]
    in_front = z > camera.near
    any_front = in_front.any(axis=1)
    all_front = in_front.all(axis=1)

    zs = np.where(in_front, z, 1.0)
    u = camera.fx * cam[:, :, 0] / zs + camera.cx
    v = camera.fy * cam[:, :, 1] / zs + camera.cy

    big = np.array([0.0, 0.0, float(camera.width), float(camera.height)])
    u0 = np.floor(u.min(axis=1)) - 1.0
    u1 = np.ceil(u.max(axis=1)) + 1.0
    v0 = np.floor(v.min(axis=1)) - 1.0
    v1 = np.ceil(v.max(axis=1)) + 1.0
    rects = np.stack([u0, v0, u1, v1], axis=-1)
    # a support straddling the near plane gets the conservative full frame
    rects = np.where((any_front & ~all_front)[:, None], big[None, :], rects)

    rects[:, 0] = np.clip(rects[:, 0], 0, camera.width)
    rects[:, 1] = np.clip(rects[:, 1], 0, camera.height)
    rects[:, 2] = np.clip(rects[:, 2], 0, camera.width)
    rects[:, 3] = np.clip(rects[:, 3], 0, camera.height)
    valid = any_front & (rects[:, 2] > rects[:, 0]) & (rects[:, 3] > rects[:, 1])
    return rects.astype(np.int64), valid


def project_aabb(surfel: Surfel, camera, kappa: float = KAPPA):
    """Scalar wrapper: pixel rect [u0, v0, u1, v1] or None."""
    cloud = SurfelCloud.from_surfels([surfel])
    rects, valid = project_aabb_batch(cloud, camera, kappa=kappa)
    if not valid[0]:
        return None
    return tuple(int(c) for c in rects[0])


def position_sort_key(mu: np.ndarray) -> np.ndarray:
    """Storage-order-independent depth tie-break key derived from position bits."""
    bits = np.ascontiguousarray(mu, dtype=np.float64).view(np.uint64).reshape(-1, 3)
    h = np.uint64(0xCBF29CE484222325) * np.ones(len(bits), dtype=np.uint64)
    prime = np.uint64(0x100000001B3)
    for k in range(3):
        h = (h ^ bits[:, k]) * prime
    return h
