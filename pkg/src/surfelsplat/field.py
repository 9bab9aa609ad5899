"""Trainable appearance fields: spatial hash grid, SH direction encoding,
MLP decoder, and the Adam optimizer shared by every trainable group."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

# real SH constants, bands 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

SH_DIM = 16


def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics of unit directions, bands 0..3 -> (..., 16)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(d.shape[:-1] + (SH_DIM,), dtype=np.float64)
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


# ---------------------------------------------------------------------------
# hash grid
# ---------------------------------------------------------------------------


def hash_index(cell: np.ndarray, table_size: int) -> np.ndarray:
    """Spatial hash of integer cell coords (..., 3) into [0, table_size).

    XOR of coordinate-times-prime products with primes (1, 2654435761,
    805459861), masked to table_size - 1; table_size must be a power of two.
    """
    cell = np.asarray(cell, dtype=np.uint64)
    mask = np.uint64(table_size - 1)
    with np.errstate(over="ignore"):
        h = cell[..., 0] * HASH_PRIMES[0]
        h ^= cell[..., 1] * HASH_PRIMES[1]
        h ^= cell[..., 2] * HASH_PRIMES[2]
    return (h & mask).astype(np.int64)


def level_resolutions(levels: int, finest: int = 1024, coarsest: int = 16) -> list[int]:
    """Per-level cell counts per axis, geometric from coarse to `finest`."""
    if levels <= 0:
        return []
    if levels == 1:
        return [finest]
    g = (finest / coarsest) ** (1.0 / (levels - 1))
    return [max(2, int(round(coarsest * g ** l))) for l in range(levels)]


@dataclass
class HashGrid:
    """Hash-table feature field over a scene AABB, trilinearly interpolated.

    table: (L, T, F). L may be 0 (grid disabled; samples are empty vectors).
    """

    table: np.ndarray
    resolutions: list
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        self.aabb_min = np.asarray(self.aabb_min, dtype=np.float64)
        self.aabb_max = np.asarray(self.aabb_max, dtype=np.float64)
        if self.table.ndim != 3:
            raise ValueError("table must be (levels, table_size, feat_dim)")
        t = self.table.shape[1]
        if self.levels > 0 and (t & (t - 1)) != 0:
            raise ValueError("table_size must be a power of two")
        assert len(self.resolutions) == self.levels

    @property
    def levels(self) -> int:
        return self.table.shape[0]

    @property
    def table_size(self) -> int:
        return self.table.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.table.shape[2]

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_dim

    @staticmethod
    def create(levels=1, table_size=2 ** 19, feat_dim=20, aabb_min=(-1.5,) * 3,
               aabb_max=(1.5,) * 3, finest_resolution=1024, init_scale=1e-4,
               rng: Optional[np.random.Generator] = None) -> "HashGrid":
        rng = rng or np.random.default_rng(0)
        table = rng.uniform(-init_scale, init_scale, size=(levels, table_size, feat_dim))
        return HashGrid(table, level_resolutions(levels, finest_resolution),
                        np.asarray(aabb_min, float), np.asarray(aabb_max, float))

    def _corners(self, x: np.ndarray):
        """Per-level corner table indices and trilinear weights.

        Returns lists over levels of (idx (P, 8), w (P, 8), dw_dx (P, 8, 3),
        inside (P, 3) clip mask).
        """
        x = np.asarray(x, dtype=np.float64)
        extent = self.aabb_max - self.aabb_min
        u = (x - self.aabb_min) / extent
        inside = (u > 0.0) & (u < 1.0)  # clip kills the spatial gradient
        u = np.clip(u, 0.0, 1.0)
        offs = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                        dtype=np.int64)  # (8, 3)
        out = []
        for l in range(self.levels):
            r = self.resolutions[l]
            pos = u * (r - 1)
            c0 = np.minimum(np.floor(pos), r - 2).astype(np.int64)
            f = pos - c0  # (P, 3) in [0, 1]
            cells = c0[:, None, :] + offs[None, :, :]  # (P, 8, 3)
            idx = hash_index(cells, self.table_size)
            fo = np.where(offs[None, :, :] == 1, f[:, None, :], 1.0 - f[:, None, :])
            w = fo[:, :, 0] * fo[:, :, 1] * fo[:, :, 2]
            sign = np.where(offs[None, :, :] == 1, 1.0, -1.0)
            dw_df = np.stack([
                sign[:, :, 0] * fo[:, :, 1] * fo[:, :, 2],
                fo[:, :, 0] * sign[:, :, 1] * fo[:, :, 2],
                fo[:, :, 0] * fo[:, :, 1] * sign[:, :, 2],
            ], axis=-1)  # (P, 8, 3)
            dpos_dx = (r - 1) / extent  # (3,)
            dw_dx = dw_df * dpos_dx[None, None, :] * inside[:, None, :]
            out.append((idx, w, dw_dx))
        return out

    def sample(self, x: np.ndarray) -> np.ndarray:
        """Concatenated per-level trilinear features at world points (P, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.levels == 0:
            return np.zeros((x.shape[0], 0))
        feats = []
        for l, (idx, w, _) in enumerate(self._corners(x)):
            feats.append(np.einsum("pc,pcf->pf", w, self.table[l][idx]))
        return np.concatenate(feats, axis=1)

    def sample_with_grad(self, x: np.ndarray):
        """(features, ctx) where ctx replays the interpolation in backward."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        corners = self._corners(x) if self.levels else []
        feats = [np.einsum("pc,pcf->pf", w, self.table[l][idx])
                 for l, (idx, w, _) in enumerate(corners)]
        out = (np.concatenate(feats, axis=1) if feats
               else np.zeros((x.shape[0], 0)))
        return out, corners

    def sample_backward(self, ctx, grad_out: np.ndarray, grad_table: np.ndarray):
        """Accumulate dL/dtable into grad_table and return dL/dx (P, 3)."""
        P = grad_out.shape[0]
        gx = np.zeros((P, 3))
        F = self.feat_dim
        for l, (idx, w, dw_dx) in enumerate(ctx):
            g = grad_out[:, l * F:(l + 1) * F]  # (P, F)
            # table gradient: scatter w[:, c] * g into rows idx[:, c]
            flat_idx = idx.reshape(-1)
            uniq, inv = np.unique(flat_idx, return_inverse=True)
            contrib = (w.reshape(-1)[:, None] * np.repeat(g, 8, axis=0))
            acc = np.zeros((len(uniq), F))
            np.add.at(acc, inv, contrib)
            grad_table[l][uniq] += acc
            # spatial gradient: sum_c (g . table[idx_c]) dw_c/dx
            tv = self.table[l][idx]  # (P, 8, F)
            gdot = np.einsum("pf,pcf->pc", g, tv)
            gx += np.einsum("pc,pcd->pd", gdot, dw_dx)
        return gx


# ---------------------------------------------------------------------------
# decoder MLP
# ---------------------------------------------------------------------------


@dataclass
class Decoder:
    """Two rectified hidden layers of width `hidden`, sigmoid RGB output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @staticmethod
    def create(in_dim: int, hidden: int = 256, out_dim: int = 3,
               rng: Optional[np.random.Generator] = None) -> "Decoder":
        rng = rng or np.random.default_rng(0)

        def lin(n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            return (rng.uniform(-bound, bound, size=(n_in, n_out)),
                    rng.uniform(-bound, bound, size=n_out))

        W1, b1 = lin(in_dim, hidden)
        W2, b2 = lin(hidden, hidden)
        W3, b3 = lin(hidden, out_dim)
        return Decoder(W1, b1, W2, b2, W3, b3)

    def param_dict(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2,
                "W3": self.W3, "b3": self.b3}

    def forward(self, feat: np.ndarray, sh: np.ndarray):
        """RGB in (0,1)^3 for rows of concat(feat, sh); returns (rgb, ctx)."""
        x = np.concatenate([feat, sh], axis=1)
        assert x.shape[1] == self.in_dim, (x.shape, self.in_dim)
        z1 = x @ self.W1 + self.b1
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ self.W2 + self.b2
        h2 = np.maximum(z2, 0.0)
        z3 = h2 @ self.W3 + self.b3
        rgb = 1.0 / (1.0 + np.exp(-z3))
        return rgb, (x, z1, h1, z2, h2, rgb)

    def decode(self, feat: np.ndarray, sh: np.ndarray) -> np.ndarray:
        return self.forward(feat, sh)[0]

    def backward(self, ctx, grad_rgb: np.ndarray):
        """Returns (grad_input, grad_params dict); grad_input spans concat(feat, sh)."""
        x, z1, h1, z2, h2, rgb = ctx
        gz3 = grad_rgb * rgb * (1.0 - rgb)
        gW3 = h2.T @ gz3
        gb3 = gz3.sum(axis=0)
        gh2 = gz3 @ self.W3.T
        gz2 = gh2 * (z2 > 0.0)
        gW2 = h1.T @ gz2
        gb2 = gz2.sum(axis=0)
        gh1 = gz2 @ self.W2.T
        gz1 = gh1 * (z1 > 0.0)
        gW1 = x.T @ gz1
        gb1 = gz1.sum(axis=0)
        gx = gz1 @ self.W1.T
        return gx, {"W1": gW1, "b1": gb1, "W2": gW2, "b2": gb2, "W3": gW3, "b3": gb3}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moments keyed like the param dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: dict | float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place.

    `lr` is a scalar or a per-key dict; keys with missing/None grads are skipped.
    Callers renormalize quaternions and clamp scale logs afterwards.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr[k] if isinstance(lr, dict) else lr
        p -= step * (m / bc1) / (np.sqrt(v / bc2) + eps)
