"""Dataset ingestion, procedural toy scenes, checkpoint persistence, and
surfel PLY export."""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .cameras import Camera, look_at_pose
from .field import AdamState, Decoder, HashGrid
from .geometry import SurfelCloud, logit

CHECKPOINT_MAGIC = b"SSPL"
CHECKPOINT_VERSION = 1

# flips the camera-looks-down-minus-z convention of transforms JSON into our
# +z-forward convention
_NERF_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])

DEFAULT_AABB = (np.array([-1.5, -1.5, -1.5]), np.array([1.5, 1.5, 1.5]))


@dataclass
class Dataset:
    cameras: list
    images: list                      # (H, W, 3) float in [0, 1]
    points: Optional[np.ndarray] = None
    scene_aabb: tuple = DEFAULT_AABB

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise ValueError("cameras and images must have equal length")
        if self.images:
            shp = self.images[0].shape
            for i, im in enumerate(self.images):
                if im.shape != shp:
                    raise ValueError(f"image {i} has shape {im.shape}, expected {shp}")

    def __len__(self):
        return len(self.cameras)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """PNG -> float image in [0,1]; RGBA is alpha-composited over white."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[2] == 4:
        a = arr[..., 3:4]
        arr = arr[..., :3] * a + (1.0 - a)
    return arr[..., :3]


def save_image(img: np.ndarray, path) -> None:
    """Float [0,1] image -> 8-bit PNG with round-half-even quantization."""
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q).save(path)


# ---------------------------------------------------------------------------
# transforms-JSON loader (NeRF-synthetic layout)
# ---------------------------------------------------------------------------


def load_nerf_synthetic(directory, split: str = "train") -> Dataset:
    directory = Path(directory)
    tf = directory / f"transforms_{split}.json"
    if not tf.exists():
        tf = directory / "transforms.json"
    if not tf.exists():
        raise FileNotFoundError(f"no transforms JSON found under {directory}")
    try:
        meta = json.loads(tf.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"malformed transforms JSON {tf}: {e}") from e
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise ValueError(f"transforms JSON {tf} missing camera_angle_x/frames")

    cameras, images = [], []
    shape0 = None
    for frame in meta["frames"]:
        fp = directory / frame["file_path"]
        if fp.suffix == "":
            fp = fp.with_suffix(".png")
        if not fp.exists():
            raise FileNotFoundError(f"missing image file {fp}")
        img = load_image(fp)
        if shape0 is None:
            shape0 = img.shape
        elif img.shape != shape0:
            raise ValueError(
                f"image {fp} has shape {img.shape}, split expects {shape0}")
        h, w = img.shape[:2]
        fx = 0.5 * w / np.tan(0.5 * float(meta["camera_angle_x"]))
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValueError(f"frame {fp} transform_matrix is not 4x4")
        pose = c2w @ _NERF_FLIP
        cameras.append(Camera(w, h, fx, fx, w / 2.0, h / 2.0, pose))
        images.append(img)

    points = None
    pf = directory / "points.ply"
    if pf.exists():
        points = import_ply_points(pf)
    return Dataset(cameras, images, points=points)


def save_nerf_synthetic(dataset: Dataset, directory, split: str = "train") -> None:
    """Write a dataset in the transforms-JSON layout `load_nerf_synthetic` reads."""
    directory = Path(directory)
    (directory / split).mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (cam, img) in enumerate(zip(dataset.cameras, dataset.images)):
        rel = f"{split}/r_{i:03d}.png"
        save_image(img, directory / rel)
        c2w = cam.pose @ _NERF_FLIP
        frames.append({"file_path": rel, "transform_matrix": c2w.tolist()})
    angle_x = 2.0 * np.arctan(dataset.cameras[0].width / (2.0 * dataset.cameras[0].fx))
    meta = {"camera_angle_x": float(angle_x), "frames": frames}
    (directory / f"transforms_{split}.json").write_text(json.dumps(meta, indent=1))
    if dataset.points is not None:
        export_ply_points(dataset.points, directory / "points.ply")


# ---------------------------------------------------------------------------
# procedural toy scenes
# ---------------------------------------------------------------------------


def _tri_wave(x: np.ndarray) -> np.ndarray:
    """Piecewise-linear triangle wave, period 2, range [0, 1]; exact in FP."""
    return np.abs(np.mod(x, 2.0) - 1.0)


def _tex_quad(u, v):
    m = _tri_wave(2.0 * u) * _tri_wave(2.0 * v)
    r = 0.30 + 0.40 * (u + 1.0) * 0.5 + 0.20 * (m - 0.5)
    g = 0.30 + 0.40 * (v + 1.0) * 0.5 + 0.20 * (m - 0.5)
    b = 0.50 + 0.20 * (m - 0.5)
    return np.stack([r, g, b], axis=-1)


def _tex_checker(u, v, freq=4.0, lo=0.15, hi=0.85):
    c = np.mod(np.floor(u * freq) + np.floor(v * freq), 2.0)
    val = lo + (hi - lo) * c
    return np.stack([val, val * 0.9 + 0.05, 1.0 - val], axis=-1)


def _tex_gradient(u, v):
    r = 0.2 + 0.3 * (u + 1.0) * 0.5
    g = 0.5 - 0.2 * (v + 1.0) * 0.5
    b = 0.35 + 0.0 * u
    return np.stack([r, g, b], axis=-1)


def _tex_gradient_checker(u, v, freq=7.0, amp=0.3):
    """Smooth gradient base with a fine checker modulation on top."""
    c = np.mod(np.floor(u * freq) + np.floor(v * freq), 2.0)
    return np.clip(_tex_gradient(u, v) + amp * (c - 0.5)[..., None], 0.0, 1.0)


@dataclass
class _Plane:
    z: float
    half: float
    tex: object


_TOY_SPECS = {
    # quads in the z = const plane, front-most first in painter's order
    "textured_quad": [_Plane(0.0, 1.0, _tex_quad)],
    "two_planes": [_Plane(0.35, 0.55, lambda u, v: _tex_checker(u, v, freq=5.0)),
                   _Plane(-0.15, 1.15, _tex_gradient_checker)],
    "cube": None,  # handled separately
}


@dataclass
class ToyScene:
    train: Dataset
    test: Dataset
    geometry: dict


def _ring_cameras(n, res, radius=2.6, polar_deg=35.0, fov_deg=50.0,
                  phase=0.0) -> list:
    f = 0.5 * res / np.tan(0.5 * np.deg2rad(fov_deg))
    psi = np.deg2rad(polar_deg)
    cams = []
    for k in range(n):
        th = 2.0 * np.pi * (k + phase) / n
        eye = np.array([radius * np.sin(psi) * np.cos(th),
                        radius * np.sin(psi) * np.sin(th),
                        radius * np.cos(psi)])
        cams.append(Camera(res, res, f, f, res / 2.0, res / 2.0,
                           look_at_pose(eye, (0.0, 0.0, 0.0))))
    return cams


def _raycast_planes(camera: Camera, planes, supersample: int = 2) -> np.ndarray:
    H, W = camera.height, camera.width
    ss = supersample
    us = (np.arange(W * ss) + 0.5) / ss - 0.5
    vs = (np.arange(H * ss) + 0.5) / ss - 0.5
    uu, vv = np.meshgrid((us + 0.5 - camera.cx) / camera.fx,
                         (vs + 0.5 - camera.cy) / camera.fy)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = camera.origin
    img = np.ones(d.shape[:2] + (3,))
    hit_t = np.full(d.shape[:2], np.inf)
    for pl in planes:
        dz = d[..., 2]
        safe = np.abs(dz) > 1e-12
        t = np.where(safe, (pl.z - o[2]) / np.where(safe, dz, 1.0), np.inf)
        x = o[0] + t * d[..., 0]
        y = o[1] + t * d[..., 1]
        ok = safe & (t > 0) & (np.abs(x) <= pl.half) & (np.abs(y) <= pl.half) \
            & (t < hit_t)
        tex = pl.tex(x / pl.half, y / pl.half)
        img = np.where(ok[..., None], tex, img)
        hit_t = np.where(ok, t, hit_t)
    # box-average the supersampled grid
    img = img.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def _raycast_cube(camera: Camera, half=0.6, supersample: int = 2) -> np.ndarray:
    H, W = camera.height, camera.width
    ss = supersample
    us = (np.arange(W * ss) + 0.5) / ss - 0.5
    vs = (np.arange(H * ss) + 0.5) / ss - 0.5
    uu, vv = np.meshgrid((us + 0.5 - camera.cx) / camera.fx,
                         (vs + 0.5 - camera.cy) / camera.fy)
    d = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = camera.origin
    img = np.ones(d.shape[:2] + (3,))
    hit_t = np.full(d.shape[:2], np.inf)
    face_colors = {(0, 1): (0.8, 0.3, 0.3), (0, -1): (0.3, 0.8, 0.3),
                   (1, 1): (0.3, 0.3, 0.8), (1, -1): (0.8, 0.7, 0.2),
                   (2, 1): (0.7, 0.3, 0.7), (2, -1): (0.3, 0.7, 0.7)}
    for (axis, sign), color in face_colors.items():
        da = d[..., axis]
        safe = np.abs(da) > 1e-12
        t = np.where(safe, (sign * half - o[axis]) / np.where(safe, da, 1.0), np.inf)
        x = o[None, None, :] + t[..., None] * d
        others = [k for k in range(3) if k != axis]
        inside = np.all(np.abs(x[..., others]) <= half, axis=-1)
        ok = safe & (t > 0) & inside & (t < hit_t)
        u = x[..., others[0]] / half
        m = _tri_wave(2.0 * u)
        tex = np.asarray(color)[None, None, :] * (0.75 + 0.25 * m[..., None])
        img = np.where(ok[..., None], tex, img)
        hit_t = np.where(ok, t, hit_t)
    img = img.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def gen_toy_scene(spec: str, n_views: int = 6, res: int = 64,
                  n_test: int = 2, points_per_side: int = 16) -> ToyScene:
    """Analytic posed-image fixture with exact cameras and seed points.

    Generation is integer-seeded and uses only piecewise-linear texture math,
    so regenerating yields identical bytes.
    """
    if spec not in _TOY_SPECS:
        raise ValueError(f"unknown toy scene {spec!r}; "
                         f"choose from {sorted(_TOY_SPECS)}")
    train_cams = _ring_cameras(n_views, res)
    test_cams = _ring_cameras(n_test, res, phase=0.5, polar_deg=30.0)

    if spec == "cube":
        render = lambda cam: _raycast_cube(cam)
        pts = []
        g = (np.arange(points_per_side) + 0.5) / points_per_side * 1.2 - 0.6
        gu, gv = np.meshgrid(g, g)
        for axis in range(3):
            for sign in (-1.0, 1.0):
                p = np.zeros((points_per_side ** 2, 3))
                others = [k for k in range(3) if k != axis]
                p[:, others[0]] = gu.ravel()
                p[:, others[1]] = gv.ravel()
                p[:, axis] = sign * 0.6
                pts.append(p)
        points = np.concatenate(pts)
        geometry = {"kind": "cube", "half": 0.6}
    else:
        planes = _TOY_SPECS[spec]
        render = lambda cam: _raycast_planes(cam, planes)
        pts = []
        for pl in planes:
            g = (np.arange(points_per_side) + 0.5) / points_per_side * 2.0 - 1.0
            gu, gv = np.meshgrid(g * pl.half, g * pl.half)
            p = np.stack([gu.ravel(), gv.ravel(),
                          np.full(gu.size, pl.z)], axis=1)
            pts.append(p)
        points = np.concatenate(pts)
        geometry = {"kind": "planes",
                    "planes": [(pl.z, pl.half) for pl in planes]}

    train = Dataset(train_cams, [render(c) for c in train_cams], points=points)
    test = Dataset(test_cams, [render(c) for c in test_cams], points=points)
    return ToyScene(train, test, geometry)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    cloud: SurfelCloud
    grid: HashGrid
    decoder: Decoder
    opt_states: dict                 # group name -> AdamState
    iteration: int
    rng_state: dict

    def make_rng(self) -> np.random.Generator:
        rng = np.random.default_rng(0)
        rng.bit_generator.state = self.rng_state
        return rng


def _flatten_arrays(ckpt: Checkpoint) -> dict:
    arrays = {}
    for k, v in ckpt.cloud.param_dict().items():
        arrays[f"cloud.{k}"] = v
    arrays["grid.table"] = ckpt.grid.table
    for k, v in ckpt.decoder.param_dict().items():
        arrays[f"decoder.{k}"] = v
    for gname, st in ckpt.opt_states.items():
        for k, v in st.m.items():
            arrays[f"adam.{gname}.m.{k}"] = v
        for k, v in st.v.items():
            arrays[f"adam.{gname}.v.{k}"] = v
    return arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, version, JSON header, raw little-endian
    array sections, trailing CRC32 of everything before it."""
    arrays = _flatten_arrays(ckpt)
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        manifest.append({"name": name,
                         "dtype": arr.dtype.newbyteorder("<").str,
                         "shape": list(arr.shape)})
        blobs.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    header = {
        "config": ckpt.config,
        "iteration": ckpt.iteration,
        "rng_state": _encode_rng(ckpt.rng_state),
        "grid": {"resolutions": list(ckpt.grid.resolutions),
                 "aabb_min": ckpt.grid.aabb_min.tolist(),
                 "aabb_max": ckpt.grid.aabb_max.tolist()},
        "adam_t": {g: st.t for g, st in ckpt.opt_states.items()},
        "arrays": manifest,
    }
    hdr = json.dumps(header).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hdr)) \
        + hdr + b"".join(blobs)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body + struct.pack("<I", crc))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a surfelsplat checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: checksum failure (truncated or corrupt)")
    version, hdr_len = struct.unpack("<IQ", body[4:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[16:16 + hdr_len].decode())
    off = 16 + hdr_len
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nb = dt.itemsize * count
        arrays[entry["name"]] = np.frombuffer(
            body[off:off + nb], dtype=dt).reshape(entry["shape"]).copy()
        off += nb
    if off != len(body):
        raise ValueError(f"{path}: trailing bytes in checkpoint")

    cloud = SurfelCloud(arrays["cloud.mu"], arrays["cloud.quat"],
                        arrays["cloud.log_s"], arrays["cloud.o_logit"],
                        arrays["cloud.b"], arrays["cloud.f_g"])
    gmeta = header["grid"]
    grid = HashGrid(arrays["grid.table"], gmeta["resolutions"],
                    np.asarray(gmeta["aabb_min"]), np.asarray(gmeta["aabb_max"]))
    decoder = Decoder(**{k: arrays[f"decoder.{k}"]
                         for k in ("W1", "b1", "W2", "b2", "W3", "b3")})
    opt_states = {}
    for gname, t in header["adam_t"].items():
        st = AdamState(t=t)
        prefix_m = f"adam.{gname}.m."
        prefix_v = f"adam.{gname}.v."
        for name, arr in arrays.items():
            if name.startswith(prefix_m):
                st.m[name[len(prefix_m):]] = arr
            elif name.startswith(prefix_v):
                st.v[name[len(prefix_v):]] = arr
        opt_states[gname] = st
    return Checkpoint(config=header["config"], cloud=cloud, grid=grid,
                      decoder=decoder, opt_states=opt_states,
                      iteration=header["iteration"],
                      rng_state=_decode_rng(header["rng_state"]))


def _encode_rng(state: dict):
    return json.loads(json.dumps(state))


def _decode_rng(state):
    # JSON round-trips the PCG64 state dict (big ints included) untouched
    return state


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------


def export_ply(cloud: SurfelCloud, path, binary: bool = True) -> None:
    """Surfel cloud as PLY with named per-vertex properties."""
    dg = cloud.feat_dim
    props = (["x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy",
              "opacity", "beta"] + [f"latent_{i}" for i in range(dg)])
    cols = np.concatenate([
        cloud.mu, cloud.quat, cloud.scales,
        cloud.opacity[:, None], cloud.b[:, None], cloud.f_g,
    ], axis=1).astype(np.float32)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {cloud.count}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        if binary:
            f.write(np.ascontiguousarray(cols).tobytes())
        else:
            for row in cols:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode())


def _read_ply(path):
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = data[:end].decode().splitlines()
    body = data[end + len(b"end_header\n"):]
    n = 0
    props = []
    binary = True
    for line in header:
        if line.startswith("format"):
            binary = "binary" in line
        elif line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property float"):
            props.append(line.split()[-1])
    if binary:
        cols = np.frombuffer(body, dtype=np.float32, count=n * len(props))
        cols = cols.reshape(n, len(props)).astype(np.float64)
    else:
        cols = np.array([[float(v) for v in ln.split()]
                         for ln in body.decode().splitlines()[:n]])
        cols = cols.reshape(n, len(props))
    return props, cols


def import_ply(path) -> SurfelCloud:
    props, cols = _read_ply(path)
    c = {p: cols[:, i] for i, p in enumerate(props)}
    dg = sum(1 for p in props if p.startswith("latent_"))
    f_g = np.stack([c[f"latent_{i}"] for i in range(dg)], axis=1) if dg else \
        np.zeros((len(cols), 0))
    op = np.clip(c["opacity"], 1e-7, 1.0 - 1e-7)
    return SurfelCloud(
        mu=np.stack([c["x"], c["y"], c["z"]], axis=1),
        quat=np.stack([c["qw"], c["qx"], c["qy"], c["qz"]], axis=1),
        log_s=np.log(np.stack([c["sx"], c["sy"]], axis=1)),
        o_logit=logit(op),
        b=c["beta"],
        f_g=f_g,
    )


def export_ply_points(points: np.ndarray, path) -> None:
    pts = np.asarray(points, dtype=np.float32)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z",
              "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode())
        f.write(np.ascontiguousarray(pts).tobytes())


def import_ply_points(path) -> np.ndarray:
    props, cols = _read_ply(path)
    idx = [props.index(k) for k in ("x", "y", "z")]
    return cols[:, idx]
