"""Evaluation metrics (PSNR, SSIM, chamfer) and render benchmarking."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .losses import ssim
from .renderer import render


def psnr(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    mse = float(np.mean((np.asarray(pred) - np.asarray(gt)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(data_range ** 2 / mse)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric chamfer distance between two point sets (mean of means)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def bench_render(cloud, grid, decoder, camera, cfg, repeats: int = 5) -> dict:
    """Median wall time per frame in ms, after one warm-up render."""
    render(cloud, grid, decoder, camera, cfg)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        render(cloud, grid, decoder, camera, cfg)
        times.append((time.perf_counter() - t0) * 1000.0)
    return {"median_ms": float(np.median(times)),
            "min_ms": float(np.min(times)),
            "repeats": repeats}


@dataclass
class EvalReport:
    """Per-view and aggregate metrics for a dataset split."""

    per_view: list = field(default_factory=list)
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0

    def to_dict(self) -> dict:
        return {"per_view": self.per_view, "mean_psnr": self.mean_psnr,
                "mean_ssim": self.mean_ssim}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'view':>6} {'psnr':>8} {'ssim':>8}"]
        for r in self.per_view:
            lines.append(f"{r['view']:>6} {r['psnr']:>8.3f} {r['ssim']:>8.4f}")
        lines.append(f"{'mean':>6} {self.mean_psnr:>8.3f} {self.mean_ssim:>8.4f}")
        return "\n".join(lines)


def evaluate(cloud, grid, decoder, dataset, cfg) -> EvalReport:
    """Render every view in the dataset and score against ground truth."""
    rep = EvalReport()
    for i, (camera, gt) in enumerate(zip(dataset.cameras, dataset.images)):
        bundle = render(cloud, grid, decoder, camera, cfg)
        rep.per_view.append({
            "view": i,
            "psnr": psnr(bundle.rgb, gt),
            "ssim": float(ssim(bundle.rgb, gt)),
        })
    if rep.per_view:
        rep.mean_psnr = float(np.mean([r["psnr"] for r in rep.per_view]))
        rep.mean_ssim = float(np.mean([r["ssim"] for r in rep.per_view]))
    return rep
