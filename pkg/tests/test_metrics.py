import json
import math

import numpy as np
import pytest

from surfelsplat.metrics import (EvalReport, bench_render, chamfer, evaluate,
                                 psnr)
from surfelsplat.renderer import RenderConfig

from helpers import make_scene


class TestPsnr:
    def test_identical_is_inf(self):
        x = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert psnr(x, x) == math.inf

    def test_known_value(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)   # mse = 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.3, 0.7, size=(16, 16, 3))
        vals = []
        for amp in (0.01, 0.05, 0.2):
            noise = rng.uniform(-amp, amp, size=x.shape)
            vals.append(psnr(x, x + noise))
        assert vals[0] > vals[1] > vals[2]


class TestChamfer:
    def test_identical_zero(self):
        p = np.random.default_rng(2).normal(size=(30, 3))
        assert chamfer(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(25, 3))
        b = rng.normal(size=(40, 3))
        assert chamfer(a, b) == pytest.approx(chamfer(b, a), abs=1e-12)

    def test_known_offset(self):
        a = np.zeros((1, 3))
        b = np.array([[3.0, 4.0, 0.0]])
        assert chamfer(a, b) == pytest.approx(5.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chamfer(np.zeros((0, 3)), np.zeros((5, 3)))


class TestBench:
    def test_reports_positive_median(self):
        cloud, grid, decoder, camera = make_scene(4, n=6, res=12)
        r = bench_render(cloud, grid, decoder, camera, RenderConfig(),
                         repeats=3)
        assert r["median_ms"] > 0.0
        assert r["min_ms"] <= r["median_ms"]
        assert r["repeats"] == 3


class TestEvaluate:
    def test_report_on_self_render(self):
        from surfelsplat.dataio import Dataset
        from surfelsplat.renderer import render
        cloud, grid, decoder, camera = make_scene(5, n=8, res=12)
        cfg = RenderConfig()
        gt = render(cloud, grid, decoder, camera, cfg).rgb
        ds = Dataset(cameras=[camera], images=[gt], points=None,
                     scene_aabb=(np.full(3, -1.5), np.full(3, 1.5)))
        rep = evaluate(cloud, grid, decoder, ds, cfg)
        assert rep.per_view[0]["psnr"] == math.inf
        assert rep.per_view[0]["ssim"] == pytest.approx(1.0, abs=1e-12)

    def test_json_and_table_consistent(self):
        rep = EvalReport(per_view=[{"view": 0, "psnr": 30.0, "ssim": 0.9}],
                         mean_psnr=30.0, mean_ssim=0.9)
        d = json.loads(rep.to_json())
        assert d["mean_psnr"] == 30.0
        assert "30.000" in rep.table()
