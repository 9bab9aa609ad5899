import numpy as np
import pytest

from surfelsplat.geometry import SurfelCloud
from surfelsplat.renderer import (RenderConfig, blend_stats, render,
                                  render_backward, render_decomposed)

from helpers import make_camera, make_cloud, make_scene, naive_render


def default_cfg(**kw):
    return RenderConfig(**kw)


class TestForwardOracle:
    @pytest.mark.parametrize("seed", range(6))
    def test_bit_exact_vs_naive(self, seed):
        cloud, grid, decoder, camera = make_scene(seed, n=10, res=16)
        for mode, bypass in (("beta", False), ("gaussian", False), ("beta", True)):
            cfg = default_cfg(kernel_mode=mode, bypass_decoder=bypass)
            b = render(cloud, grid, decoder, camera, cfg)
            rgb, alpha, depth, normal, blends = naive_render(
                cloud, grid, decoder, camera, cfg)
            assert np.array_equal(b.rgb, rgb)
            assert np.array_equal(b.alpha, alpha)
            assert np.array_equal(b.depth, depth)
            assert np.array_equal(b.normal, normal)
            assert np.array_equal(b.blends, blends)

    def test_weight_conservation(self):
        cloud, grid, decoder, camera = make_scene(11, n=20, res=16)
        b = render(cloud, grid, decoder, camera, default_cfg(), save_ctx=True)
        w_sum = np.bincount(b.ctx["pix"], weights=b.ctx["w"],
                            minlength=camera.height * camera.width)
        assert np.allclose(w_sum.reshape(16, 16), b.alpha, atol=1e-15)
        assert np.all(b.alpha >= 0.0) and np.all(b.alpha <= 1.0)

    def test_null_surfel_invariance(self):
        cloud, grid, decoder, camera = make_scene(12, n=8, res=16)
        b0 = render(cloud, grid, decoder, camera, default_cfg())
        ext = SurfelCloud(
            mu=np.vstack([cloud.mu, [[0.0, 0.0, 0.5]]]),
            quat=np.vstack([cloud.quat, [[1.0, 0, 0, 0]]]),
            log_s=np.vstack([cloud.log_s, [[-1.0, -1.0]]]),
            o_logit=np.append(cloud.o_logit, -60.0),   # sigmoid -> 0 exactly
            b=np.append(cloud.b, 0.0),
            f_g=np.vstack([cloud.f_g, np.zeros((1, cloud.feat_dim))]),
        )
        b1 = render(ext, grid, decoder, camera, default_cfg())
        assert np.array_equal(b0.rgb, b1.rgb)

    def test_storage_order_invariance(self):
        cloud, grid, decoder, camera = make_scene(13, n=15, res=16)
        b0 = render(cloud, grid, decoder, camera, default_cfg())
        perm = np.random.default_rng(0).permutation(cloud.count)
        b1 = render(cloud.select(perm), grid, decoder, camera, default_cfg())
        assert np.array_equal(b0.rgb, b1.rgb)
        assert np.array_equal(b0.depth, b1.depth)

    def test_tile_size_invariance(self):
        cloud, grid, decoder, camera = make_scene(14, n=12, res=24)
        outs = [render(cloud, grid, decoder, camera, default_cfg(tile_size=ts)).rgb
                for ts in (4, 8, 16, 64)]
        for o in outs[1:]:
            assert np.array_equal(outs[0], o)

    def test_empty_cloud_background(self):
        _, grid, decoder, camera = make_scene(15, n=1)
        empty = SurfelCloud(np.zeros((0, 3)), np.zeros((0, 4)),
                            np.zeros((0, 2)), np.zeros(0), np.zeros(0),
                            np.zeros((0, 4)))
        b = render(empty, grid, decoder, camera, default_cfg())
        assert np.all(b.rgb == 1.0)
        assert np.all(b.alpha == 0.0)
        assert np.all(b.blends == 0)

    def test_background_color(self):
        _, grid, decoder, camera = make_scene(16, n=1)
        empty = SurfelCloud(np.zeros((0, 3)), np.zeros((0, 4)),
                            np.zeros((0, 2)), np.zeros(0), np.zeros(0),
                            np.zeros((0, 4)))
        cfg = default_cfg(background=(0.2, 0.4, 0.6))
        b = render(empty, grid, decoder, camera, cfg)
        assert np.allclose(b.rgb, [0.2, 0.4, 0.6])

    def test_normals_face_camera(self):
        cloud, grid, decoder, camera = make_scene(17, n=10, res=16)
        b = render(cloud, grid, decoder, camera, default_cfg())
        dirs = camera.ray_dirs().reshape(16, 16, 3)
        dot = np.sum(b.normal * dirs, axis=-1)
        assert np.all(dot <= 1e-12)


class TestDecomposition:
    def test_feature_additivity_exact(self):
        cloud, grid, decoder, camera = make_scene(20, n=12, res=16)
        cfg = default_cfg()
        full = render(cloud, grid, decoder, camera, cfg, save_ctx=True)
        so = render(cloud, grid, decoder, camera, cfg, save_ctx=True,
                    mask_mode="surfel_only")
        ho = render(cloud, grid, decoder, camera, cfg, save_ctx=True,
                    mask_mode="hash_only")
        assert np.array_equal(full.ctx["F_pix"],
                              so.ctx["F_pix"] + ho.ctx["F_pix"])

    def test_surfel_only_equals_full_on_zero_table(self):
        cloud, grid, decoder, camera = make_scene(21, n=10, res=16)
        grid.table[:] = 0.0
        cfg = default_cfg()
        full = render_decomposed(cloud, grid, decoder, camera, cfg, "full")
        so = render_decomposed(cloud, grid, decoder, camera, cfg, "surfel_only")
        assert np.array_equal(full.rgb, so.rgb)

    def test_unknown_mode_rejected(self):
        cloud, grid, decoder, camera = make_scene(22, n=2)
        with pytest.raises(ValueError):
            render_decomposed(cloud, grid, decoder, camera, default_cfg(), "nope")


class TestBackward:
    def test_full_gradient_fd(self):
        # spot checks here; the exhaustive sweep is in test_acceptance
        cloud, grid, decoder, camera = make_scene(30, n=5, res=10)
        cfg = default_cfg()
        bundle = render(cloud, grid, decoder, camera, cfg, save_ctx=True)
        g_rgb = np.ones_like(bundle.rgb)
        grads = render_backward(cloud, grid, decoder, bundle, g_rgb)

        def loss(c):
            return float(np.sum(render(c, grid, decoder, camera, cfg).rgb))

        h = 1e-6
        rng = np.random.default_rng(0)
        for name in ("mu", "quat", "log_s", "o_logit", "b", "f_g"):
            arr = getattr(cloud, name)
            flat = arr.reshape(arr.shape[0], -1)
            gflat = grads[name].reshape(arr.shape[0], -1)
            for _ in range(4):
                i = int(rng.integers(arr.shape[0]))
                j = int(rng.integers(flat.shape[1]))
                orig = flat[i, j]
                flat[i, j] = orig + h
                up = loss(cloud)
                flat[i, j] = orig - h
                dn = loss(cloud)
                flat[i, j] = orig
                fd = (up - dn) / (2 * h)
                assert gflat[i, j] == pytest.approx(fd, rel=2e-3, abs=2e-6), name

    def test_depth_and_alpha_grads(self):
        cloud, grid, decoder, camera = make_scene(31, n=5, res=8)
        cfg = default_cfg()
        bundle = render(cloud, grid, decoder, camera, cfg, save_ctx=True)
        g_alpha = np.ones_like(bundle.alpha)
        g_depth = np.ones_like(bundle.depth)
        grads = render_backward(cloud, grid, decoder, bundle,
                                np.zeros_like(bundle.rgb),
                                grad_alpha=g_alpha, grad_depth=g_depth)

        def loss(c):
            b = render(c, grid, decoder, camera, cfg)
            return float(np.sum(b.alpha) + np.sum(b.depth))

        h = 1e-6
        for i in range(cloud.count):
            orig = cloud.o_logit[i]
            cloud.o_logit[i] = orig + h
            up = loss(cloud)
            cloud.o_logit[i] = orig - h
            dn = loss(cloud)
            cloud.o_logit[i] = orig
            assert grads["o_logit"][i] == pytest.approx((up - dn) / (2 * h),
                                                        rel=1e-4, abs=1e-8)

    def test_backward_requires_ctx(self):
        cloud, grid, decoder, camera = make_scene(32, n=3)
        bundle = render(cloud, grid, decoder, camera, default_cfg())
        with pytest.raises((ValueError, TypeError, AssertionError)):
            render_backward(cloud, grid, decoder, bundle,
                            np.zeros((16, 16, 3)))


class TestBlendStats:
    def test_counts_and_savings(self):
        cloud, grid, decoder, camera = make_scene(40, n=20, res=16)
        b = render(cloud, grid, decoder, camera, default_cfg(), save_ctx=True)
        stats = blend_stats(b)
        assert stats["mean"] == pytest.approx(float(b.blends.mean()))
        assert stats["p95"] >= stats["p50"]
        assert stats["queries_saved"] >= 0

    def test_opaque_front_surfel_saves_queries(self):
        rng = np.random.default_rng(41)
        cloud = make_cloud(rng, n=10)
        camera = make_camera(res=16)
        # a huge fully-opaque wall in front of everything
        cloud.mu[0] = [0.0, -1.5, 0.0]
        cloud.quat[0] = [np.cos(np.pi / 4), np.sin(np.pi / 4), 0.0, 0.0]
        cloud.log_s[0] = np.log(5.0)
        cloud.o_logit[0] = 40.0
        cloud.b[0] = -40.0  # beta -> 0: nearly flat kernel, alpha ~ 1 everywhere
        _, grid, decoder, _ = make_scene(41, n=1)
        b = render(cloud, grid, decoder, camera,
                   default_cfg(kernel_mode="beta"), save_ctx=True)
        assert blend_stats(b)["queries_saved"] > 0
