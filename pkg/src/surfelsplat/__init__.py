"""Differentiable 2D-surfel splatting with hybrid latent appearance.

Submodules are imported lazily so the CLI can pin BLAS thread counts via
environment variables before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Camera": "cameras", "look_at_pose": "cameras",
    "Surfel": "geometry", "SurfelCloud": "geometry",
    "beta_kernel": "geometry", "quat_frame": "geometry",
    "HashGrid": "field", "Decoder": "field", "sh_encode": "field",
    "RenderConfig": "renderer", "FrameBundle": "renderer",
    "render": "renderer", "render_decomposed": "renderer",
    "render_backward": "renderer",
    "LossWeights": "losses", "LossReport": "losses", "ssim": "losses",
    "TrainConfig": "train", "train": "train",
    "Dataset": "dataio", "Checkpoint": "dataio",
    "gen_toy_scene": "dataio", "load_nerf_synthetic": "dataio",
    "save_checkpoint": "dataio", "load_checkpoint": "dataio",
    "export_ply": "dataio", "import_ply": "dataio",
    "psnr": "metrics", "chamfer": "metrics", "evaluate": "metrics",
    "EvalReport": "metrics", "bench_render": "metrics",
    "SurfelSplatter": "estimator",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        import importlib
        mod = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(mod, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
