"""Scikit-learn style facade over the training and rendering pipeline.

`SurfelSplatter` treats a posed-image `Dataset` as X: `fit` optimizes the
scene, `predict` renders cameras, `score` reports mean PSNR. Hyperparameters
mirror `TrainConfig` fields so grid searches compose with sklearn tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cameras import Camera
from .dataio import Dataset
from .metrics import evaluate, psnr
from .renderer import render, render_decomposed
from .train import TrainConfig, train


def _as_cameras(X) -> list:
    if isinstance(X, Dataset):
        return list(X.cameras)
    if isinstance(X, Camera):
        return [X]
    cams = list(X)
    if not all(isinstance(c, Camera) for c in cams):
        raise TypeError("predict expects a Dataset, a Camera, or a list of Cameras")
    return cams


class SurfelSplatter(BaseEstimator):
    """Fit a surfel scene representation to posed images.

    Parameters are the TrainConfig fields of the chosen preset; any keyword
    accepted by TrainConfig can be overridden at construction.
    """

    def __init__(self, preset: str = "desk", seed: int = 0, **overrides):
        self.preset = preset
        self.seed = seed
        for k, v in overrides.items():
            if k not in TrainConfig.__dataclass_fields__:
                raise ValueError(f"unknown hyperparameter {k!r}")
            setattr(self, k, v)
        self._override_keys = sorted(overrides)

    def get_params(self, deep: bool = True) -> dict:
        out = {"preset": self.preset, "seed": self.seed}
        for k in getattr(self, "_override_keys", []):
            out[k] = getattr(self, k)
        return out

    def set_params(self, **params) -> "SurfelSplatter":
        for k, v in params.items():
            if k not in ("preset", "seed") \
                    and k not in TrainConfig.__dataclass_fields__:
                raise ValueError(f"unknown hyperparameter {k!r}")
            setattr(self, k, v)
            if k not in ("preset", "seed") and k not in self._override_keys:
                self._override_keys = sorted(self._override_keys + [k])
        return self

    def _config(self) -> TrainConfig:
        if self.preset == "desk":
            cfg = TrainConfig.desk_preset()
        elif self.preset == "paper":
            cfg = TrainConfig.paper_preset()
        else:
            raise ValueError(f"unknown preset {self.preset!r}")
        for k in self._override_keys:
            setattr(cfg, k, getattr(self, k))
        cfg.seed = self.seed
        cfg.validate()
        return cfg

    def fit(self, X: Dataset, y=None, out_dir=None) -> "SurfelSplatter":
        """Optimize the representation on a Dataset; y is ignored."""
        if not isinstance(X, Dataset):
            raise TypeError("fit expects a surfelsplat.Dataset")
        cfg = self._config()
        ckpt, log = train(X, cfg, out_dir=out_dir)
        self.checkpoint_ = ckpt
        self.log_ = log
        self.config_ = cfg
        self.n_surfels_ = ckpt.cloud.count
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("call fit before predict/score")

    def predict(self, X, mode: str = "full") -> np.ndarray:
        """Render the given cameras; returns (n, H, W, 3) in [0, 1]."""
        self._check_fitted()
        ck = self.checkpoint_
        rcfg = self.config_.render_config("bce")
        frames = []
        for cam in _as_cameras(X):
            b = render(ck.cloud, ck.grid, ck.decoder, cam, rcfg) \
                if mode == "full" else \
                render_decomposed(ck.cloud, ck.grid, ck.decoder, cam, rcfg, mode)
            frames.append(b.rgb)
        return np.stack(frames)

    def score(self, X: Dataset, y=None) -> float:
        """Mean PSNR over the dataset views (higher is better)."""
        self._check_fitted()
        if not isinstance(X, Dataset):
            raise TypeError("score expects a surfelsplat.Dataset")
        ck = self.checkpoint_
        rep = evaluate(ck.cloud, ck.grid, ck.decoder, X,
                       self.config_.render_config("bce"))
        return rep.mean_psnr
