"""Scikit-learn style front door: a ``SceneFitter`` estimator that learns a
dynamic Gaussian scene from a dataset and renders novel views, so the
pipeline composes with the wider fit/predict ecosystem.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .deformation import DeformationField
from .filters import FilterConfig
from .geometry import DTYPE
from .metrics import psnr
from .optimizer import TrainConfig, train
from .rasterizer import RenderJob, render, render_multiscale
from .scene import GaussianScene
from .synth import Dataset, load_dataset

# Profile defaults follow the two reconstruction regimes: the visibility
# threshold and the scale-loss reduction are task-dependent.
PROFILES = {
    "monocular": {"rho_thre": 0.05, "scale_loss_mode": "sum"},
    "multiview": {"rho_thre": 5e-6, "scale_loss_mode": "mean"},
}


def check_dataset(X) -> Dataset:
    if isinstance(X, Dataset):
        dataset = X
    elif isinstance(X, (str, bytes)):
        dataset = load_dataset(str(X))
    else:
        raise TypeError("X must be a Dataset or a dataset directory path")
    if not dataset.frames:
        raise ValueError("dataset contains no frames")
    return dataset


def initialize_scene(dataset: Dataset, n_primitives: int, seed: int,
                     bounds: float = 1.0) -> GaussianScene:
    """Uniform positions inside the scene bounding box; isotropic scales set
    to the mean nearest-neighbor distance of the sample."""
    gen = torch.Generator().manual_seed(seed)
    positions = bounds * (2.0 * torch.rand(n_primitives, 3, generator=gen, dtype=DTYPE) - 1.0)
    if n_primitives > 1:
        dist = torch.cdist(positions, positions)
        dist.fill_diagonal_(math.inf)
        nn_mean = float(dist.min(dim=1).values.mean())
    else:
        nn_mean = bounds
    scales = torch.full((n_primitives, 3), max(nn_mean, 1e-3), dtype=DTYPE)
    rotations = torch.zeros(n_primitives, 4, dtype=DTYPE)
    rotations[:, 0] = 1.0
    opacities = torch.full((n_primitives,), 0.5, dtype=DTYPE)
    colors = torch.full((n_primitives, 3), 0.5, dtype=DTYPE)
    times = torch.tensor(dataset.times, dtype=DTYPE)
    field = DeformationField.zero(n_primitives, times)
    return GaussianScene(positions, rotations, scales, opacities, colors,
                         deformation=field)


class SceneFitter(BaseEstimator):
    """Fits Gaussian primitives plus deformation tables to an image dataset.

    Parameters mirror the training and filter configuration; profile defaults
    apply wherever a parameter is left at None. After ``fit`` the learned
    scene is available as ``scene_``, the frequency tracker as ``tracker_``,
    and the loss history as ``history_``.
    """

    def __init__(self, filter_kind="adaptive4d", profile="monocular",
                 n_primitives=64, warmup_iterations=3000, switch_iteration=6000,
                 total_iterations=30000, sigma_s=0.2, rho_min=0.2, rho_max=5.0,
                 rho_thre=None, eps=1e-4, lambda_scale=0.1, lambda_ssim=0.2,
                 lambda_v=0.2, scale_loss_mode=None, lr_position=1.6e-4,
                 lr_rotation=1e-3, lr_scale=5e-3, lr_opacity=5e-2,
                 lr_color=2.5e-3, lr_deformation=1.6e-3, tile_size=16, seed=0):
        self.filter_kind = filter_kind
        self.profile = profile
        self.n_primitives = n_primitives
        self.warmup_iterations = warmup_iterations
        self.switch_iteration = switch_iteration
        self.total_iterations = total_iterations
        self.sigma_s = sigma_s
        self.rho_min = rho_min
        self.rho_max = rho_max
        self.rho_thre = rho_thre
        self.eps = eps
        self.lambda_scale = lambda_scale
        self.lambda_ssim = lambda_ssim
        self.lambda_v = lambda_v
        self.scale_loss_mode = scale_loss_mode
        self.lr_position = lr_position
        self.lr_rotation = lr_rotation
        self.lr_scale = lr_scale
        self.lr_opacity = lr_opacity
        self.lr_color = lr_color
        self.lr_deformation = lr_deformation
        self.tile_size = tile_size
        self.seed = seed

    # -- configuration ------------------------------------------------------

    def _resolve_profile(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        defaults = PROFILES[self.profile]
        rho_thre = self.rho_thre if self.rho_thre is not None else defaults["rho_thre"]
        mode = (self.scale_loss_mode if self.scale_loss_mode is not None
                else defaults["scale_loss_mode"])
        return rho_thre, mode

    def filter_config(self) -> FilterConfig:
        rho_thre, _ = self._resolve_profile()
        return FilterConfig(kind=self.filter_kind, sigma_s=self.sigma_s,
                            rho_min=self.rho_min, rho_max=self.rho_max,
                            rho_thre=rho_thre, eps=self.eps)

    def train_config(self) -> TrainConfig:
        _, mode = self._resolve_profile()
        return TrainConfig(
            warmup_iterations=self.warmup_iterations,
            switch_iteration=self.switch_iteration,
            total_iterations=self.total_iterations,
            lr_position=self.lr_position, lr_rotation=self.lr_rotation,
            lr_scale=self.lr_scale, lr_opacity=self.lr_opacity,
            lr_color=self.lr_color, lr_deformation=self.lr_deformation,
            lambda_scale=self.lambda_scale, lambda_ssim=self.lambda_ssim,
            lambda_v=self.lambda_v, scale_loss_mode=mode,
            tile_size=self.tile_size, seed=self.seed,
        )

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y=None, initial_scene: GaussianScene | None = None):
        dataset = check_dataset(X)
        scene = (initial_scene.clone() if initial_scene is not None
                 else initialize_scene(dataset, self.n_primitives, self.seed))
        scene, tracker, history = train(
            scene, dataset, self.train_config(), self.filter_config()
        )
        self.dataset_ = dataset
        self.scene_ = scene
        self.tracker_ = tracker
        self.history_ = history
        return self

    def _check_fitted(self):
        if not hasattr(self, "scene_"):
            raise NotFittedError("SceneFitter is not fitted; call fit first")

    def render_view(self, camera_index: int, t: float, scale: float = 1.0):
        """Render one view of the fitted scene; scale != 1 jointly rescales
        focal length and resolution."""
        self._check_fitted()
        camera = self.dataset_.cameras[camera_index]
        with torch.no_grad():
            images = render_multiscale(
                self.scene_, camera, t, [scale], self.filter_config(),
                background=self.dataset_.background, tile_size=self.tile_size,
            )
        return images[0]

    def predict(self, X):
        """Render views for rows of (camera_index, time) or
        (camera_index, time, scale). Returns a float array (n, H, W, 3)."""
        self._check_fitted()
        rows = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if rows.shape[1] not in (2, 3):
            raise ValueError("rows must be (camera_index, time[, scale])")
        out = []
        for row in rows:
            scale = float(row[2]) if rows.shape[1] == 3 else 1.0
            image = self.render_view(int(row[0]), float(row[1]), scale)
            out.append(image.image.numpy())
        return np.stack(out)

    def score(self, X, y=None) -> float:
        """Mean PSNR (dB) of fitted renders against the dataset's frames."""
        dataset = check_dataset(X)
        self._check_fitted()
        values = []
        cfg = self.filter_config()
        with torch.no_grad():
            for frame in dataset.frames:
                job = RenderJob(scene=self.scene_,
                                camera=dataset.cameras[frame.camera_index],
                                time=dataset.times[frame.time_index],
                                filter_config=cfg,
                                background=dataset.background,
                                tile_size=self.tile_size)
                values.append(psnr(render(job).image, frame.image))
        finite = [v for v in values if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf
