"""Alias-aware 4D Gaussian splatting on the CPU: projection and blending of
time-deforming anisotropic Gaussians, sampling-frequency-aware low-pass
filters, and gradient-based scene fitting."""

from .deformation import DeformationField, DeformationTrack, deform, scale_ratio
from .estimator import SceneFitter
from .filters import FilterConfig, FilteredGaussian2D
from .frequency import FrequencyTracker, brute_force_interval, static_interval
from .geometry import CameraModel, Covariance2D, GaussianPrimitive, build_covariance
from .optimizer import LossReport, TrainConfig, train
from .rasterizer import RenderJob, RenderedImage, render, render_multiscale
from .scene import GaussianScene, load_scene, save_scene
from .synth import Dataset, make_rig, make_scene, render_ground_truth

__all__ = [
    "CameraModel", "Covariance2D", "Dataset", "DeformationField",
    "DeformationTrack", "FilterConfig", "FilteredGaussian2D",
    "FrequencyTracker", "GaussianPrimitive", "GaussianScene", "LossReport",
    "RenderJob", "RenderedImage", "SceneFitter", "TrainConfig",
    "brute_force_interval", "build_covariance", "deform", "load_scene",
    "make_rig", "make_scene", "render", "render_ground_truth",
    "render_multiscale", "save_scene", "scale_ratio", "static_interval",
    "train",
]

__version__ = "0.1.0"
