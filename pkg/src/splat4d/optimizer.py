"""Gradient-based fitting of primitives and deformation tables to target
image sequences.

Loss = color loss (L1 + SSIM mix) + lambda_scale * scale loss, with a
static warm-up phase before joint optimization and the frequency tracker
switching from its static estimate to momentum refinement mid-training.
Gradients come from the analytic reverse pass through blending, filtering,
projection, and interpolation; the frequency tracker is a constant per
iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

from .deformation import SCALE_FLOOR, apply_deltas
from .filters import FilterConfig
from .frequency import FrequencyTracker
from .geometry import DTYPE, quat_normalize
from .metrics import ssim_value
from .rasterizer import RenderJob, RenderedImage, render
from .scene import GaussianScene
from .synth import Dataset


@dataclass(frozen=True)
class TrainConfig:
    warmup_iterations: int = 3000
    switch_iteration: int = 6000
    total_iterations: int = 30000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_deformation: float = 1.6e-3
    lambda_scale: float = 0.1
    lambda_ssim: float = 0.2
    lambda_v: float = 0.2
    scale_loss_mode: str = "sum"   # "sum" (monocular) or "mean" (multi-view)
    seed: int = 0
    tile_size: int = 16
    divergence_factor: float = 10.0
    divergence_patience: int = 200
    log_every: int = 1

    def __post_init__(self):
        if not self.warmup_iterations < self.switch_iteration < self.total_iterations:
            raise ValueError("need warmup < switch < total iterations")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_opacity",
                     "lr_color", "lr_deformation"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.scale_loss_mode not in ("sum", "mean"):
            raise ValueError("scale_loss_mode must be 'sum' or 'mean'")


@dataclass(frozen=True)
class LossReport:
    iteration: int
    color: float
    scale: float
    total: float
    active_count: int


class DivergenceError(RuntimeError):
    """Raised when the loss stays above divergence_factor x its initial value
    for divergence_patience consecutive iterations."""

    def __init__(self, message: str, history: list[LossReport]):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# losses

def _as_image_tensor(x) -> torch.Tensor:
    if isinstance(x, RenderedImage):
        return x.image
    return torch.as_tensor(x, dtype=DTYPE)


def color_loss_value(rendered, target, lambda_ssim: float = 0.2) -> torch.Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM); differentiable.

    The SSIM window shrinks to the largest odd size that fits when the image
    is smaller than the standard 11x11 window.
    """
    a = _as_image_tensor(rendered)
    b = _as_image_tensor(target)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    l1 = (a - b).abs().mean()
    if lambda_ssim == 0.0:
        return l1
    window = min(11, min(a.shape[0], a.shape[1]))
    if window % 2 == 0:
        window -= 1
    if window < 3:
        raise ValueError("image too small for the structural term")
    structural = 1.0 - ssim_value(a, b, window=window)
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * structural


def color_loss(rendered, target, lambda_ssim: float = 0.2):
    """Loss value and its per-pixel gradient with respect to the rendered image."""
    a = _as_image_tensor(rendered).detach().clone().requires_grad_(True)
    b = _as_image_tensor(target).detach()
    value = color_loss_value(a, b, lambda_ssim)
    (grad,) = torch.autograd.grad(value, a)
    return float(value.detach()), grad


def scale_loss(scene: GaussianScene, t: float, tracker: FrequencyTracker,
               config: FilterConfig, mode: str = "sum"):
    """Band regularizer pushing deformed scales up and out of the sub-filter
    regime: sum (or mean over active entries) of rho_min*sigma_s/nu^2 - s(t)^2
    where the indicator band rho_thre*sigma_s/nu^2 < s(t)^2 < rho_min*sigma_s/nu^2
    is active. Returns (loss tensor, count of primitives with any active axis)."""
    _, _, ds = scene.deformation.evaluate(t)
    s_t = (scene.scales + ds).clamp_min(SCALE_FLOOR)
    s_t_sq = s_t * s_t
    nu_sq = (tracker.max_frequencies() ** 2).detach()[:, None]
    band_hi = config.rho_min * config.sigma_s / nu_sq
    band_lo = config.rho_thre * config.sigma_s / nu_sq
    active = (s_t_sq > band_lo) & (s_t_sq < band_hi)
    terms = (band_hi - s_t_sq) * active
    if mode == "mean":
        count = active.sum()
        loss = terms.sum() / count.clamp_min(1)
    else:
        loss = terms.sum()
    primitives_active = int(active.any(dim=1).sum())
    return loss, primitives_active


# ---------------------------------------------------------------------------
# gradients

PARAMETER_GROUPS = ("positions", "rotations", "scales", "opacities", "colors",
                    "position_deltas", "rotation_deltas", "scale_deltas")


def backward(job: RenderJob, target, tracker: FrequencyTracker | None = None,
             lambda_ssim: float = 0.2, lambda_scale: float = 0.0,
             scale_loss_mode: str = "sum") -> dict[str, torch.Tensor]:
    """Gradients of the total loss for every learnable parameter group.

    The frequency tracker is treated as a constant. Raises on non-finite
    gradients, naming the offending group.
    """
    scene = job.scene
    params = scene.parameters()
    for p in params.values():
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    result = render(job)
    loss = color_loss_value(result.image, target, lambda_ssim)
    if lambda_scale > 0.0:
        if tracker is None:
            tracker = FrequencyTracker(intervals=scene.sampling_intervals)
        s_loss, _ = scale_loss(scene, job.time, tracker, job.filter_config,
                               mode=scale_loss_mode)
        loss = loss + lambda_scale * s_loss
    loss.backward()
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not bool(torch.isfinite(g).all()):
            raise RuntimeError(f"non-finite gradient in parameter group {name}")
        grads[name] = g.detach().clone()
        p.grad = None
        p.requires_grad_(False)
    return grads


# ---------------------------------------------------------------------------
# training

def _make_optimizer(scene: GaussianScene, config: TrainConfig) -> torch.optim.Adam:
    params = scene.parameters()
    groups = [
        {"params": [params["positions"]], "lr": config.lr_position, "name": "positions"},
        {"params": [params["rotations"]], "lr": config.lr_rotation, "name": "rotations"},
        {"params": [params["scales"]], "lr": config.lr_scale, "name": "scales"},
        {"params": [params["opacities"]], "lr": config.lr_opacity, "name": "opacities"},
        {"params": [params["colors"]], "lr": config.lr_color, "name": "colors"},
        {"params": [params["position_deltas"], params["rotation_deltas"],
                    params["scale_deltas"]],
         "lr": config.lr_deformation, "name": "deformation"},
    ]
    return torch.optim.Adam(groups, eps=1e-15)


def _position_lr(config: TrainConfig, iteration: int) -> float:
    frac = iteration / max(config.total_iterations, 1)
    return config.lr_position * (config.lr_position_final / config.lr_position) ** frac


def _project_parameters(scene: GaussianScene) -> None:
    with torch.no_grad():
        scene.rotations.copy_(quat_normalize(scene.rotations))
        scene.opacities.clamp_(0.0, 1.0)
        scene.scales.clamp_min_(SCALE_FLOOR)


def _frame_order(num_frames: int, total: int, generator: torch.Generator):
    order: list[int] = []
    while len(order) < total:
        order.extend(torch.randperm(num_frames, generator=generator).tolist())
    return order[:total]


def train(scene: GaussianScene, dataset: Dataset, config: TrainConfig,
          filter_config: FilterConfig):
    """Fit the scene to the dataset.

    Warm-up optimizes static parameters with the deformation frozen at zero;
    the joint phase then unfreezes the deformation tables. Deterministic for
    a fixed seed. Returns (scene, tracker, history).
    """
    if not dataset.frames:
        raise ValueError("dataset is empty")
    generator = torch.Generator().manual_seed(config.seed)
    scene.requires_grad_(True)
    optimizer = _make_optimizer(scene, config)
    tracker = FrequencyTracker.for_scene(
        scene, dataset.cameras, lambda_v=config.lambda_v,
        switch_iteration=config.switch_iteration,
    )
    order = _frame_order(len(dataset.frames), config.total_iterations, generator)
    history: list[LossReport] = []
    initial_loss = None
    high_streak = 0
    zero_field = None

    for iteration in range(config.total_iterations):
        warmup = iteration < config.warmup_iterations
        tracker.advance(iteration)
        frame = dataset.frames[order[iteration]]
        camera = dataset.cameras[frame.camera_index]
        t = dataset.times[frame.time_index]

        if warmup:
            if zero_field is None:
                from .deformation import DeformationField

                zero_field = DeformationField.zero(
                    scene.num_primitives, scene.deformation.times
                )
            live_field = scene.deformation
            scene.deformation = zero_field
        job = RenderJob(scene=scene, camera=camera, time=t,
                        filter_config=filter_config,
                        background=dataset.background, tile_size=config.tile_size)
        result = render(job)
        c_loss = color_loss_value(result.image, frame.image, config.lambda_ssim)
        s_loss, active = scale_loss(scene, t, tracker, filter_config,
                                    mode=config.scale_loss_mode)
        total = c_loss + config.lambda_scale * s_loss
        if warmup:
            scene.deformation = live_field

        optimizer.zero_grad(set_to_none=True)
        total.backward()
        if warmup:
            for name in ("position_deltas", "rotation_deltas", "scale_deltas"):
                p = scene.parameters()[name]
                p.grad = None
        for group in optimizer.param_groups:
            if group["name"] == "positions":
                group["lr"] = _position_lr(config, iteration)
        optimizer.step()
        _project_parameters(scene)

        if tracker.mode == "momentum":
            tracker.batch_update(result.primitive_ids, result.depths, camera.f)
        elif iteration % 100 == 99 or iteration == config.warmup_iterations - 1:
            tracker.refresh_static(scene, dataset.cameras)

        report = LossReport(
            iteration=iteration,
            color=float(c_loss.detach()),
            scale=float(s_loss.detach()),
            total=float(total.detach()),
            active_count=active,
        )
        if iteration % config.log_every == 0 or iteration == config.total_iterations - 1:
            history.append(report)

        if initial_loss is None:
            initial_loss = report.total
        if report.total > config.divergence_factor * max(initial_loss, 1e-12):
            high_streak += 1
            if high_streak >= config.divergence_patience:
                scene.requires_grad_(False)
                raise DivergenceError(
                    f"loss above {config.divergence_factor}x initial for "
                    f"{high_streak} consecutive iterations", history,
                )
        else:
            high_streak = 0

    scene.requires_grad_(False)
    scene.sampling_intervals = tracker.intervals.clone()
    return scene, tracker, history


def optimizer_state_tensors(optimizer: torch.optim.Adam) -> dict[str, torch.Tensor]:
    """Flattened Adam state for checkpoint serialization."""
    out: dict[str, torch.Tensor] = {}
    for gi, group in enumerate(optimizer.param_groups):
        for pi, p in enumerate(group["params"]):
            state = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    out[f"adam.{gi}.{pi}.{key}"] = state[key].reshape(-1)
            if "step" in state:
                out[f"adam.{gi}.{pi}.step"] = torch.as_tensor(
                    [float(state["step"])], dtype=DTYPE
                )
    return out
