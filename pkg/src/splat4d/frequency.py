"""Per-primitive maximum-sampling-frequency tracking.

The minimum sampling interval of primitive k is the smallest depth/focal
ratio over all cameras and times that see it; its reciprocal is the maximum
sampling frequency. A cheap static estimate (base positions only) covers the
warm-up and early joint phase, after which a momentum update refines the
interval from depths the rasterizer already computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .deformation import DeformationTrack, deform
from .geometry import (
    DTYPE,
    CameraModel,
    GaussianPrimitive,
    build_covariance_batch,
    visibility_mask,
)

UNTRACKED = math.nan


def momentum_step(interval: float, d_over_f: float, lambda_v: float) -> float:
    """One momentum update of the minimum sampling interval."""
    return (1.0 - lambda_v) * interval + lambda_v * min(interval, d_over_f)


def static_intervals_batch(positions: torch.Tensor, covariances: torch.Tensor,
                           cameras: list[CameraModel]) -> torch.Tensor:
    """Static interval per primitive: min over visible cameras of depth/f.

    Primitives no camera sees get NaN (untracked).
    """
    k = positions.shape[0]
    best = torch.full((k,), math.inf, dtype=DTYPE)
    for cam in cameras:
        vis = visibility_mask(positions, covariances, cam)
        depth = cam.world_to_camera(positions)[:, 2]
        ratio = depth / cam.f
        best = torch.where(vis, torch.minimum(best, ratio), best)
    return torch.where(torch.isinf(best), torch.full_like(best, UNTRACKED), best)


def static_interval(g: GaussianPrimitive, cameras: list[CameraModel]) -> float | None:
    """Static interval of one primitive, or None when no camera sees it."""
    cov = build_covariance_batch(g.rotation.unsqueeze(0), g.scale.unsqueeze(0))
    value = float(static_intervals_batch(g.position.unsqueeze(0), cov, cameras)[0])
    return None if math.isnan(value) else value


def brute_force_interval(g: GaussianPrimitive, track: DeformationTrack | None,
                         cameras: list[CameraModel], timesteps) -> float | None:
    """Exhaustive minimum of depth/f over every (camera, time) pair that sees
    the deformed primitive. Test oracle; None when never visible."""
    best = math.inf
    for t in timesteps:
        p_t, r_t, s_t = deform(g, track, float(t))
        cov = build_covariance_batch(r_t.unsqueeze(0), s_t.unsqueeze(0))
        for cam in cameras:
            if bool(visibility_mask(p_t.unsqueeze(0), cov, cam)[0]):
                best = min(best, float(cam.world_to_camera(p_t)[2]) / cam.f)
    return None if math.isinf(best) else best


@dataclass
class FrequencyTracker:
    """Holds per-primitive minimum sampling intervals (NaN = untracked)."""

    intervals: torch.Tensor
    mode: str = "static"          # {"static", "momentum"}
    lambda_v: float = 0.2
    switch_iteration: int = 6000

    def __post_init__(self):
        self.intervals = torch.as_tensor(self.intervals, dtype=DTYPE).reshape(-1)
        if self.mode not in ("static", "momentum"):
            raise ValueError(f"unknown tracker mode {self.mode!r}")
        if not 0.0 < self.lambda_v <= 1.0:
            raise ValueError("lambda_v must lie in (0, 1]")

    @classmethod
    def for_scene(cls, scene, cameras, lambda_v: float = 0.2,
                  switch_iteration: int = 6000) -> "FrequencyTracker":
        tracker = cls(
            intervals=torch.full((scene.num_primitives,), UNTRACKED, dtype=DTYPE),
            lambda_v=lambda_v,
            switch_iteration=switch_iteration,
        )
        tracker.refresh_static(scene, cameras)
        return tracker

    def refresh_static(self, scene, cameras) -> None:
        with torch.no_grad():
            covs = build_covariance_batch(scene.rotations, scene.scales)
            self.intervals = static_intervals_batch(scene.positions, covs, cameras)
        scene.sampling_intervals = self.intervals.clone()

    def advance(self, iteration: int) -> None:
        if self.mode == "static" and iteration >= self.switch_iteration:
            self.mode = "momentum"

    def update(self, k: int, depth: float, f: float) -> None:
        """Single-primitive momentum update; non-positive observations are
        rejected and leave the tracker unchanged."""
        ratio = depth / f
        if ratio <= 0.0:
            return
        current = float(self.intervals[k])
        if math.isnan(current):
            self.intervals[k] = ratio
        else:
            self.intervals[k] = momentum_step(current, ratio, self.lambda_v)

    def batch_update(self, ids: torch.Tensor, depths: torch.Tensor, f: float) -> None:
        """Momentum update from a rasterizer depth list (one pass per view)."""
        if self.mode != "momentum":
            return
        ratios = torch.as_tensor(depths, dtype=DTYPE) / f
        ids = torch.as_tensor(ids, dtype=torch.long)
        keep = ratios > 0
        ids, ratios = ids[keep], ratios[keep]
        current = self.intervals[ids]
        fresh = torch.isnan(current)
        updated = (1.0 - self.lambda_v) * current + self.lambda_v * torch.minimum(current, ratios)
        self.intervals[ids] = torch.where(fresh, ratios, updated)

    @property
    def tracked(self) -> torch.Tensor:
        return ~torch.isnan(self.intervals)

    def effective_intervals(self) -> torch.Tensor:
        """Intervals with untracked entries filled by the scene median."""
        tracked = self.tracked
        if not bool(tracked.any()):
            return torch.ones_like(self.intervals)
        fallback = self.intervals[tracked].median()
        return torch.where(tracked, self.intervals, fallback)

    def max_frequencies(self) -> torch.Tensor:
        return 1.0 / self.effective_intervals()


def tracker_from_intervals(intervals: torch.Tensor, **kwargs) -> FrequencyTracker:
    return FrequencyTracker(intervals=intervals, **kwargs)
