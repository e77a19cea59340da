"""Low-pass filters applied to Gaussians before blending.

Four variants: a screen-space dilation, a screen-space mip filter with
determinant-ratio normalization, an object-space smoothing filter capped by
the primitive's maximum sampling frequency, and the scale-adaptive 4D filter
that modulates the object-space dilation per axis by the temporal scale
change, masking sub-threshold primitives to a minimal dilation.

All functions are pure and operate on batched tensors (leading dims free);
they also accept the single-primitive dataclasses from :mod:`geometry`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .geometry import DTYPE, Covariance2D, quat_to_rotmat

FILTER_KINDS = ("none", "dilation2d", "mip2d", "smoothing3d", "adaptive4d")

# Determinants are clamped here before forming ratios, so degenerate
# covariances produce a 0-ish normalization instead of 0/0.
DET_FLOOR = 1e-30


@dataclass(frozen=True)
class FilterConfig:
    """Active filter kind plus every dilation hyperparameter.

    ``render_rate_ratio`` is the training sampling rate divided by the
    current rendering rate; values above 1 (zoomed-out renders) rescale the
    minimum dilation ratio, capped at 1.
    """

    kind: str = "adaptive4d"
    sigma_s: float = 0.2
    rho_min: float = 0.2
    rho_max: float = 5.0
    rho_thre: float = 0.05
    eps: float = 1e-4
    render_rate_ratio: float = 1.0
    per_axis: bool = True

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.sigma_s <= 0:
            raise ValueError("sigma_s must be positive")
        if not 0 < self.rho_min <= self.rho_max:
            raise ValueError("need 0 < rho_min <= rho_max")
        if self.rho_thre < 0:
            raise ValueError("rho_thre must be non-negative")
        if not 0 < self.eps < self.rho_min:
            raise ValueError("need 0 < eps < rho_min")
        if self.render_rate_ratio <= 0:
            raise ValueError("render_rate_ratio must be positive")

    def effective_rho_min(self) -> float:
        return rescale_rho_min(self.rho_min, self.render_rate_ratio)

    def at_render_ratio(self, ratio: float) -> "FilterConfig":
        return replace(self, render_rate_ratio=ratio)


@dataclass(frozen=True)
class FilteredGaussian2D:
    """A screen-space Gaussian after filtering: effective covariance, the
    determinant-ratio normalization, and the opacity it implies."""

    covariance: torch.Tensor   # (2, 2) pixel^2
    normalization: float       # in (0, 1]; 1 iff nothing was added
    center: torch.Tensor       # (2,) pixels
    depth: float
    primitive_id: int
    effective_opacity: float   # alpha * normalization


def _as_matrix(cov) -> torch.Tensor:
    if isinstance(cov, Covariance2D):
        return cov.matrix
    return torch.as_tensor(cov, dtype=DTYPE)


def _det2(m: torch.Tensor) -> torch.Tensor:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def _det_ratio_norm(det_before: torch.Tensor, det_after: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(det_before.clamp_min(DET_FLOOR) / det_after.clamp_min(DET_FLOOR))


def dilation2d(cov2d, sigma_s: float):
    """Screen-space dilation: covariance + sigma_s * I, opacity untouched.

    Returns (dilated covariance, normalization == 1).
    """
    m = _as_matrix(cov2d)
    eye = torch.eye(2, dtype=m.dtype)
    return m + sigma_s * eye, torch.ones(m.shape[:-2], dtype=m.dtype)


def mip2d(cov2d, sigma_s: float):
    """Screen-space mip filter: dilation plus the determinant-ratio
    normalization that makes sub-pixel Gaussians fade instead of inflating."""
    m = _as_matrix(cov2d)
    eye = torch.eye(2, dtype=m.dtype)
    dilated = m + sigma_s * eye
    return dilated, _det_ratio_norm(_det2(m), _det2(dilated))


def smoothing3d(cov3, nu_hat, sigma_s: float):
    """Object-space smoothing: covariance + (sigma_s / nu^2) * I with the
    3D determinant-ratio normalization; applied before projection."""
    m = torch.as_tensor(cov3, dtype=DTYPE)
    nu = torch.as_tensor(nu_hat, dtype=DTYPE)
    add = sigma_s / (nu * nu)
    eye = torch.eye(3, dtype=m.dtype)
    smoothed = m + add[..., None, None] * eye
    norm = _det_ratio_norm(torch.linalg.det(m), torch.linalg.det(smoothed))
    return smoothed, norm


def rho_adapt(scale_ratio, rho_min: float, rho_max: float) -> torch.Tensor:
    """Clip the per-axis squared scale-change ratio into [rho_min, rho_max]."""
    ratio = torch.as_tensor(scale_ratio, dtype=DTYPE)
    return ratio.clamp(min=rho_min, max=rho_max)


def sigma_adapt(s_t_sq, rho, nu_hat, config: FilterConfig) -> torch.Tensor:
    """Per-axis dilation scale: rho * sigma_s above the visibility threshold,
    the minimal eps * sigma_s below it (the masked regime).

    With ``per_axis=False`` the primitive gets one scalar: the smallest
    per-axis value, masked when any axis falls below the threshold.
    """
    s_t_sq = torch.as_tensor(s_t_sq, dtype=DTYPE)
    rho = torch.as_tensor(rho, dtype=DTYPE)
    nu = torch.as_tensor(nu_hat, dtype=DTYPE)
    threshold = config.rho_thre * config.sigma_s / (nu * nu)
    dilated = rho * config.sigma_s
    masked = torch.full_like(dilated, config.eps * config.sigma_s)
    above = s_t_sq >= threshold[..., None]
    if config.per_axis:
        return torch.where(above, dilated, masked)
    scalar = torch.where(above.all(-1), dilated.amin(-1), masked.amin(-1))
    return scalar[..., None].expand_as(dilated)


def adaptive4d(rotation, s_t, s_base, nu_hat, config: FilterConfig):
    """The scale-adaptive filter at time t.

    Dilation is added per axis in the primitive's own rotated frame (to the
    squared scales before recomposition), so the post-dilation axis ratios
    track the deformed Gaussian's anisotropy. Returns the filtered 3x3
    covariance and its determinant-ratio normalization.
    """
    q = torch.as_tensor(rotation, dtype=DTYPE)
    s_t = torch.as_tensor(s_t, dtype=DTYPE)
    s_base = torch.as_tensor(s_base, dtype=DTYPE)
    nu = torch.as_tensor(nu_hat, dtype=DTYPE)
    s_t_sq = s_t * s_t
    ratio = s_t_sq / (s_base * s_base)
    rho = rho_adapt(ratio, config.effective_rho_min(), config.rho_max)
    sig = sigma_adapt(s_t_sq, rho, nu, config)
    add = sig / (nu * nu)[..., None]
    axes_sq = s_t_sq + add
    R = quat_to_rotmat(q)
    cov = R @ torch.diag_embed(axes_sq) @ R.transpose(-1, -2)
    norm = _det_ratio_norm(s_t_sq.prod(-1), axes_sq.prod(-1))
    return cov, norm


def rescale_rho_min(rho_min: float, ratio: float) -> float:
    """Render-time rescaling of the minimum dilation ratio when the sampling
    rate drops: rho_min * ratio^2, capped at 1. Rate increases (ratio < 1)
    leave rho_min unchanged."""
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    return min(1.0, rho_min * max(ratio, 1.0) ** 2)
