"""Image-quality metrics for the evaluation tables: PSNR, windowed SSIM,
high-band spectral energy (artifact proxy), and the coverage-inflation ratio
between two filter variants.

``ssim_value`` is differentiable and doubles as the structural term of the
training color loss.
"""

from __future__ import annotations

import math

import torch

from .geometry import DTYPE

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

CSV_COLUMNS = ("scene", "filter", "scale_factor", "psnr", "ssim", "highband", "coverage")


def _as_image(x) -> torch.Tensor:
    from .rasterizer import RenderedImage

    if isinstance(x, RenderedImage):
        x = x.image
    t = torch.as_tensor(x, dtype=DTYPE)
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValueError("expected an (H, W, 3) image")
    return t


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical."""
    a, b = _as_image(a), _as_image(b)
    _check_same_shape(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(window: int, sigma: float) -> torch.Tensor:
    half = (window - 1) / 2.0
    coords = torch.arange(window, dtype=DTYPE) - half
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_value(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    """Mean windowed SSIM over pixels and channels (differentiable).

    Local statistics use a Gaussian window with replicate padding; the
    half-window border is cropped before averaging, matching the standard
    reference implementation.
    """
    a, b = _as_image(a), _as_image(b)
    _check_same_shape(a, b)
    h, w, _ = a.shape
    if min(h, w) < window:
        raise ValueError(f"images smaller than the {window}x{window} SSIM window")
    kernel = _gaussian_kernel(window, sigma)[None, None].expand(3, 1, window, window)
    pad = window // 2

    def stats(img):
        x = img.permute(2, 0, 1)[None]                         # (1, 3, H, W)
        x = torch.nn.functional.pad(x, (pad, pad, pad, pad), mode="replicate")
        return torch.nn.functional.conv2d(x, kernel, groups=3)

    mu_a, mu_b = stats(a), stats(b)
    mu_aa, mu_bb, mu_ab = stats(a * a), stats(b * b), stats(a * b)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    ssim_map = num / den
    ssim_map = ssim_map[..., pad:ssim_map.shape[-2] - pad, pad:ssim_map.shape[-1] - pad]
    return ssim_map.mean()


def ssim(a, b) -> float:
    return float(ssim_value(a, b))


def highband_energy(img, band_fraction: float) -> float:
    """Fraction of spectral energy at radial frequencies above
    (1 - band_fraction) * Nyquist, computed on the channel-mean image."""
    if not 0.0 < band_fraction < 1.0:
        raise ValueError("band_fraction must lie in (0, 1)")
    gray = _as_image(img).mean(dim=-1)
    h, w = gray.shape
    spectrum = torch.fft.fft2(gray)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    fy = torch.fft.fftfreq(h, dtype=DTYPE)
    fx = torch.fft.fftfreq(w, dtype=DTYPE)
    radius = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    mask = radius > (1.0 - band_fraction) * 0.5
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    return float(power[mask].sum()) / total


def coverage_inflation(scene, camera, t, filter_a, filter_b,
                       background=(0.0, 0.0, 0.0), threshold: float = 0.01) -> float:
    """Ratio of covered pixel counts (accumulated alpha above threshold)
    between renders of the same scene under two filters. NaN when the
    second filter covers nothing."""
    from .rasterizer import RenderJob, render

    counts = []
    with torch.no_grad():
        for cfg in (filter_a, filter_b):
            job = RenderJob(scene=scene, camera=camera, time=t,
                            filter_config=cfg, background=background)
            result = render(job)
            accumulated = 1.0 - result.image.transmittance
            counts.append(int((accumulated > threshold).sum()))
    if counts[1] == 0:
        return math.nan
    return counts[0] / counts[1]
