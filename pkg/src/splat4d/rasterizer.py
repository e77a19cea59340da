"""Deterministic CPU rasterizer: deform, filter, project, depth-sort, and
alpha-blend front to back.

The image is processed in bands of tile rows; within a band every
(pixel, primitive) pair is evaluated in one vectorized pass, with a per-tile
inclusion mask built from conservative 3-sigma screen bounds. Blending order
is fully determined by the (depth, id) sort, so renders are bit-identical
regardless of band or tile layout. The forward pass is differentiable with
respect to every scene parameter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import torch

from .deformation import apply_deltas
from .filters import FilterConfig, adaptive4d, dilation2d, mip2d, smoothing3d
from .frequency import FrequencyTracker
from .geometry import (
    DTYPE,
    NEAR_PLANE,
    VISIBILITY_SIGMA,
    CameraModel,
    build_covariance_batch,
    eigenvalues_2x2,
    project_covariance_batch,
    stabilize_cov2d,
)
from .scene import GaussianScene, atomic_write_text

# Standard splatting conventions: per-splat alpha contributions are clamped
# at 0.99 and contributions below 1/255 are skipped.
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
TERMINATION_THRESHOLD = 1e-4
# Tile-overlap bound for blending. Contributions fall below ALPHA_SKIP
# beyond sqrt(2 ln(255 * 0.99)) ~ 3.33 sigma, so 3.5 sigma loses nothing.
BLEND_SIGMA = 3.5


@dataclass
class RenderedImage:
    """Linear RGB float image plus the per-pixel residual transmittance."""

    image: torch.Tensor          # (H, W, 3)
    transmittance: torch.Tensor  # (H, W) in [0, 1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class RenderJob:
    scene: GaussianScene
    camera: CameraModel
    time: float = 0.0
    filter_config: FilterConfig = field(default_factory=lambda: FilterConfig(kind="none"))
    background: tuple = (0.0, 0.0, 0.0)
    tile_size: int = 16
    early_termination: bool = True


@dataclass
class RenderResult:
    image: RenderedImage
    primitive_ids: torch.Tensor  # (M,) ids of non-culled primitives
    depths: torch.Tensor         # (M,) their camera-space center depths


def _validate_finite(scene: GaussianScene) -> None:
    for name, tensor in scene.parameters().items():
        bad = ~torch.isfinite(tensor.detach())
        if bool(bad.any()):
            k = int(bad.reshape(bad.shape[0], -1).any(dim=1).nonzero()[0])
            raise ValueError(f"non-finite value in {name} of primitive {int(scene.ids[k])}")


def _filtered_world_covariance(scene: GaussianScene, r_t, s_t, cfg: FilterConfig,
                               nu_hat: torch.Tensor):
    """3D filter stage. Returns (cov3 (K,3,3), norm (K,))."""
    if cfg.kind == "smoothing3d":
        cov3 = build_covariance_batch(r_t, s_t)
        return smoothing3d(cov3, nu_hat, cfg.sigma_s)
    if cfg.kind == "adaptive4d":
        return adaptive4d(r_t, s_t, scene.scales.clamp_min(1e-12), nu_hat, cfg)
    cov3 = build_covariance_batch(r_t, s_t)
    return cov3, torch.ones(cov3.shape[0], dtype=DTYPE)


def _filtered_screen_covariance(cov2d: torch.Tensor, cfg: FilterConfig):
    """2D filter stage. Returns (cov2d (K,2,2), norm (K,))."""
    if cfg.kind == "dilation2d":
        return dilation2d(cov2d, cfg.sigma_s)
    if cfg.kind == "mip2d":
        return mip2d(cov2d, cfg.sigma_s)
    return cov2d, torch.ones(cov2d.shape[0], dtype=DTYPE)


def _frequencies(scene: GaussianScene, cfg: FilterConfig) -> torch.Tensor:
    if cfg.kind not in ("smoothing3d", "adaptive4d"):
        return torch.ones(scene.num_primitives, dtype=DTYPE)
    tracker = FrequencyTracker(intervals=scene.sampling_intervals)
    return tracker.max_frequencies()


def render(job: RenderJob) -> RenderResult:
    """Render one view. Returns the image and the (id, depth) list of every
    non-culled primitive, which feeds the frequency tracker during training."""
    scene, camera, cfg = job.scene, job.camera, job.filter_config
    _validate_finite(scene)
    height, width = camera.height, camera.width
    background = torch.as_tensor(job.background, dtype=DTYPE)

    if scene.num_primitives == 0:
        image = background.expand(height, width, 3).clone()
        return RenderResult(
            RenderedImage(image, torch.ones(height, width, dtype=DTYPE)),
            torch.zeros(0, dtype=torch.long),
            torch.zeros(0, dtype=DTYPE),
        )

    dp, dr, ds = scene.deformation.evaluate(job.time)
    p_t, r_t, s_t = apply_deltas(scene.positions, scene.rotations, scene.scales, dp, dr, ds)

    nu_hat = _frequencies(scene, cfg).detach()
    cov3, norm3 = _filtered_world_covariance(scene, r_t, s_t, cfg, nu_hat)
    cov2d, centers, depths = project_covariance_batch(p_t, cov3, camera)
    cov2d, norm2 = _filtered_screen_covariance(cov2d, cfg)
    cov2d = stabilize_cov2d(cov2d)

    # visibility cull: near plane + 3-sigma expanded frustum on the filtered splat
    _, eig_high = eigenvalues_2x2(cov2d)
    radius = VISIBILITY_SIGMA * torch.sqrt(eig_high.clamp_min(0.0)).detach()
    u, v = centers[:, 0].detach(), centers[:, 1].detach()
    visible = (
        (depths.detach() > NEAR_PLANE)
        & (u >= -radius) & (u <= width + radius)
        & (v >= -radius) & (v <= height + radius)
    )
    order = _sort_visible(depths.detach(), scene.ids, visible)

    ids_out = scene.ids[order]
    depths_out = depths.detach()[order]
    if order.numel() == 0:
        image = background.expand(height, width, 3).clone()
        return RenderResult(
            RenderedImage(image, torch.ones(height, width, dtype=DTYPE)),
            ids_out, depths_out,
        )

    centers_v = centers[order]
    cov_v = cov2d[order]
    coef_v = (scene.opacities[order] * norm3[order] * norm2[order])
    colors_v = scene.colors[order]
    radius_v = (BLEND_SIGMA / VISIBILITY_SIGMA) * radius[order]

    inv = _invert_2x2(cov_v)
    image, transmittance = _blend_bands(
        height, width, job.tile_size, centers_v, inv, coef_v, colors_v, radius_v,
        background, job.early_termination,
    )
    return RenderResult(RenderedImage(image, transmittance), ids_out, depths_out)


def _sort_visible(depths: torch.Tensor, ids: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    idx = visible.nonzero(as_tuple=False).reshape(-1)
    if idx.numel() == 0:
        return idx
    # lexicographic (depth, id): stable sort by id first, then by depth
    by_id = idx[torch.argsort(ids[idx], stable=True)]
    return by_id[torch.argsort(depths[by_id], stable=True)]


def _invert_2x2(m: torch.Tensor) -> torch.Tensor:
    a, b = m[..., 0, 0], m[..., 0, 1]
    c, d = m[..., 1, 0], m[..., 1, 1]
    det = (a * d - b * c).clamp_min(1e-30)
    inv = torch.stack(
        [torch.stack([d, -b], -1), torch.stack([-c, a], -1)], dim=-2
    ) / det[..., None, None]
    return inv


def _blend_bands(height, width, tile_size, centers, inv_cov, coef, colors, radius,
                 background, early_termination):
    n_tiles_x = (width + tile_size - 1) // tile_size
    cols = (torch.arange(width, dtype=DTYPE) + 0.5)
    tile_x_of_col = torch.arange(width) // tile_size

    # conservative screen-space bounds per primitive
    x0 = centers[:, 0].detach() - radius
    x1 = centers[:, 0].detach() + radius
    y0 = centers[:, 1].detach() - radius
    y1 = centers[:, 1].detach() + radius

    tx_lo = torch.arange(n_tiles_x, dtype=DTYPE) * tile_size
    tx_hi = tx_lo + tile_size
    # (n_tiles_x, K): primitive bbox overlaps the tile column
    col_overlap = (x0[None, :] <= tx_hi[:, None]) & (x1[None, :] >= tx_lo[:, None])

    rows_image = []
    trans_image = []
    for band_start in range(0, height, tile_size):
        band_end = min(band_start + tile_size, height)
        band_h = band_end - band_start
        row_overlap = (y0 <= band_end) & (y1 >= band_start)  # (K,)
        mask_tiles = col_overlap & row_overlap[None, :]      # (n_tiles_x, K)
        if not bool(mask_tiles.any()):
            rows_image.append(background.expand(band_h, width, 3))
            trans_image.append(torch.ones(band_h, width, dtype=DTYPE))
            continue
        rows = (torch.arange(band_start, band_end, dtype=DTYPE) + 0.5)
        py = rows[:, None].expand(band_h, width).reshape(-1)
        px = cols[None, :].expand(band_h, width).reshape(-1)
        pixel_mask = mask_tiles[tile_x_of_col, :][None, :, :].expand(band_h, -1, -1)
        pixel_mask = pixel_mask.reshape(band_h * width, -1).to(DTYPE)

        dx = px[:, None] - centers[None, :, 0]
        dy = py[:, None] - centers[None, :, 1]
        quad = (
            dx * dx * inv_cov[None, :, 0, 0]
            + 2.0 * dx * dy * inv_cov[None, :, 0, 1]
            + dy * dy * inv_cov[None, :, 1, 1]
        )
        g = torch.exp(-0.5 * quad)
        a = (coef[None, :] * g).clamp_max(ALPHA_CLAMP)
        a = a * (a.detach() >= ALPHA_SKIP) * pixel_mask

        if early_termination:
            trans_excl = _exclusive_cumprod(1.0 - a)
            a = a * (trans_excl.detach() >= TERMINATION_THRESHOLD)
        trans_excl = _exclusive_cumprod(1.0 - a)
        weights = a * trans_excl
        band_rgb = weights @ colors
        trans_final = trans_excl[:, -1] * (1.0 - a[:, -1])
        band_rgb = band_rgb + trans_final[:, None] * background
        rows_image.append(band_rgb.reshape(band_h, width, 3))
        trans_image.append(trans_final.reshape(band_h, width))

    return torch.cat(rows_image, dim=0), torch.cat(trans_image, dim=0)


def _exclusive_cumprod(x: torch.Tensor) -> torch.Tensor:
    cp = torch.cumprod(x, dim=-1)
    ones = torch.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    return torch.cat([ones, cp[..., :-1]], dim=-1)


def render_multiscale(scene: GaussianScene, camera: CameraModel, t: float,
                      scale_factors, filter_config: FilterConfig,
                      background=(0.0, 0.0, 0.0), tile_size: int = 16):
    """Render the same view at several sampling rates: focal length and
    resolution are scaled jointly, and the minimum dilation ratio is rescaled
    for factors below 1 (zoom-out)."""
    images = []
    for factor in scale_factors:
        if factor <= 0:
            raise ValueError("scale factors must be positive")
        cam = camera.rescaled(factor)
        cfg = filter_config.at_render_ratio(1.0 / factor)
        job = RenderJob(scene=scene, camera=cam, time=t, filter_config=cfg,
                        background=background, tile_size=tile_size)
        images.append(render(job).image)
    return images


# ---------------------------------------------------------------------------
# image output

def srgb_encode(linear: torch.Tensor) -> torch.Tensor:
    c = linear.clamp(0.0, 1.0)
    return torch.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def srgb_decode(encoded: torch.Tensor) -> torch.Tensor:
    c = encoded.clamp(0.0, 1.0)
    return torch.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def write_png(image: RenderedImage | torch.Tensor, path: str) -> None:
    """8-bit PNG with the sRGB transfer applied at write time."""
    from PIL import Image

    tensor = image.image if isinstance(image, RenderedImage) else image
    data = (srgb_encode(tensor) * 255.0).round().clamp(0, 255).to(torch.uint8)
    Image.fromarray(data.numpy(), mode="RGB").save(path)


def read_png(path: str) -> torch.Tensor:
    """Inverse of :func:`write_png`: linear float image from an sRGB PNG."""
    from PIL import Image
    import numpy as np

    data = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(torch.from_numpy(data))


def write_float_dump(image: RenderedImage | torch.Tensor, path: str) -> None:
    """Flat binary dump: header (width, height, channels) as little-endian
    uint32, then row-major little-endian float32 samples."""
    tensor = image.image if isinstance(image, RenderedImage) else image
    h, w, c = tensor.shape
    payload = struct.pack("<III", w, h, c)
    payload += tensor.detach().to(torch.float32).numpy().astype("<f4").tobytes()
    import os, tempfile

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_float_dump(path: str) -> torch.Tensor:
    import numpy as np

    with open(path, "rb") as fh:
        w, h, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(h, w, c)
    return torch.from_numpy(data.astype(np.float64))
