"""Procedural synthetic dynamic scenes, camera rigs, and alias-free
ground-truth datasets.

Scenes live in the [-1, 1]^3 bounding box with 8 keyframes by default.
Ground-truth targets are rendered unfiltered at a supersampled resolution
and box-downsampled, giving an alias-free reference at any scale.

Dataset directory layout: one ``manifest.txt`` plus a PNG (for viewing) and
a float32 binary dump (the training target) per frame. Manifest format:

    splat4d-dataset v1
    resolution <width> <height>
    background r g b
    camera <index> <f> <cx> <cy> <r00 .. r22> <tx ty tz>
    time <index> <value>
    frame <camera_index> <time_index> <png> <bin>
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import torch

from .deformation import DeformationField
from .geometry import DTYPE, CameraModel
from .rasterizer import (
    RenderedImage,
    RenderJob,
    read_float_dump,
    render,
    write_float_dump,
    write_png,
)
from .filters import FilterConfig
from .scene import GaussianScene, atomic_write_text

SCENE_PROFILES = ("orbiting_blobs", "pulsing_grid", "thin_structures")
RIG_PROFILES = ("monocular_arc", "multiview_ring")

DEFAULT_TIMESTEPS = 8
MANIFEST_HEADER = "splat4d-dataset v1"


@dataclass
class CameraRig:
    cameras: list[CameraModel]
    pairing: str  # "zip": camera i observes timestep i only; "cross": all pairs


@dataclass
class Frame:
    camera_index: int
    time_index: int
    image: torch.Tensor  # (H, W, 3) linear RGB


@dataclass
class Dataset:
    cameras: list[CameraModel]
    times: list[float]
    frames: list[Frame]
    background: tuple = (0.0, 0.0, 0.0)

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height


# ---------------------------------------------------------------------------
# scenes

def _keyframe_times(count: int = DEFAULT_TIMESTEPS) -> torch.Tensor:
    return torch.linspace(0.0, 1.0, count, dtype=DTYPE)


def _random_colors(count: int, gen: torch.Generator) -> torch.Tensor:
    return 0.25 + 0.75 * torch.rand(count, 3, generator=gen, dtype=DTYPE)


def _random_unit_quats(count: int, gen: torch.Generator) -> torch.Tensor:
    q = torch.randn(count, 4, generator=gen, dtype=DTYPE)
    return q / q.norm(dim=-1, keepdim=True)


def make_scene(profile: str, seed: int, primitive_count: int,
               timesteps: int = DEFAULT_TIMESTEPS) -> GaussianScene:
    """Deterministic synthetic scene with its ground-truth deformation."""
    if primitive_count < 1:
        raise ValueError("primitive_count must be at least 1")
    if profile not in SCENE_PROFILES:
        raise ValueError(f"unknown scene profile {profile!r}")
    gen = torch.Generator().manual_seed(seed)
    times = _keyframe_times(timesteps)
    builder = {
        "orbiting_blobs": _orbiting_blobs,
        "pulsing_grid": _pulsing_grid,
        "thin_structures": _thin_structures,
    }[profile]
    return builder(primitive_count, gen, times)


def _orbiting_blobs(count, gen, times):
    """Soft isotropic blobs on rigid circular translation tracks."""
    angles = torch.rand(count, generator=gen, dtype=DTYPE) * 2 * math.pi
    radii = 0.35 + 0.35 * torch.rand(count, generator=gen, dtype=DTYPE)
    heights = 0.5 * (torch.rand(count, generator=gen, dtype=DTYPE) - 0.5)
    positions = torch.stack(
        [radii * torch.cos(angles), heights, radii * torch.sin(angles)], dim=-1
    )
    scales = (0.05 + 0.06 * torch.rand(count, 1, generator=gen, dtype=DTYPE)).expand(count, 3).clone()
    rotations = torch.zeros(count, 4, dtype=DTYPE)
    rotations[:, 0] = 1.0
    opacities = 0.6 + 0.35 * torch.rand(count, generator=gen, dtype=DTYPE)

    # quarter orbit about the y axis over the clip
    n = times.numel()
    dp = torch.zeros(count, n, 3, dtype=DTYPE)
    for i, t in enumerate(times):
        theta = 0.5 * math.pi * float(t)
        c, s = math.cos(theta), math.sin(theta)
        x, y, z = positions.unbind(-1)
        rotated = torch.stack([c * x + s * z, y, -s * x + c * z], dim=-1)
        dp[:, i] = rotated - positions
    field = DeformationField.zero(count, times)
    field.position_deltas = dp
    return GaussianScene(positions, rotations, scales, opacities,
                         _random_colors(count, gen), deformation=field)


def _pulsing_grid(count, gen, times):
    """Planar grid whose scales pulse so the squared scale ratio sweeps
    [0.04, 25], guaranteeing both dilation-ratio clip bounds activate."""
    side = math.ceil(math.sqrt(count))
    coords = torch.linspace(-0.7, 0.7, side, dtype=DTYPE)
    grid = torch.cartesian_prod(coords, coords)[:count]
    positions = torch.stack(
        [grid[:, 0], grid[:, 1], torch.zeros(count, dtype=DTYPE)], dim=-1
    )
    scales = torch.full((count, 3), 0.02, dtype=DTYPE)
    rotations = torch.zeros(count, 4, dtype=DTYPE)
    rotations[:, 0] = 1.0
    opacities = 0.7 + 0.25 * torch.rand(count, generator=gen, dtype=DTYPE)

    # half-period cosine sweep: ratio s_t/s runs exactly from 0.2 to 5
    n = times.numel()
    ds = torch.zeros(count, n, 3, dtype=DTYPE)
    for i in range(n):
        ratio = 2.6 - 2.4 * math.cos(math.pi * i / max(n - 1, 1))
        ds[:, i] = scales * (ratio - 1.0)
    field = DeformationField.zero(count, times)
    field.scale_deltas = ds
    return GaussianScene(positions, rotations, scales, opacities,
                         _random_colors(count, gen), deformation=field)


def _thin_structures(count, gen, times):
    """Highly anisotropic rods (axis ratio >= 10) with a gentle drift."""
    positions = 1.2 * (torch.rand(count, 3, generator=gen, dtype=DTYPE) - 0.5)
    scales = torch.empty(count, 3, dtype=DTYPE)
    scales[:, 0] = 0.22 + 0.1 * torch.rand(count, generator=gen, dtype=DTYPE)
    scales[:, 1] = 0.010 + 0.008 * torch.rand(count, generator=gen, dtype=DTYPE)
    scales[:, 2] = scales[:, 1]
    rotations = _random_unit_quats(count, gen)
    opacities = 0.7 + 0.25 * torch.rand(count, generator=gen, dtype=DTYPE)

    n = times.numel()
    phase = torch.rand(count, 3, generator=gen, dtype=DTYPE) * 2 * math.pi
    dp = torch.zeros(count, n, 3, dtype=DTYPE)
    for i, t in enumerate(times):
        dp[:, i] = 0.08 * torch.sin(2 * math.pi * float(t) + phase)
    dp -= dp[:, :1].clone()
    field = DeformationField.zero(count, times)
    field.position_deltas = dp
    return GaussianScene(positions, rotations, scales, opacities,
                         _random_colors(count, gen), deformation=field)


# ---------------------------------------------------------------------------
# rigs

def make_rig(profile: str, camera_count: int, f: float, resolution,
             radius: float = 4.0, elevation_deg: float = 20.0) -> CameraRig:
    """Camera rig aimed at the scene centroid (the origin).

    ``monocular_arc`` sweeps one camera per timestep along an azimuth arc
    (the teleporting-monocular convention); ``multiview_ring`` is a fixed
    ring observing every timestep.
    """
    if profile not in RIG_PROFILES:
        raise ValueError(f"unknown rig profile {profile!r}")
    if camera_count < 1:
        raise ValueError("camera_count must be at least 1")
    width, height = resolution
    elevation = math.radians(elevation_deg)
    if profile == "monocular_arc":
        azimuths = [math.radians(-60.0 + 120.0 * i / max(camera_count - 1, 1))
                    for i in range(camera_count)]
        pairing = "zip"
    else:
        azimuths = [2 * math.pi * i / camera_count for i in range(camera_count)]
        pairing = "cross"
    cameras = []
    for i, az in enumerate(azimuths):
        eye = (
            radius * math.cos(elevation) * math.sin(az),
            radius * math.sin(elevation),
            -radius * math.cos(elevation) * math.cos(az),
        )
        cameras.append(CameraModel.look_at(
            eye=eye, target=(0.0, 0.0, 0.0), f=f, width=width, height=height,
            camera_index=i,
        ))
    return CameraRig(cameras=cameras, pairing=pairing)


# ---------------------------------------------------------------------------
# ground truth

def box_downsample(image: torch.Tensor, factor: int) -> torch.Tensor:
    h, w, c = image.shape
    return image.reshape(h // factor, factor, w // factor, factor, c).mean(dim=(1, 3))


def render_reference(scene: GaussianScene, camera: CameraModel, t: float,
                     supersample: int, background=(0.0, 0.0, 0.0)) -> RenderedImage:
    """Unfiltered render at supersample x resolution, box-downsampled."""
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    cam = camera.rescaled(supersample) if supersample > 1 else camera
    job = RenderJob(scene=scene, camera=cam, time=t,
                    filter_config=FilterConfig(kind="none"), background=background)
    with torch.no_grad():
        result = render(job)
    if supersample == 1:
        return result.image
    return RenderedImage(
        image=box_downsample(result.image.image, supersample),
        transmittance=box_downsample(
            result.image.transmittance.unsqueeze(-1), supersample
        ).squeeze(-1),
    )


def render_ground_truth(scene: GaussianScene, rig: CameraRig, timesteps,
                        supersample: int = 4,
                        background=(0.0, 0.0, 0.0)) -> Dataset:
    """Alias-free target dataset: one frame per (camera, time) pair of the
    rig's pairing."""
    times = [float(t) for t in timesteps]
    if rig.pairing == "zip":
        if len(rig.cameras) != len(times):
            raise ValueError("monocular rig needs one camera per timestep")
        pairs = [(i, i) for i in range(len(times))]
    else:
        pairs = [(ci, ti) for ci in range(len(rig.cameras)) for ti in range(len(times))]
    frames = []
    for ci, ti in pairs:
        ref = render_reference(scene, rig.cameras[ci], times[ti], supersample, background)
        frames.append(Frame(camera_index=ci, time_index=ti, image=ref.image))
    return Dataset(cameras=list(rig.cameras), times=times, frames=frames,
                   background=tuple(background))


# ---------------------------------------------------------------------------
# dataset IO

def save_dataset(dataset: Dataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = [MANIFEST_HEADER,
             f"resolution {dataset.width} {dataset.height}",
             "background " + " ".join(repr(float(v)) for v in dataset.background)]
    for cam in dataset.cameras:
        nums = [cam.f, *cam.principal_point.tolist(),
                *cam.rotation.reshape(-1).tolist(), *cam.translation.tolist()]
        lines.append(f"camera {cam.camera_index} " + " ".join(repr(float(v)) for v in nums))
    for i, t in enumerate(dataset.times):
        lines.append(f"time {i} {t!r}")
    for n, frame in enumerate(dataset.frames):
        png = f"frame_{n:04d}.png"
        bin_ = f"frame_{n:04d}.bin"
        write_png(frame.image, os.path.join(directory, png))
        write_float_dump(frame.image, os.path.join(directory, bin_))
        lines.append(f"frame {frame.camera_index} {frame.time_index} {png} {bin_}")
    atomic_write_text(os.path.join(directory, "manifest.txt"), "\n".join(lines) + "\n")


def load_dataset(directory: str) -> Dataset:
    path = os.path.join(directory, "manifest.txt")
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ValueError(f"{path}: not a {MANIFEST_HEADER} manifest")
    width = height = None
    background = (0.0, 0.0, 0.0)
    cameras: list[CameraModel] = []
    times: dict[int, float] = {}
    frames: list[Frame] = []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "resolution":
            width, height = int(parts[1]), int(parts[2])
        elif parts[0] == "background":
            background = tuple(float(v) for v in parts[1:4])
        elif parts[0] == "camera":
            vals = [float(v) for v in parts[2:]]
            cameras.append(CameraModel(
                f=vals[0],
                principal_point=torch.tensor(vals[1:3], dtype=DTYPE),
                width=width, height=height,
                rotation=torch.tensor(vals[3:12], dtype=DTYPE).reshape(3, 3),
                translation=torch.tensor(vals[12:15], dtype=DTYPE),
                camera_index=int(parts[1]),
            ))
        elif parts[0] == "time":
            times[int(parts[1])] = float(parts[2])
        elif parts[0] == "frame":
            image = read_float_dump(os.path.join(directory, parts[4]))
            frames.append(Frame(camera_index=int(parts[1]),
                                time_index=int(parts[2]), image=image))
        else:
            raise ValueError(f"{path}: unexpected line '{line}'")
    time_list = [times[i] for i in sorted(times)]
    return Dataset(cameras=cameras, times=time_list, frames=frames, background=background)
