"""Gaussian primitives, pinhole cameras, and covariance projection.

All heavy math runs on batched float64 torch tensors; the dataclasses are
immutable value objects wrapping single primitives for the public API.
Camera convention: world-to-camera rotation rows are (right, down, forward),
depth is the camera-space z coordinate, pixel (ix, iy) has its center at
(ix + 0.5, iy + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

DTYPE = torch.float64

# Primitives closer than this to the camera are culled (world units).
NEAR_PLANE = 0.01
# Frustum margin for the visibility test, in projected standard deviations.
VISIBILITY_SIGMA = 3.0
# Projected covariances with eigenvalues below this (px^2) are bumped up
# so their inverses stay finite.
EIGENVALUE_FLOOR = 1e-12

_UNIT_TOL = 1e-9


def _t(x, shape=None, name="value") -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if shape is not None and tuple(t.shape) != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {tuple(t.shape)}")
    return t


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z)

def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / q.norm(dim=-1, keepdim=True)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = quat_normalize(q).unbind(-1)
    r0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    r1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    r2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([r0, r1, r2], dim=-2)


def quat_slerp(q0: torch.Tensor, q1: torch.Tensor, u: float) -> torch.Tensor:
    """Shortest-path spherical interpolation, batched over leading dims.

    Falls back to normalized lerp when the inputs are nearly parallel; the
    branch is selected with NaN-safe masking so gradients stay finite.
    """
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = (q0 * q1).sum(-1, keepdim=True)
    q1 = torch.where(dot < 0, -q1, q1)
    dot = dot.abs()
    near = dot > 1.0 - 1e-7
    # keep acos away from the singular point in the masked-off branch
    dot_safe = torch.where(near, torch.zeros_like(dot), dot.clamp(max=1.0))
    theta = torch.acos(dot_safe)
    sin_theta = torch.sin(theta)
    sin_safe = torch.where(near, torch.ones_like(sin_theta), sin_theta)
    w0 = torch.where(near, torch.full_like(dot, 1.0 - u), torch.sin((1.0 - u) * theta) / sin_safe)
    w1 = torch.where(near, torch.full_like(dot, u), torch.sin(u * theta) / sin_safe)
    return quat_normalize(w0 * q0 + w1 * q1)


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian: geometry, appearance, and its tracked
    minimum sampling interval (None until tracked)."""

    id: int
    position: torch.Tensor          # (3,) world units
    rotation: torch.Tensor          # (4,) unit quaternion (w, x, y, z)
    scale: torch.Tensor             # (3,) per-axis scale, > 0
    opacity: float
    color: torch.Tensor             # (3,) RGB in [0, 1]
    min_sampling_interval: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", _t(self.position, (3,), "position"))
        object.__setattr__(self, "rotation", _t(self.rotation, (4,), "rotation"))
        object.__setattr__(self, "scale", _t(self.scale, (3,), "scale"))
        object.__setattr__(self, "color", _t(self.color, (3,), "color"))
        if abs(float(self.rotation.norm()) - 1.0) > _UNIT_TOL:
            raise ValueError("rotation quaternion must be unit length")
        if not bool((self.scale > 0).all()):
            raise ValueError("scale components must be strictly positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must lie in [0, 1]")
        if self.min_sampling_interval is not None and self.min_sampling_interval <= 0:
            raise ValueError("min_sampling_interval must be positive")

    @property
    def covariance(self) -> torch.Tensor:
        return build_covariance(self.rotation, self.scale)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a rigid world-to-camera pose."""

    f: float                        # focal length in pixels
    principal_point: torch.Tensor   # (2,) pixels
    width: int
    height: int
    rotation: torch.Tensor          # (3, 3) world-to-camera rotation
    translation: torch.Tensor       # (3,)
    camera_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "principal_point", _t(self.principal_point, (2,), "principal_point"))
        object.__setattr__(self, "rotation", _t(self.rotation, (3, 3), "rotation"))
        object.__setattr__(self, "translation", _t(self.translation, (3,), "translation"))
        if self.f <= 0:
            raise ValueError("focal length must be positive")
        err = self.rotation @ self.rotation.T - torch.eye(3, dtype=DTYPE)
        if float(err.abs().max()) > 1e-9:
            raise ValueError("view rotation must be orthonormal")

    def world_to_camera(self, points: torch.Tensor) -> torch.Tensor:
        return points @ self.rotation.T + self.translation

    def project_points(self, points: torch.Tensor):
        """Pinhole projection. Returns pixel coordinates (..., 2) and depth (...,)."""
        cam = self.world_to_camera(points)
        z = cam[..., 2]
        uv = self.f * cam[..., :2] / z.unsqueeze(-1) + self.principal_point
        return uv, z

    def rescaled(self, factor: float) -> "CameraModel":
        """Jointly scale focal length, principal point, and resolution."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        if w < 1 or h < 1:
            raise ValueError(f"scale factor {factor} yields a sub-1x1 image")
        return replace(
            self,
            f=self.f * factor,
            principal_point=self.principal_point * factor,
            width=w,
            height=h,
        )

    @classmethod
    def look_at(cls, eye, target, f, width, height, up=(0.0, 1.0, 0.0),
                camera_index=0, principal_point=None):
        eye = _t(eye, (3,), "eye")
        target = _t(target, (3,), "target")
        up = _t(up, (3,), "up")
        forward = target - eye
        forward = forward / forward.norm()
        if float(torch.linalg.cross(forward, up).norm()) < 1e-8:
            up = torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE)
        right = torch.linalg.cross(forward, up)
        right = right / right.norm()
        down = torch.linalg.cross(forward, right)
        rot = torch.stack([right, down, forward])
        if principal_point is None:
            principal_point = (width / 2.0, height / 2.0)
        return cls(
            f=float(f),
            principal_point=principal_point,
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ eye,
            camera_index=camera_index,
        )


@dataclass(frozen=True)
class Covariance2D:
    """Projected 2x2 covariance (pixel^2) with the primitive's camera depth."""

    matrix: torch.Tensor   # (2, 2), symmetric, eigenvalues >= EIGENVALUE_FLOOR
    depth: float

    def __post_init__(self):
        object.__setattr__(self, "matrix", _t(self.matrix, (2, 2), "matrix"))


# ---------------------------------------------------------------------------
# operations

def build_covariance(rotation, scale) -> torch.Tensor:
    """Compose a 3x3 SPD covariance from a unit quaternion and positive scales."""
    r = _t(rotation, (4,), "rotation")
    s = _t(scale, (3,), "scale")
    if abs(float(r.norm()) - 1.0) > _UNIT_TOL:
        raise ValueError("rotation quaternion must be unit length")
    if not bool((s > 0).all()):
        raise ValueError("scale components must be strictly positive")
    return build_covariance_batch(r.unsqueeze(0), s.unsqueeze(0))[0]


def build_covariance_batch(rotations: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Batched R diag(s^2) R^T. Quaternions are normalized, not validated."""
    R = quat_to_rotmat(rotations)
    return R @ torch.diag_embed(scales * scales) @ R.transpose(-1, -2)


def eigenvalues_2x2(m: torch.Tensor):
    """Eigenvalues of batched symmetric 2x2 matrices, (low, high)."""
    a = m[..., 0, 0]
    b = m[..., 0, 1]
    c = m[..., 1, 0]
    d = m[..., 1, 1]
    mean = 0.5 * (a + d)
    disc = torch.sqrt((0.5 * (a - d)) ** 2 + b * c)
    return mean - disc, mean + disc


def stabilize_cov2d(m: torch.Tensor) -> torch.Tensor:
    """Bump near-singular projected covariances up to the eigenvalue floor."""
    low, _ = eigenvalues_2x2(m)
    bump = (EIGENVALUE_FLOOR - low).clamp_min(0.0)
    eye = torch.eye(2, dtype=m.dtype)
    return m + bump[..., None, None] * eye


def project_covariance_batch(positions: torch.Tensor, covariances: torch.Tensor,
                             camera: CameraModel):
    """Project world covariances into ray space through the local affine
    approximation of the pinhole map.

    Returns (cov2d (K,2,2), screen centers (K,2), depths (K,)). Depths at or
    below the near plane produce garbage rows; callers must cull by depth.
    """
    cam_pts = camera.world_to_camera(positions)
    x, y = cam_pts[..., 0], cam_pts[..., 1]
    z = cam_pts[..., 2]
    z_safe = torch.where(z > NEAR_PLANE, z, torch.full_like(z, NEAR_PLANE))
    f = camera.f
    centers = f * cam_pts[..., :2] / z_safe.unsqueeze(-1) + camera.principal_point
    zero = torch.zeros_like(z)
    j_top = torch.stack([f / z_safe, zero, -f * x / (z_safe * z_safe)], -1)
    j_bot = torch.stack([zero, f / z_safe, -f * y / (z_safe * z_safe)], -1)
    J = torch.stack([j_top, j_bot], dim=-2)          # (K, 2, 3)
    JW = J @ camera.rotation
    cov2d = JW @ covariances @ JW.transpose(-1, -2)
    cov2d = 0.5 * (cov2d + cov2d.transpose(-1, -2))
    return stabilize_cov2d(cov2d), centers, z


def project_gaussian(g: GaussianPrimitive, camera: CameraModel, track=None, t: float = 0.0):
    """Project one primitive (optionally deformed to time t).

    Returns (Covariance2D, screen center (2,), depth) or None when the
    primitive sits at or behind the near plane.
    """
    position, rotation, scale = _deformed_state(g, track, t)
    cov3 = build_covariance_batch(rotation.unsqueeze(0), scale.unsqueeze(0))
    cov2d, centers, z = project_covariance_batch(position.unsqueeze(0), cov3, camera)
    depth = float(z[0])
    if depth <= NEAR_PLANE:
        return None
    return Covariance2D(matrix=cov2d[0], depth=depth), centers[0], depth


def visibility_mask(positions: torch.Tensor, covariances: torch.Tensor,
                    camera: CameraModel) -> torch.Tensor:
    """Batched visibility: in front of the near plane and the projected center
    inside the image rectangle expanded by VISIBILITY_SIGMA projected sigmas."""
    cov2d, centers, z = project_covariance_batch(positions, covariances, camera)
    _, high = eigenvalues_2x2(cov2d)
    margin = VISIBILITY_SIGMA * torch.sqrt(high.clamp_min(0.0))
    u, v = centers[..., 0], centers[..., 1]
    inside = (
        (u >= -margin)
        & (u <= camera.width + margin)
        & (v >= -margin)
        & (v <= camera.height + margin)
    )
    return (z > NEAR_PLANE) & inside


def visibility(g: GaussianPrimitive, camera: CameraModel, track=None, t: float = 0.0) -> bool:
    position, rotation, scale = _deformed_state(g, track, t)
    cov3 = build_covariance_batch(rotation.unsqueeze(0), scale.unsqueeze(0))
    return bool(visibility_mask(position.unsqueeze(0), cov3, camera)[0])


def _deformed_state(g: GaussianPrimitive, track, t: float):
    if track is None:
        return g.position, g.rotation, g.scale
    from .deformation import deform

    return deform(g, track, t)
