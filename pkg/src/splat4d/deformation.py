"""Keyframe-table deformation of Gaussian primitives.

Each primitive carries time-indexed deltas (position, rotation increment,
scale offset) that are linearly interpolated between keyframes; rotation
increments compose multiplicatively on the left of the base quaternion and
are interpolated spherically. Queries outside the keyframe range clamp to
the endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import DTYPE, GaussianPrimitive, _t, quat_multiply, quat_normalize, quat_slerp

# Deformed scales are clamped to this floor (world units); the gradient is
# zero in the clamped regime.
SCALE_FLOOR = 1e-4

_IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class DeformationTrack:
    """Keyframed deltas for one primitive."""

    times: torch.Tensor            # (T,) strictly increasing, in [0, 1]
    position_deltas: torch.Tensor  # (T, 3)
    rotation_deltas: torch.Tensor  # (T, 4) quaternion increments
    scale_deltas: torch.Tensor     # (T, 3) additive in scale space

    def __post_init__(self):
        times = torch.as_tensor(self.times, dtype=DTYPE).reshape(-1)
        n = times.numel()
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "position_deltas", _t(self.position_deltas, (n, 3), "position_deltas"))
        object.__setattr__(self, "rotation_deltas", _t(self.rotation_deltas, (n, 4), "rotation_deltas"))
        object.__setattr__(self, "scale_deltas", _t(self.scale_deltas, (n, 3), "scale_deltas"))
        if n:
            if float(times.min()) < 0.0 or float(times.max()) > 1.0:
                raise ValueError("keyframe times must lie in [0, 1]")
            if n > 1 and not bool((times[1:] > times[:-1]).all()):
                raise ValueError("keyframe times must be strictly increasing")

    @classmethod
    def empty(cls) -> "DeformationTrack":
        z = torch.zeros(0, dtype=DTYPE)
        return cls(z, z.reshape(0, 3), z.reshape(0, 4), z.reshape(0, 3))

    def __len__(self) -> int:
        return self.times.numel()


def _bracket(times: torch.Tensor, t: float):
    """Indices (i0, i1) and blend weight u for query time t, endpoint-clamped."""
    n = times.numel()
    if t <= float(times[0]):
        return 0, 0, 0.0
    if t >= float(times[-1]):
        return n - 1, n - 1, 0.0
    i1 = int(torch.searchsorted(times, torch.tensor(t, dtype=DTYPE), right=True))
    i0 = i1 - 1
    t0, t1 = float(times[i0]), float(times[i1])
    return i0, i1, (t - t0) / (t1 - t0)


def interpolate_deltas(times: torch.Tensor, position_deltas: torch.Tensor,
                       rotation_deltas: torch.Tensor, scale_deltas: torch.Tensor,
                       t: float):
    """Interpolate keyframed deltas at time t.

    Delta tensors may carry leading batch dims: (..., T, 3) / (..., T, 4).
    An empty table yields the identity deformation.
    """
    if times.numel() == 0:
        shape = position_deltas.shape[:-2]
        dp = torch.zeros(shape + (3,), dtype=DTYPE)
        dr = torch.zeros(shape + (4,), dtype=DTYPE)
        dr[..., 0] = 1.0
        ds = torch.zeros(shape + (3,), dtype=DTYPE)
        return dp, dr, ds
    i0, i1, u = _bracket(times, t)
    if i0 == i1:
        dp = position_deltas[..., i0, :]
        dr = quat_normalize(rotation_deltas[..., i0, :])
        ds = scale_deltas[..., i0, :]
        return dp, dr, ds
    dp = (1.0 - u) * position_deltas[..., i0, :] + u * position_deltas[..., i1, :]
    dr = quat_slerp(rotation_deltas[..., i0, :], rotation_deltas[..., i1, :], u)
    ds = (1.0 - u) * scale_deltas[..., i0, :] + u * scale_deltas[..., i1, :]
    return dp, dr, ds


def apply_deltas(positions, rotations, scales, dp, dr, ds):
    """base + delta: translation, left quaternion composition, clamped scales."""
    p_t = positions + dp
    r_t = quat_normalize(quat_multiply(dr, rotations))
    s_t = (scales + ds).clamp_min(SCALE_FLOOR)
    return p_t, r_t, s_t


def deform(g: GaussianPrimitive, track: DeformationTrack | None, t: float):
    """Deformed state (position, rotation, scale) of one primitive at time t.

    Opacity and color are time-invariant. A missing or empty track is the
    identity deformation.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("time must lie in [0, 1]")
    if track is None or len(track) == 0:
        return g.position, g.rotation, g.scale.clamp_min(SCALE_FLOOR)
    dp, dr, ds = interpolate_deltas(
        track.times, track.position_deltas, track.rotation_deltas, track.scale_deltas, t
    )
    return apply_deltas(g.position, g.rotation, g.scale, dp, dr, ds)


def scale_ratio(g: GaussianPrimitive, track: DeformationTrack | None, t: float) -> torch.Tensor:
    """Per-axis squared scale change (s + ds(t))^2 / s^2."""
    _, _, s_t = deform(g, track, t)
    return (s_t * s_t) / (g.scale * g.scale)


class DeformationField:
    """Batched deformation tables for a whole scene (shared keyframe times)."""

    def __init__(self, times, position_deltas, rotation_deltas, scale_deltas):
        self.times = torch.as_tensor(times, dtype=DTYPE).reshape(-1)
        n = self.times.numel()
        self.position_deltas = torch.as_tensor(position_deltas, dtype=DTYPE)
        self.rotation_deltas = torch.as_tensor(rotation_deltas, dtype=DTYPE)
        self.scale_deltas = torch.as_tensor(scale_deltas, dtype=DTYPE)
        k = self.position_deltas.shape[0]
        if self.position_deltas.shape != (k, n, 3):
            raise ValueError("position_deltas must have shape (K, T, 3)")
        if self.rotation_deltas.shape != (k, n, 4):
            raise ValueError("rotation_deltas must have shape (K, T, 4)")
        if self.scale_deltas.shape != (k, n, 3):
            raise ValueError("scale_deltas must have shape (K, T, 3)")

    @classmethod
    def zero(cls, num_primitives: int, times) -> "DeformationField":
        times = torch.as_tensor(times, dtype=DTYPE).reshape(-1)
        n = times.numel()
        dr = torch.zeros(num_primitives, n, 4, dtype=DTYPE)
        dr[..., 0] = 1.0
        return cls(
            times,
            torch.zeros(num_primitives, n, 3, dtype=DTYPE),
            dr,
            torch.zeros(num_primitives, n, 3, dtype=DTYPE),
        )

    @property
    def num_primitives(self) -> int:
        return self.position_deltas.shape[0]

    @property
    def num_keyframes(self) -> int:
        return self.times.numel()

    def evaluate(self, t: float):
        """Deltas (dp (K,3), dr (K,4), ds (K,3)) at time t."""
        return interpolate_deltas(
            self.times, self.position_deltas, self.rotation_deltas, self.scale_deltas, t
        )

    def track(self, k: int) -> DeformationTrack:
        return DeformationTrack(
            self.times,
            self.position_deltas[k].detach(),
            self.rotation_deltas[k].detach(),
            self.scale_deltas[k].detach(),
        )

    def clone(self) -> "DeformationField":
        return DeformationField(
            self.times.clone(),
            self.position_deltas.detach().clone(),
            self.rotation_deltas.detach().clone(),
            self.scale_deltas.detach().clone(),
        )
