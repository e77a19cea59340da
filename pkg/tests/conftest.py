"""Shared fixtures and small construction helpers for the test suite."""

import math

import pytest
import torch

from splat4d.geometry import DTYPE, CameraModel, GaussianPrimitive


def identity_camera(f=100.0, width=64, height=64):
    """Camera at the origin looking down +z (rows: right, down, forward)."""
    return CameraModel(
        f=f,
        principal_point=torch.tensor([width / 2.0, height / 2.0], dtype=DTYPE),
        width=width,
        height=height,
        rotation=torch.eye(3, dtype=DTYPE),
        translation=torch.zeros(3, dtype=DTYPE),
    )


def random_unit_quat(gen):
    q = torch.randn(4, generator=gen, dtype=DTYPE)
    return q / q.norm()


def make_primitive(position=(0.0, 0.0, 2.0), rotation=(1.0, 0.0, 0.0, 0.0),
                   scale=(0.1, 0.1, 0.1), opacity=0.8, color=(1.0, 0.5, 0.25),
                   pid=0, interval=None):
    return GaussianPrimitive(
        id=pid,
        position=torch.as_tensor(position, dtype=DTYPE),
        rotation=torch.as_tensor(rotation, dtype=DTYPE),
        scale=torch.as_tensor(scale, dtype=DTYPE),
        opacity=opacity,
        color=torch.as_tensor(color, dtype=DTYPE),
        min_sampling_interval=interval,
    )


def rotation_quat(axis, degrees):
    axis = torch.tensor(axis, dtype=DTYPE)
    axis = axis / axis.norm()
    half = math.radians(degrees) / 2.0
    return torch.cat([
        torch.tensor([math.cos(half)], dtype=DTYPE),
        math.sin(half) * axis,
    ])


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)
