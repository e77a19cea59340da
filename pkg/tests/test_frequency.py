"""Sampling-interval tracking: static estimate, momentum refinement, and the
exhaustive enumeration oracle."""

import math

import pytest
import torch

from splat4d.deformation import DeformationField, DeformationTrack
from splat4d.frequency import (
    FrequencyTracker,
    brute_force_interval,
    momentum_step,
    static_interval,
)
from splat4d.geometry import DTYPE, CameraModel
from splat4d.scene import GaussianScene
from splat4d.synth import make_rig, make_scene

from conftest import identity_camera, make_primitive


def test_static_interval_single_camera():
    cam = identity_camera(f=1000.0)
    g = make_primitive(position=(0.0, 0.0, 2.0))
    assert abs(static_interval(g, [cam]) - 0.002) < 1e-15


def test_static_interval_takes_min_over_cameras():
    cams = [identity_camera(f=1000.0), identity_camera(f=2000.0)]
    g = make_primitive(position=(0.0, 0.0, 2.0))  # ratios 0.002 and 0.001
    assert abs(static_interval(g, cams) - 0.001) < 1e-15


def test_static_interval_skips_invisible_camera():
    # nearer camera faces away, so only the farther one counts
    import dataclasses
    facing = identity_camera(f=1000.0)
    away = dataclasses.replace(
        facing,
        rotation=torch.diag(torch.tensor([1.0, -1.0, -1.0], dtype=DTYPE)),
        f=4000.0,
    )
    g = make_primitive(position=(0.0, 0.0, 2.0))
    # brute check with an enumeration oracle over the camera list
    best = math.inf
    for cam in (facing, away):
        from splat4d.geometry import visibility
        if visibility(g, cam):
            best = min(best, float(cam.world_to_camera(g.position)[2]) / cam.f)
    assert abs(static_interval(g, [facing, away]) - best) < 1e-15
    assert abs(best - 0.002) < 1e-15


def test_static_interval_untracked_when_unseen():
    cam = identity_camera()
    g = make_primitive(position=(0.0, 0.0, -5.0))
    assert static_interval(g, [cam]) is None


def test_static_interval_permutation_invariant(gen):
    cams = [identity_camera(f=float(f)) for f in (300, 1000, 50)]
    g = make_primitive(position=(0.0, 0.0, 2.0))
    a = static_interval(g, cams)
    b = static_interval(g, list(reversed(cams)))
    assert a == b


def test_momentum_step_saturating_min():
    assert momentum_step(0.002, 0.004, 0.2) == pytest.approx(0.002)


def test_momentum_step_arithmetic():
    assert momentum_step(0.002, 0.001, 0.2) == pytest.approx(0.0018)


def test_momentum_converges_geometrically():
    # scalar oracle: iterate the update rule directly
    t_hat = 0.002
    for _ in range(50):
        t_hat = momentum_step(t_hat, 0.001, 0.2)
    assert abs(t_hat - 0.001) <= 1e-6


def test_tracker_update_rejects_nonpositive():
    tracker = FrequencyTracker(intervals=torch.tensor([0.002], dtype=DTYPE))
    tracker.update(0, depth=-1.0, f=100.0)
    assert float(tracker.intervals[0]) == 0.002


def test_tracker_nu_times_interval_is_one():
    tracker = FrequencyTracker(intervals=torch.tensor([0.002, 0.5, 3.0], dtype=DTYPE))
    prod = tracker.max_frequencies() * tracker.intervals
    assert torch.allclose(prod, torch.ones(3, dtype=DTYPE))


def test_tracker_mode_switch():
    tracker = FrequencyTracker(intervals=torch.tensor([1.0]), switch_iteration=10)
    tracker.advance(9)
    assert tracker.mode == "static"
    tracker.advance(10)
    assert tracker.mode == "momentum"


def test_tracker_batch_update_matches_scalar():
    tracker = FrequencyTracker(intervals=torch.tensor([0.002, 0.004, math.nan], dtype=DTYPE),
                               mode="momentum", lambda_v=0.2)
    scalar = [momentum_step(0.002, 0.003, 0.2), momentum_step(0.004, 0.003, 0.2), 0.003]
    tracker.batch_update(torch.tensor([0, 1, 2]), torch.tensor([0.3, 0.3, 0.3]), 100.0)
    assert torch.allclose(tracker.intervals,
                          torch.tensor(scalar, dtype=DTYPE), atol=1e-15)


def test_tracker_batch_update_noop_in_static_mode():
    tracker = FrequencyTracker(intervals=torch.tensor([0.002], dtype=DTYPE), mode="static")
    tracker.batch_update(torch.tensor([0]), torch.tensor([0.1]), 100.0)
    assert float(tracker.intervals[0]) == 0.002


def test_tracker_validation():
    with pytest.raises(ValueError):
        FrequencyTracker(intervals=torch.tensor([1.0]), mode="bogus")
    with pytest.raises(ValueError):
        FrequencyTracker(intervals=torch.tensor([1.0]), lambda_v=0.0)


def test_effective_intervals_median_fallback():
    tracker = FrequencyTracker(intervals=torch.tensor([0.5, math.nan, 1.5, 1.0]))
    eff = tracker.effective_intervals()
    assert float(eff[1]) == 1.0  # median of {0.5, 1.0, 1.5}
    all_nan = FrequencyTracker(intervals=torch.full((3,), math.nan))
    assert torch.allclose(all_nan.effective_intervals(), torch.ones(3, dtype=DTYPE))


# ---------------------------------------------------------------------------
# brute-force oracle agreement

def test_brute_force_static_scene_equals_static_interval():
    rig = make_rig("multiview_ring", 4, f=64.0, resolution=(32, 32))
    g = make_primitive(position=(0.1, 0.0, 0.2))
    static = static_interval(g, rig.cameras)
    brute = brute_force_interval(g, None, rig.cameras, [0.0, 0.5, 1.0])
    assert abs(static - brute) < 1e-15


def test_brute_force_moving_primitive_smaller():
    cam = identity_camera(f=100.0)
    g = make_primitive(position=(0.0, 0.0, 3.0))
    n = 2
    dp = torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, -1.5]], dtype=DTYPE)
    dr = torch.zeros(n, 4, dtype=DTYPE)
    dr[:, 0] = 1.0
    track = DeformationTrack(torch.tensor([0.0, 1.0], dtype=DTYPE), dp, dr,
                             torch.zeros(n, 3, dtype=DTYPE))
    static = static_interval(g, [cam])
    brute = brute_force_interval(g, track, [cam], torch.linspace(0, 1, 5).tolist())
    assert brute < static
    assert abs(brute - 1.5 / 100.0) < 1e-12


def test_brute_force_single_configuration():
    cam = identity_camera(f=250.0)
    g = make_primitive(position=(0.0, 0.0, 2.5))
    assert abs(brute_force_interval(g, None, [cam], [0.0]) - 0.01) < 1e-15


def test_brute_force_never_visible():
    cam = identity_camera()
    g = make_primitive(position=(0.0, 0.0, -2.0))
    assert brute_force_interval(g, None, [cam], [0.0, 1.0]) is None


def test_refresh_static_writes_scene_intervals():
    scene = make_scene("orbiting_blobs", seed=0, primitive_count=5)
    rig = make_rig("multiview_ring", 3, f=64.0, resolution=(48, 48))
    tracker = FrequencyTracker.for_scene(scene, rig.cameras)
    assert torch.allclose(scene.sampling_intervals, tracker.intervals,
                          equal_nan=True)
    for k in range(5):
        expect = static_interval(scene.primitive(k), rig.cameras)
        got = float(tracker.intervals[k])
        if expect is None:
            assert math.isnan(got)
        else:
            assert abs(got - expect) < 1e-12
