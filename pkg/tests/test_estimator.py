"""Estimator front door: sklearn conventions, profile resolution, and the
fit/predict/score surface."""

import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from splat4d.estimator import (
    PROFILES,
    SceneFitter,
    check_dataset,
    initialize_scene,
)
from splat4d.synth import make_rig, make_scene, render_ground_truth


def _tiny_dataset(seed=0, resolution=24):
    scene = make_scene("orbiting_blobs", seed=seed, primitive_count=5, timesteps=3)
    rig = make_rig("multiview_ring", 2, f=float(resolution),
                   resolution=(resolution, resolution))
    return render_ground_truth(scene, rig, torch.linspace(0, 1, 3).tolist(),
                               supersample=2)


def _fast_fitter(**kwargs):
    defaults = dict(n_primitives=4, warmup_iterations=3, switch_iteration=6,
                    total_iterations=12, seed=0)
    defaults.update(kwargs)
    return SceneFitter(**defaults)


def test_get_set_params_roundtrip():
    fitter = SceneFitter(sigma_s=0.3, rho_min=0.1)
    params = fitter.get_params()
    assert params["sigma_s"] == 0.3
    other = SceneFitter().set_params(**params)
    assert other.get_params() == params


def test_clone_preserves_params():
    fitter = _fast_fitter(filter_kind="mip2d", profile="multiview")
    copy = clone(fitter)
    assert copy.get_params() == fitter.get_params()


def test_profile_defaults():
    mono = SceneFitter(profile="monocular")
    assert mono.filter_config().rho_thre == PROFILES["monocular"]["rho_thre"]
    assert mono.train_config().scale_loss_mode == "sum"
    multi = SceneFitter(profile="multiview")
    assert multi.filter_config().rho_thre == PROFILES["multiview"]["rho_thre"]
    assert multi.train_config().scale_loss_mode == "mean"
    # explicit values beat the profile
    override = SceneFitter(profile="multiview", rho_thre=0.5,
                           scale_loss_mode="sum")
    assert override.filter_config().rho_thre == 0.5
    assert override.train_config().scale_loss_mode == "sum"


def test_unknown_profile_rejected():
    with pytest.raises(ValueError):
        SceneFitter(profile="bogus").filter_config()


def test_not_fitted_errors():
    fitter = SceneFitter()
    with pytest.raises(NotFittedError):
        fitter.render_view(0, 0.0)
    with pytest.raises(NotFittedError):
        fitter.predict([[0, 0.0]])


def test_check_dataset_type_errors():
    with pytest.raises(TypeError):
        check_dataset(42)


def test_initialize_scene_shapes():
    dataset = _tiny_dataset()
    scene = initialize_scene(dataset, 8, seed=1)
    assert scene.num_primitives == 8
    assert scene.deformation.times.numel() == len(dataset.times)
    assert bool((scene.positions.abs() <= 1.0).all())
    assert bool((scene.scales > 0).all())


def test_fit_predict_score():
    dataset = _tiny_dataset()
    fitter = _fast_fitter().fit(dataset)
    assert fitter.scene_.num_primitives == 4
    assert len(fitter.history_) == 12
    out = fitter.predict([[0, 0.0, 1.0], [1, 0.5, 1.0]])
    assert out.shape[0] == 2
    assert out.shape[1:] == (24, 24, 3)
    score = fitter.score(dataset)
    assert np.isfinite(score)


def test_fit_accepts_initial_scene():
    dataset = _tiny_dataset(seed=1)
    gt = make_scene("orbiting_blobs", seed=1, primitive_count=5, timesteps=3)
    fitter = _fast_fitter().fit(dataset, initial_scene=gt)
    assert fitter.scene_.num_primitives == 5
    # the initializer must not be mutated by training
    check = make_scene("orbiting_blobs", seed=1, primitive_count=5, timesteps=3)
    assert torch.equal(gt.positions, check.positions)


def test_render_view_scale_changes_resolution():
    dataset = _tiny_dataset(seed=2)
    fitter = _fast_fitter().fit(dataset)
    full = fitter.render_view(0, 0.0, scale=1.0)
    half = fitter.render_view(0, 0.0, scale=0.5)
    assert full.image.shape == (24, 24, 3)
    assert half.image.shape == (12, 12, 3)
