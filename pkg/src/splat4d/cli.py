"""Command-line surface: dataset generation, training, multi-scale
rendering, evaluation, and the filter-ablation matrix.

Configuration precedence: built-in profile defaults < config file
(flat key=value lines) < command-line flags.
"""

from __future__ import annotations

import csv
import io
import math
import os

import click
import torch

from .estimator import PROFILES, SceneFitter
from .filters import FILTER_KINDS, FilterConfig
from .metrics import CSV_COLUMNS, coverage_inflation, highband_energy, psnr, ssim
from .optimizer import DivergenceError
from .rasterizer import render_multiscale, write_png
from .scene import atomic_write_text, load_scene, save_scene
from .synth import (
    RIG_PROFILES,
    SCENE_PROFILES,
    load_dataset,
    make_rig,
    make_scene,
    render_ground_truth,
    render_reference,
    save_dataset,
)

_NUMERIC_KEYS = {
    "sigma_s", "rho_min", "rho_max", "rho_thre", "eps",
    "lambda_scale", "lambda_ssim", "lambda_v",
    "lr_position", "lr_rotation", "lr_scale", "lr_opacity",
    "lr_color", "lr_deformation",
}
_INT_KEYS = {"warmup_iterations", "switch_iteration", "total_iterations",
             "n_primitives", "tile_size", "seed"}
_STR_KEYS = {"scale_loss_mode", "filter_kind", "profile"}


def _parse_overrides(config_file, sets):
    """Merge a key=value config file with --set flags (flags win)."""
    overrides = {}
    entries = []
    if config_file:
        with open(config_file) as fh:
            entries.extend(ln.strip() for ln in fh
                           if ln.strip() and not ln.strip().startswith("#"))
    entries.extend(sets)
    for entry in entries:
        if "=" not in entry:
            raise click.UsageError(f"override '{entry}' is not key=value")
        key, value = (part.strip() for part in entry.split("=", 1))
        if key in _NUMERIC_KEYS:
            overrides[key] = float(value)
        elif key in _INT_KEYS:
            overrides[key] = int(value)
        elif key in _STR_KEYS:
            overrides[key] = value
        else:
            raise click.UsageError(f"unknown configuration key '{key}'")
    return overrides


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.UsageError(f"bad float list '{text}'") from exc


def _write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


@click.group()
def main():
    """Alias-aware 4D Gaussian splatting toolkit."""


@main.command()
@click.option("--profile", type=click.Choice(SCENE_PROFILES), required=True)
@click.option("--rig", type=click.Choice(RIG_PROFILES), default="multiview_ring",
              show_default=True)
@click.option("--cameras", type=int, default=4, show_default=True)
@click.option("--count", type=int, default=32, show_default=True,
              help="Primitive count.")
@click.option("--timesteps", type=int, default=8, show_default=True)
@click.option("--resolution", type=int, default=128, show_default=True)
@click.option("--focal", type=float, default=None,
              help="Focal length in pixels (default: resolution).")
@click.option("--supersample", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", type=click.Path(), required=True)
def generate(profile, rig, cameras, count, timesteps, resolution, focal,
             supersample, seed, output):
    """Generate a synthetic dataset (images + manifest + scene file)."""
    scene = make_scene(profile, seed=seed, primitive_count=count, timesteps=timesteps)
    f = focal if focal is not None else float(resolution)
    n_cams = timesteps if rig == "monocular_arc" else cameras
    camera_rig = make_rig(rig, n_cams, f=f, resolution=(resolution, resolution))
    times = torch.linspace(0.0, 1.0, timesteps).tolist()
    dataset = render_ground_truth(scene, camera_rig, times, supersample=supersample)
    save_dataset(dataset, output)
    save_scene(os.path.join(output, "ground_truth.txt"), scene)
    click.echo(f"wrote {len(dataset.frames)} frames to {output}")


@main.command()
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--filter", "filter_kind", type=click.Choice(FILTER_KINDS),
              default="adaptive4d", show_default=True)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="monocular",
              show_default=True)
@click.option("--iterations", type=int, default=None,
              help="Override total_iterations.")
@click.option("--config", "config_file", type=click.Path(exists=True), default=None,
              help="Flat key=value config file.")
@click.option("--set", "sets", multiple=True,
              help="Config override key=value (repeatable).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", type=click.Path(), required=True,
              help="Checkpoint path; the loss CSV lands beside it.")
def train(dataset_dir, filter_kind, profile, iterations, config_file, sets, seed,
          output):
    """Train a scene on a dataset and write a checkpoint + loss report CSV."""
    overrides = _parse_overrides(config_file, sets)
    overrides.setdefault("seed", seed)
    if iterations is not None:
        overrides["total_iterations"] = iterations
    fitter = SceneFitter(filter_kind=filter_kind, profile=profile, **overrides)
    try:
        fitter.fit(dataset_dir)
    except DivergenceError as exc:
        _write_loss_csv(_loss_csv_path(output), exc.history)
        raise click.ClickException(f"training diverged: {exc}") from exc
    save_scene(output, fitter.scene_, tracker=fitter.tracker_)
    _write_loss_csv(_loss_csv_path(output), fitter.history_)
    click.echo(f"wrote checkpoint {output}")


def _loss_csv_path(checkpoint_path: str) -> str:
    base, _ = os.path.splitext(checkpoint_path)
    return base + "_loss.csv"


def _write_loss_csv(path: str, history) -> None:
    _write_csv(path, ("iteration", "color", "scale", "total", "active_count"),
               [(r.iteration, repr(r.color), repr(r.scale), repr(r.total),
                 r.active_count) for r in history])


def _load_checkpoint(path: str):
    scene, tracker, _ = load_scene(path)
    return scene, tracker


def _checkpoint_filter_config(filter_kind: str, profile: str) -> FilterConfig:
    return FilterConfig(kind=filter_kind, rho_thre=PROFILES[profile]["rho_thre"])


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--factors", default="1", show_default=True,
              help="Comma-separated scale factors.")
@click.option("--times", default="0", show_default=True,
              help="Comma-separated normalized times.")
@click.option("--camera", type=int, default=0, show_default=True)
@click.option("--filter", "filter_kind", type=click.Choice(FILTER_KINDS),
              default="adaptive4d", show_default=True)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="monocular",
              show_default=True)
@click.option("-o", "--output", type=click.Path(), required=True)
def render(checkpoint, dataset_dir, factors, times, camera, filter_kind, profile,
           output):
    """Render a checkpoint at one or more scales (zoom-in/zoom-out sweeps)."""
    factor_list = _parse_floats(factors)
    time_list = _parse_floats(times)
    if not factor_list or not time_list:
        raise click.UsageError("need at least one factor and one time")
    scene, _ = _load_checkpoint(checkpoint)
    dataset = load_dataset(dataset_dir)
    cfg = _checkpoint_filter_config(filter_kind, profile)
    os.makedirs(output, exist_ok=True)
    for t in time_list:
        images = render_multiscale(scene, dataset.cameras[camera], t, factor_list,
                                   cfg, background=dataset.background)
        for factor, image in zip(factor_list, images):
            name = f"render_cam{camera}_t{t:.3f}_x{factor:g}.png"
            write_png(image, os.path.join(output, name))
    click.echo(f"wrote {len(factor_list) * len(time_list)} images to {output}")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--factors", default="1", show_default=True)
@click.option("--filter", "filter_kind", type=click.Choice(FILTER_KINDS),
              default="adaptive4d", show_default=True)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="monocular",
              show_default=True)
@click.option("--supersample", type=int, default=4, show_default=True)
@click.option("--scene-name", default="scene", show_default=True)
@click.option("-o", "--output", type=click.Path(), required=True,
              help="Metrics CSV path.")
def eval(checkpoint, dataset_dir, factors, filter_kind, profile, supersample,
         scene_name, output):
    """Evaluate a checkpoint against supersampled references at each scale."""
    factor_list = _parse_floats(factors)
    if not factor_list:
        raise click.UsageError("need at least one scale factor")
    scene, _ = _load_checkpoint(checkpoint)
    dataset = load_dataset(dataset_dir)
    gt_path = os.path.join(dataset_dir, "ground_truth.txt")
    if not os.path.exists(gt_path):
        raise click.ClickException(f"{dataset_dir} has no ground_truth.txt")
    gt_scene, _, _ = load_scene(gt_path)
    cfg = _checkpoint_filter_config(filter_kind, profile)
    rows = _eval_rows(scene_name, filter_kind, scene, gt_scene, dataset,
                      factor_list, cfg, supersample)
    _write_csv(output, CSV_COLUMNS, rows)
    click.echo(f"wrote {output}")


def _eval_rows(scene_name, filter_kind, scene, gt_scene, dataset, factor_list,
               cfg, supersample):
    rows = []
    with torch.no_grad():
        for factor in factor_list:
            values = {"psnr": [], "ssim": [], "highband": []}
            for frame in dataset.frames:
                camera = dataset.cameras[frame.camera_index]
                t = dataset.times[frame.time_index]
                image = render_multiscale(scene, camera, t, [factor], cfg,
                                          background=dataset.background)[0]
                reference = render_reference(gt_scene, camera.rescaled(factor), t,
                                             supersample, dataset.background)
                values["psnr"].append(psnr(image, reference))
                try:
                    values["ssim"].append(ssim(image, reference))
                except ValueError:
                    values["ssim"].append(math.nan)
                values["highband"].append(highband_energy(image, 0.25))
            camera = dataset.cameras[dataset.frames[0].camera_index]
            t = dataset.times[dataset.frames[0].time_index]
            coverage = coverage_inflation(
                scene, camera.rescaled(factor), t, cfg,
                FilterConfig(kind="mip2d", rho_thre=cfg.rho_thre),
                background=dataset.background,
            )
            rows.append((
                scene_name, filter_kind, factor,
                repr(_mean_finite(values["psnr"])),
                repr(_mean_finite(values["ssim"])),
                repr(_mean_finite(values["highband"])),
                repr(coverage),
            ))
    return rows


def _mean_finite(values) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else math.inf


@main.command()
@click.argument("dataset_dir", type=click.Path(exists=True))
@click.option("--filters", default="dilation2d,mip2d,smoothing3d,adaptive4d,none",
              show_default=True, help="Comma-separated filter kinds to train.")
@click.option("--factors", default="1", show_default=True)
@click.option("--profile", type=click.Choice(sorted(PROFILES)), default="monocular",
              show_default=True)
@click.option("--iterations", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--set", "sets", multiple=True)
@click.option("-o", "--output", type=click.Path(), required=True)
def ablate(dataset_dir, filters, factors, profile, iterations, seed, sets, output):
    """Train and evaluate each filter variant; one CSV row per
    (filter, scale factor)."""
    kinds = [k.strip() for k in filters.split(",") if k.strip()]
    for kind in kinds:
        if kind not in FILTER_KINDS:
            raise click.UsageError(f"unknown filter kind '{kind}'")
    factor_list = _parse_floats(factors)
    overrides = _parse_overrides(None, sets)
    overrides["seed"] = seed
    overrides["total_iterations"] = iterations
    overrides.setdefault("warmup_iterations", max(iterations // 4, 1))
    overrides.setdefault(
        "switch_iteration",
        min(max(iterations // 2, overrides["warmup_iterations"] + 1), iterations - 1),
    )
    dataset = load_dataset(dataset_dir)
    gt_scene, _, _ = load_scene(os.path.join(dataset_dir, "ground_truth.txt"))
    rows = []
    for kind in kinds:
        fitter = SceneFitter(filter_kind=kind, profile=profile, **overrides)
        fitter.fit(dataset)
        rows.extend(_eval_rows("ablation", kind, fitter.scene_, gt_scene, dataset,
                               factor_list, fitter.filter_config(), 4))
    _write_csv(output, CSV_COLUMNS, rows)
    click.echo(f"wrote {output}")


if __name__ == "__main__":
    main()
