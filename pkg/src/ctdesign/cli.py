"""Command-line entry points.

Every subcommand takes a flat key=value config file plus a handful of
overrides. Exit codes: 0 success, 1 configuration error, 2 completed
with recorded per-cell failures.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import io
from .experiment import (
    build_method_prior,
    config_from_mapping,
    config_to_mapping,
    generate_dataset,
    run_experiment,
    summarise,
    _pilot_and_source,
    _write_run_artifacts,
    design_subsets,
    evaluate_design,
    run_design_method,
    RunRecord,
)
from .geometry import build_geometry

CONFIG_ERROR, PARTIAL_FAILURE = 1, 2


def _load_config(config_path, seed, out, method, objective, noise):
    overrides = {"seed": seed, "output_dir": out, "objective": objective,
                 "noise_pct": noise}
    if method is not None:
        overrides["methods"] = [method]
    try:
        mapping = {} if config_path is None else io.read_config(config_path)
        return config_from_mapping(mapping,
                                   **{k: v for k, v in overrides.items()
                                      if v is not None})
    except (ValueError, KeyError, TypeError) as exc:
        raise click.ClickException(str(exc)) from exc


def _common(fn):
    fn = click.option("--noise", type=float, default=None,
                      help="noise level as a fraction of the mean signal")(fn)
    fn = click.option("--objective", type=click.Choice(["eig", "ese"]),
                      default=None)(fn)
    fn = click.option("--method", default=None)(fn)
    fn = click.option("--out", default=None, help="output directory")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.argument("config_path", required=False,
                        type=click.Path(exists=True, dir_okay=False))(fn)
    return fn


@click.group()
def main():
    """Greedy Bayesian scan-angle design for sparse CT."""


@main.command("gen-data")
@_common
def gen_data(config_path, seed, out, method, objective, noise):
    """Generate the seeded phantom dataset and its manifest."""
    config = _load_config(config_path, seed, out, method, objective, noise)
    out_dir = Path(config.output_dir) / "data"
    generate_dataset(config, out_dir=out_dir)
    click.echo(f"wrote {config.n_images} images and manifest to {out_dir}")


@main.command("fit")
@_common
@click.option("--image-id", type=int, default=0, show_default=True)
def fit(config_path, seed, out, method, objective, noise, image_id):
    """Fit the prior for one image's pilot scan and print hyperparameters."""
    config = _load_config(config_path, seed, out, method, objective, noise)
    geometry = build_geometry(config.height, config.width,
                              config.n_candidates, config.d_p)
    images, _ = generate_dataset(config)
    pilot, _, y_pilot, noise_variance = _pilot_and_source(
        config, geometry, images[image_id], image_id)
    for m in config.methods:
        prior, _ = build_method_prior(m, config, geometry, pilot, y_pilot,
                                      noise_variance, image_id)
        for key, value in prior.hyperparameters().items():
            text = f"{value:.6g}" if isinstance(value, float) else value
            click.echo(f"{m}: {key} = {text}")


@main.command("design")
@_common
@click.option("--image-id", type=int, default=0, show_default=True)
def design(config_path, seed, out, method, objective, noise, image_id):
    """Run the greedy design loop for one image and write its artifacts."""
    config = _load_config(config_path, seed, out, method, objective, noise)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_config(out_dir / "config_resolved.txt", config_to_mapping(config))
    geometry = build_geometry(config.height, config.width,
                              config.n_candidates, config.d_p)
    images, _ = generate_dataset(config)
    pilot, source, y_pilot, noise_variance = _pilot_and_source(
        config, geometry, images[image_id], image_id)
    failures = 0
    for m in config.methods:
        try:
            if m in ("equidistant", "random"):
                click.echo(f"{m}: baseline design, nothing to run")
                continue
            prior, retrain_fn = build_method_prior(
                m, config, geometry, pilot, y_pilot, noise_variance, image_id)
            result = run_design_method(m, config, geometry, pilot, source,
                                       prior, noise_variance, retrain_fn,
                                       image_id)
            _write_run_artifacts(out_dir, config, geometry, image_id, m, result)
            angles = [f"{geometry.angles_deg[a]:.1f}" for a in result.selected]
            click.echo(f"{m}: selected angles (deg): {', '.join(angles)}")
        except Exception as exc:  # noqa: BLE001
            failures += 1
            click.echo(f"{m}: failed: {exc}", err=True)
    if failures:
        sys.exit(PARTIAL_FAILURE)


@main.command("reconstruct")
@_common
@click.option("--image-id", type=int, default=0, show_default=True)
def reconstruct(config_path, seed, out, method, objective, noise, image_id):
    """Reconstruct one image at every cadence point and save the results."""
    config = _load_config(config_path, seed, out, method, objective, noise)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    geometry = build_geometry(config.height, config.width,
                              config.n_candidates, config.d_p)
    images, _ = generate_dataset(config)
    x = images[image_id]
    pilot, source, y_pilot, noise_variance = _pilot_and_source(
        config, geometry, x, image_id)
    failures = 0
    rows = []
    for m in config.methods:
        try:
            selected = []
            if m not in ("equidistant", "random"):
                prior, retrain_fn = build_method_prior(
                    m, config, geometry, pilot, y_pilot, noise_variance,
                    image_id)
                result = run_design_method(m, config, geometry, pilot, source,
                                           prior, noise_variance, retrain_fn,
                                           image_id)
                selected = result.selected
            subsets = design_subsets(m, config, pilot, selected, image_id)
            for n, recon, value in evaluate_design(config, geometry, subsets,
                                                   source, x):
                rows.append((image_id, m, config.objective, n, recon,
                             "skip" if value is None else repr(float(value))))
        except Exception as exc:  # noqa: BLE001
            failures += 1
            click.echo(f"{m}: failed: {exc}", err=True)
    io.write_csv(out_dir / f"psnr_img{image_id:03d}.csv",
                 ["image_id", "method", "objective", "n_angles",
                  "reconstructor", "psnr_db"], rows)
    click.echo(f"wrote {out_dir / f'psnr_img{image_id:03d}.csv'}")
    if failures:
        sys.exit(PARTIAL_FAILURE)


@main.command("evaluate")
@_common
def evaluate(config_path, seed, out, method, objective, noise):
    """Run the full experiment grid and write the summary CSV."""
    config = _load_config(config_path, seed, out, method, objective, noise)
    result = run_experiment(config)
    click.echo(f"summary: {result.summary_path}")
    if result.n_failures:
        click.echo(f"{result.n_failures} cell(s) failed; see failures.csv",
                   err=True)
        sys.exit(PARTIAL_FAILURE)


@main.command("report")
@_common
def report(config_path, seed, out, method, objective, noise):
    """Re-aggregate an existing run directory's psnr.csv into summary.csv."""
    config = _load_config(config_path, seed, out, method, objective, noise)
    run_dir = Path(config.output_dir)
    psnr_path = run_dir / "psnr.csv"
    if not psnr_path.exists():
        raise click.ClickException(f"no psnr.csv under {run_dir}")
    _, rows = io.read_csv(psnr_path)
    records = {}
    for image_id, m, obj, n, recon, value in rows:
        rec = records.setdefault((int(image_id), m, obj),
                                 RunRecord(int(image_id), m, obj))
        rec.psnr_rows.append((int(n), recon,
                              None if value == "skip" else float(value)))
    path = summarise(list(records.values()), config, run_dir)
    click.echo(f"summary: {path}")
    for line in path.read_text().splitlines():
        click.echo(line)


if __name__ == "__main__":
    main()
