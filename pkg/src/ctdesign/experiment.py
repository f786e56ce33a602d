"""Experiment orchestration: dataset, pilot, fits, designs, evaluation.

``run_experiment`` reproduces the evaluation protocol end to end at a
configurable scale: for each seeded phantom it simulates a pilot scan on
equidistant angles, fits every requested prior, runs the greedy design
loop per method, and scores TV- and network-based reconstructions at a
fixed angle cadence. All reported numbers flow through the summary CSV;
per-cell failures are recorded and the run continues.
"""

from __future__ import annotations

import dataclasses
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .design import equidistant_design, random_design, run_design
from .geometry import AngleSubset, ScanGeometry, build_geometry
from .lindip import (
    LinearisedNetworkPrior,
    build_gprior,
    fit_block_prior,
    measured_jacobian,
)
from .network import NetworkSpec, fit_network
from .phantoms import PhantomSpec, sample_phantom, simulate_measurements
from .priors import IsotropicPrior, Matern12Prior
from .recon import (
    ReconConfig,
    desk_tv_weight,
    dip_reconstruct,
    tv_reconstruct,
    tv_schedule,
)

__all__ = [
    "ExperimentConfig",
    "RunRecord",
    "ExperimentResult",
    "config_from_mapping",
    "config_to_mapping",
    "generate_dataset",
    "build_method_prior",
    "design_subsets",
    "run_design_method",
    "evaluate_design",
    "emit_diagnostics",
    "run_experiment",
    "summarise",
]

GREEDY_METHODS = ("isotropic", "matern", "lindip-block", "lindip-gprior",
                  "lindip-gprior-retrain")
BASELINE_METHODS = ("equidistant", "random")
ALL_METHODS = GREEDY_METHODS + BASELINE_METHODS


@dataclass
class ExperimentConfig:
    """Desk-scale defaults; every field is overridable from the config file."""

    height: int = 64
    width: int = 64
    n_candidates: int = 100
    d_p: int = 93
    n_rects: int = 3
    orientation_std_deg: float = 2.86
    noise_pct: float = 0.05
    pilot_size: int = 5
    n_steps: int = 15                      # designed angles beyond the pilot
    eval_every: int = 5                    # evaluation cadence in angles
    methods: tuple = ("lindip-gprior", "equidistant", "random")
    objective: str = "ese"
    n_samples: int = 1000                  # posterior sample count per step
    n_images: int = 10
    seed: int = 0
    reconstructors: tuple = ("tv",)        # subset of {"tv", "dip"}
    tv_iterations: int = 3000              # desk-scale cap on recon iterations
    dip_eval_iterations: int = 800
    dip_fit_iterations: int = 500          # network training before linearising
    dip_fit_tv_weight: float = 3e-3
    retrain_every: int = 5
    retrain_warm_start: bool = True
    net_scales: int = 3
    net_channels: int = 32
    net_in_channels: int = 8
    net_dtype: str = "float32"             # design-loop speed on CPU
    jvp_chunk: int = 32
    output_dir: str = "runs/desk"

    def __post_init__(self):
        if self.objective not in ("eig", "ese"):
            raise ValueError(f"unknown objective {self.objective!r}")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        bad = set(self.reconstructors) - {"tv", "dip"}
        if bad:
            raise ValueError(f"unknown reconstructors {sorted(bad)}")
        if self.n_steps % self.eval_every:
            raise ValueError("eval_every must divide n_steps")
        if self.pilot_size < 1 or self.n_images < 1:
            raise ValueError("pilot_size and n_images must be >= 1")

    @property
    def eval_points(self):
        return [self.pilot_size + k for k in
                range(0, self.n_steps + 1, self.eval_every)]

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(n_rects=self.n_rects,
                           orientation_std_deg=self.orientation_std_deg)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.height, self.width, scales=self.net_scales,
                           channels=self.net_channels,
                           in_channels=self.net_in_channels,
                           dtype=self.net_dtype)

    def image_seed(self, image_id: int) -> int:
        return self.seed * 100_000 + image_id


@dataclass
class RunRecord:
    image_id: int
    method: str
    objective: str
    selected: list = field(default_factory=list)
    psnr_rows: list = field(default_factory=list)  # (n_angles, reconstructor, psnr|None)
    step_seconds: list = field(default_factory=list)
    error: str | None = None


@dataclass
class ExperimentResult:
    records: list
    summary_path: Path
    n_failures: int


def config_to_mapping(config: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_mapping(mapping: dict, **overrides) -> ExperimentConfig:
    known = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    merged = dict(mapping)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - set(known)
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)}")
    kwargs = {}
    for key, value in merged.items():
        default = known[key].default
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [value]
            kwargs[key] = tuple(value) if isinstance(value, list) else (value,)
        elif isinstance(default, bool):
            kwargs[key] = bool(value)
        elif isinstance(default, float):
            kwargs[key] = float(value)
        elif isinstance(default, int):
            kwargs[key] = int(value)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def generate_dataset(config: ExperimentConfig, out_dir=None):
    """Seeded phantom images; optionally persisted with a CSV manifest."""
    spec = config.phantom_spec()
    images, entries = [], []
    for i in range(config.n_images):
        seed = config.image_seed(i)
        x, details = sample_phantom(spec, config.height, config.width, seed,
                                    details=True)
        images.append(x)
        entries.append({"image_id": i, "seed": seed,
                        "direction_deg": details["direction"]})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, (x, e) in enumerate(zip(images, entries)):
            io.save_array(out / f"image_{i:03d}.raw",
                          x.reshape(config.height, config.width),
                          seed=e["seed"], n_rects=spec.n_rects,
                          orientation_std_deg=spec.orientation_std_deg,
                          direction_deg=e["direction_deg"])
        io.write_manifest(out / "manifest.csv", entries)
    return images, entries


def _pilot_and_source(config, geometry, x, image_id):
    """Simulate the full candidate sinogram once; slice per acquired angle."""
    full = AngleSubset(range(config.n_candidates), config.n_candidates)
    sino = simulate_measurements(x, geometry, full, config.noise_pct,
                                 seed=config.image_seed(image_id) + 1)
    d_p = geometry.d_p

    def source(angle_index):
        return sino.y[angle_index * d_p: (angle_index + 1) * d_p]

    pilot = equidistant_design(config.pilot_size, config.n_candidates)
    y_pilot = np.concatenate([source(a) for a in pilot])
    return pilot, source, y_pilot, sino.noise_std**2


def build_method_prior(method: str, config: ExperimentConfig,
                       geometry: ScanGeometry, pilot: AngleSubset,
                       y_pilot: np.ndarray, noise_variance: float,
                       image_id: int):
    """Fitted prior plus an optional retraining closure for one method."""
    shape = (config.height, config.width)
    if method == "isotropic":
        return IsotropicPrior(shape).fit(geometry, pilot, y_pilot,
                                         noise_variance=noise_variance), None
    if method == "matern":
        return Matern12Prior(shape).fit(geometry, pilot, y_pilot,
                                        noise_variance=noise_variance), None
    if method not in GREEDY_METHODS:
        raise ValueError(f"method {method!r} has no prior")

    train_seed = config.image_seed(image_id) + 2
    net, _ = fit_network(config.network_spec(), geometry, pilot, y_pilot,
                         noise_variance, tv_weight=config.dip_fit_tv_weight,
                         iterations=config.dip_fit_iterations, seed=train_seed)

    def train_and_linearise(subset, y, warm):
        if warm:
            net.train(geometry, subset, y, tv_weight=config.dip_fit_tv_weight,
                      iterations=config.dip_fit_iterations, seed=train_seed)
            refit = net
        else:
            refit, _ = fit_network(config.network_spec(), geometry, subset, y,
                                   noise_variance,
                                   tv_weight=config.dip_fit_tv_weight,
                                   iterations=config.dip_fit_iterations,
                                   seed=train_seed)
        jac = refit.jacobian()
        jac.chunk = config.jvp_chunk
        return jac, measured_jacobian(jac, geometry, subset)

    jac = net.jacobian()
    jac.chunk = config.jvp_chunk
    m = measured_jacobian(jac, geometry, pilot)
    if method == "lindip-block":
        theta_prior, _ = fit_block_prior(jac, net.block_slices(), geometry,
                                         pilot, y_pilot, noise_variance,
                                         m_rows=m)
    else:
        theta_prior = build_gprior(jac, geometry, pilot, y_pilot,
                                   noise_variance, m_rows=m)
    prior = LinearisedNetworkPrior(jac, theta_prior)

    retrain_fn = None
    if method == "lindip-gprior-retrain":
        def retrain_fn(subset, y_all):
            jac2, m2 = train_and_linearise(subset, y_all,
                                           warm=config.retrain_warm_start)
            return LinearisedNetworkPrior(
                jac2, build_gprior(jac2, geometry, subset, y_all,
                                   noise_variance, m_rows=m2))
    return prior, retrain_fn


def design_subsets(method: str, config: ExperimentConfig, pilot: AngleSubset,
                   selected: list, image_id: int):
    """The angle subset evaluated at each cadence point."""
    subsets = {}
    for n in config.eval_points:
        if method in GREEDY_METHODS:
            sub = pilot
            for a in selected[: n - config.pilot_size]:
                sub = sub.extended(a)
            subsets[n] = sub
        elif method == "equidistant":
            subsets[n] = equidistant_design(n, config.n_candidates)
        else:
            subsets[n] = random_design(n, config.n_candidates,
                                       seed=config.image_seed(image_id) + 3)
    return subsets


def run_design_method(method, config, geometry, pilot, source, prior,
                      noise_variance, retrain_fn, image_id):
    if method in BASELINE_METHODS:
        return None
    return run_design(
        prior, noise_variance, geometry, pilot,
        objective=config.objective, n_steps=config.n_steps,
        n_samples=config.n_samples, seed=config.image_seed(image_id) + 4,
        source=source,
        retrain_every=config.retrain_every if retrain_fn else None,
        retrain_fn=retrain_fn,
    )


def evaluate_design(config, geometry, subsets, source, x_true):
    """PSNR per (angle count, reconstructor); None marks a skipped cell."""
    rows = []
    for n, subset in subsets.items():
        y = np.concatenate([source(a) for a in subset])
        for recon in ("tv", "dip"):
            if recon not in config.reconstructors:
                rows.append((n, recon, None))
                continue
            side = max(config.height, config.width)
            if side >= 128:
                lam, iters = tv_schedule(config.noise_pct, n)
                iters = min(iters, config.tv_iterations)
            else:
                lam = desk_tv_weight(config.noise_pct, side)
                iters = config.tv_iterations
            if recon == "tv":
                rep = tv_reconstruct(
                    geometry, subset, y,
                    ReconConfig(tv_weight=lam, iterations=iters),
                    x_true=x_true)
                rows.append((n, "tv", rep.psnr_db))
            else:
                rep = dip_reconstruct(
                    geometry, subset, y, config.network_spec(),
                    ReconConfig(tv_weight=config.dip_fit_tv_weight,
                                iterations=config.dip_eval_iterations,
                                seed=config.seed),
                    x_true=x_true)
                rows.append((n, "dip", rep.max_psnr_db))
    return rows


def emit_diagnostics(path, geometry: ScanGeometry, score_history) -> None:
    """Per-step per-candidate score CSV; an empty history still gets a header."""
    rows = []
    for step, scores in enumerate(score_history):
        for angle in sorted(scores):
            rows.append((step, angle, repr(float(geometry.angles_deg[angle])),
                         repr(float(scores[angle]))))
    io.write_csv(path, ["step", "angle_index", "angle_deg", "score"], rows)


def _write_run_artifacts(out, config, geometry, image_id, method, result):
    tag = f"img{image_id:03d}_{method}_{config.objective}"
    emit_diagnostics(out / f"scores_{tag}.csv", geometry, result.score_history)
    rows = []
    for step, angle in enumerate(result.selected):
        rows.append((step, angle, repr(float(geometry.angles_deg[angle])),
                     repr(float(result.score_history[step][angle]))))
    io.write_csv(out / f"selected_{tag}.csv",
                 ["step", "angle_index", "angle_deg", "score"], rows)
    manifest = {
        "prior_family": method,
        "objective": config.objective,
        "seed": config.seed,
        "image_seed": config.image_seed(image_id),
        "n_samples": config.n_samples,
        "jitter": result.state.jitter,
    }
    io.write_config(out / f"run_{tag}.txt", manifest)


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_config(out / "config_resolved.txt", config_to_mapping(config))

    geometry = build_geometry(config.height, config.width,
                              config.n_candidates, config.d_p)
    images, _ = generate_dataset(config, out_dir=out / "data")

    records = []
    for image_id, x in enumerate(images):
        pilot, source, y_pilot, noise_variance = _pilot_and_source(
            config, geometry, x, image_id)
        for method in config.methods:
            record = RunRecord(image_id=image_id, method=method,
                               objective=config.objective)
            records.append(record)
            try:
                prior, retrain_fn = (None, None)
                if method in GREEDY_METHODS:
                    prior, retrain_fn = build_method_prior(
                        method, config, geometry, pilot, y_pilot,
                        noise_variance, image_id)
                result = run_design_method(method, config, geometry, pilot,
                                           source, prior, noise_variance,
                                           retrain_fn, image_id)
                if result is not None:
                    record.selected = result.selected
                    record.step_seconds = result.step_seconds
                    _write_run_artifacts(out, config, geometry, image_id,
                                         method, result)
                subsets = design_subsets(method, config, pilot,
                                         record.selected, image_id)
                record.psnr_rows = evaluate_design(config, geometry, subsets,
                                                   source, x)
            except Exception:  # noqa: BLE001 - isolate per-cell failures
                record.error = traceback.format_exc(limit=3)

    summary_path = summarise(records, config, out)
    _write_psnr_table(records, config, out)
    n_failures = sum(1 for r in records if r.error is not None)
    if n_failures:
        io.write_csv(out / "failures.csv", ["image_id", "method", "error"],
                     [(r.image_id, r.method, r.error.strip().splitlines()[-1])
                      for r in records if r.error])
    return ExperimentResult(records=records, summary_path=summary_path,
                            n_failures=n_failures)


def _write_psnr_table(records, config, out):
    rows = []
    for r in records:
        for n, recon, value in r.psnr_rows:
            rows.append((r.image_id, r.method, r.objective, n, recon,
                         "skip" if value is None else repr(float(value))))
    io.write_csv(out / "psnr.csv",
                 ["image_id", "method", "objective", "n_angles",
                  "reconstructor", "psnr_db"], rows)


def summarise(records, config: ExperimentConfig, out_dir) -> Path:
    """Mean and standard error across images per method/objective cell."""
    cells = {}
    for r in records:
        for n, recon, value in r.psnr_rows:
            if value is None:
                continue
            cells.setdefault((r.method, r.objective, n, recon), []).append(value)
    rows = []
    for (method, objective, n, recon), vals in sorted(cells.items()):
        mean = float(np.mean(vals))
        sem = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        rows.append((method, objective, n, recon, repr(mean), repr(sem), len(vals)))
    path = Path(out_dir) / "summary.csv"
    io.write_csv(path, ["method", "objective", "n_angles", "reconstructor",
                        "mean_psnr_db", "sem_psnr_db", "n_images"], rows)
    return path
