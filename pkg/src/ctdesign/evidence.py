"""Closed-form model evidence and hyperparameter fitting at pilot scale.

The measurement covariance Sigma_yy = A Sigma_xx A^T + sigma_y^2 I is
assembled densely through prior matvecs, which is tractable for the small
pilot scans this is used on. Hyperparameters are fitted by maximising the
exact Gaussian log-density of the pilot measurements over log-parameters
with a multi-start coordinate search.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize

from .geometry import ScanGeometry, AngleSubset, stacked_operator
from .priors import FeatureMapPrior, GaussianNoise

__all__ = [
    "EvidenceReport",
    "assemble_measurement_cov",
    "log_evidence",
    "fit_hyperparameters",
]


@dataclass
class EvidenceReport:
    log_evidence: float
    hyperparameters: dict
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if not math.isfinite(self.log_evidence):
            raise ValueError("log evidence must be finite")


def assemble_measurement_cov(prior, noise_variance: float,
                             geometry: ScanGeometry = None, subset: AngleSubset = None,
                             operator=None) -> np.ndarray:
    """Dense Sigma_yy = A Sigma_xx A^T + sigma_y^2 I via prior matvecs.

    ``operator`` overrides the stacked ray transform (test harnesses pass
    e.g. a sparse identity here).
    """
    op = operator if operator is not None else stacked_operator(geometry, subset)
    op = sp.csr_matrix(op)
    rows = op.toarray()
    cov_rows = prior.matvec(rows)  # row i holds Sigma_xx a_i
    syy = op @ cov_rows.T
    syy = 0.5 * (syy + syy.T)
    syy[np.diag_indices_from(syy)] += noise_variance
    return syy


def gaussian_logpdf_zero_mean(y: np.ndarray, cov: np.ndarray) -> float:
    """Exact log N(y; 0, cov); raises on a non-PD covariance."""
    try:
        chol = sla.cholesky(cov, lower=True)
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"measurement covariance not positive definite: {exc}")
    alpha = sla.solve_triangular(chol, y, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    d = y.size
    return float(-0.5 * (alpha @ alpha + logdet) - 0.5 * d * math.log(2.0 * math.pi))


def log_evidence(prior, noise, geometry: ScanGeometry = None,
                 subset: AngleSubset = None, y: np.ndarray = None,
                 operator=None) -> EvidenceReport:
    noise_variance = noise.variance if isinstance(noise, GaussianNoise) else float(noise)
    y = np.asarray(y, dtype=float)
    syy = assemble_measurement_cov(prior, noise_variance, geometry, subset, operator)
    value = gaussian_logpdf_zero_mean(y, syy)
    hypers = dict(prior.hyperparameters())
    hypers["noise_variance"] = noise_variance
    return EvidenceReport(log_evidence=value, hyperparameters=hypers)


# names of the log-parameterised hyperparameters per prior family
_FAMILY_PARAMS = {
    "IsotropicPrior": ["variance"],
    "Matern12Prior": ["variance", "lengthscale"],
}

_BOUNDS = {
    "variance": (-20.0, 20.0),
    "lengthscale": None,  # filled per-geometry below
    "noise_variance": (-20.0, 20.0),
}


def fit_hyperparameters(prior: FeatureMapPrior, geometry: ScanGeometry,
                        subset: AngleSubset, y: np.ndarray,
                        fix_noise_variance: float | None = None,
                        n_starts: int = 3, maxiter: int = 60, seed: int = 0):
    """Maximise pilot evidence over log-hyperparameters.

    Returns (fitted prior, GaussianNoise, EvidenceReport). The search is a
    deterministic multi-start Powell (coordinate) search; ``seed`` perturbs
    the extra starting points.
    """
    y = np.asarray(y, dtype=float)
    family = type(prior).__name__
    if family not in _FAMILY_PARAMS:
        raise ValueError(f"unsupported prior family {family!r}")
    names = list(_FAMILY_PARAMS[family])
    fit_noise = fix_noise_variance is None
    if fit_noise:
        names.append("noise_variance")

    second_moment = float(np.mean(y**2))
    trace = []

    def build(log_params):
        p = copy.deepcopy(prior)
        vals = dict(zip(names, np.exp(log_params)))
        p.set_params(**{k: v for k, v in vals.items() if k != "noise_variance"})
        nv = vals.get("noise_variance", fix_noise_variance)
        return p, float(nv)

    def neg_evidence(log_params):
        p, nv = build(log_params)
        try:
            syy = assemble_measurement_cov(p, nv, geometry, subset)
            val = gaussian_logpdf_zero_mean(y, syy)
        except (np.linalg.LinAlgError, Exception) as exc:  # noqa: BLE001
            if isinstance(exc, KeyboardInterrupt):
                raise
            trace.append((dict(zip(names, np.exp(log_params))), -np.inf))
            return 1e12
        trace.append((dict(zip(names, np.exp(log_params))), val))
        return -val

    # deterministic starts around data-scaled initial values
    row_energy = float(np.mean(stacked_operator(geometry, subset).power(2).sum(axis=1)))
    base = {
        "variance": max(second_moment / max(row_energy, 1e-12), 1e-8),
        "lengthscale": max(min(geometry.height, geometry.width) / 8.0, 1.0),
        "noise_variance": max(0.01 * second_moment, 1e-10),
    }
    rng = np.random.default_rng(seed)
    starts = [np.log([base[n] for n in names])]
    for _ in range(n_starts - 1):
        starts.append(starts[0] + rng.uniform(-2.0, 2.0, size=len(names)))

    max_len = 10.0 * max(geometry.height, geometry.width)
    bounds = []
    for n in names:
        if n == "lengthscale":
            bounds.append((math.log(0.1), math.log(max_len)))
        else:
            bounds.append(_BOUNDS[n] or (-20.0, 20.0))

    best = None
    for x0 in starts:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        res = minimize(neg_evidence, x0, method="Powell", bounds=bounds,
                       options={"maxiter": maxiter, "xtol": 1e-4, "ftol": 1e-6})
        if best is None or res.fun < best.fun:
            best = res
    if not math.isfinite(best.fun) or best.fun >= 1e12:
        raise RuntimeError(f"evidence optimisation diverged; trace length {len(trace)}")

    fitted, noise_variance = build(best.x)
    hypers = dict(fitted.hyperparameters())
    hypers["noise_variance"] = noise_variance
    report = EvidenceReport(log_evidence=float(-best.fun), hyperparameters=hypers,
                            trace=trace)
    return fitted, GaussianNoise(noise_variance), report
