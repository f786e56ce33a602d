"""Linearised-network image prior: weight-space priors pushed through J.

The image prior is x = J theta with theta ~ N(0, Sigma_theta), so
Sigma_xx = J Sigma_theta J^T. Both supported weight covariances are
diagonal in the flat parameter vector: a per-block constant variance, or
the g-prior g * s^-1 with s the mean squared column of the measured
Jacobian A J. Feature-map form: Phi = J Sigma_theta^{1/2}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .evidence import EvidenceReport, gaussian_logpdf_zero_mean
from .geometry import ScanGeometry, AngleSubset, stacked_operator
from .network import JacobianOperator
from .priors import FeatureMapPrior

__all__ = [
    "BlockDiagonalPrior",
    "GPrior",
    "LinearisedNetworkPrior",
    "measured_jacobian",
    "compute_gprior_scale",
    "compute_g",
    "build_gprior",
    "fit_block_prior",
]


@dataclass
class BlockDiagonalPrior:
    """One variance per network block; diagonal over the flat theta."""

    block_variances: dict  # block name -> variance
    block_slices: dict     # block name -> slice into the flat theta

    def variance_vector(self, d_theta: int) -> np.ndarray:
        out = np.empty(d_theta)
        out.fill(np.nan)
        for name, sl in self.block_slices.items():
            v = float(self.block_variances[name])
            if v <= 0:
                raise ValueError(f"block variance for {name!r} must be > 0")
            out[sl] = v
        if np.isnan(out).any():
            raise ValueError("block slices do not cover the parameter vector")
        return out

    def describe(self) -> dict:
        return {f"var[{k}]": float(v) for k, v in self.block_variances.items()}


@dataclass
class GPrior:
    """Sigma_theta = g * s^-1 I (elementwise over the diagonal)."""

    g: float
    s: np.ndarray

    def __post_init__(self):
        if self.g <= 0:
            raise ValueError("g must be > 0")
        if np.any(self.s <= 0):
            raise ValueError("scale vector s must be positive")

    def variance_vector(self, d_theta: int) -> np.ndarray:
        if self.s.shape != (d_theta,):
            raise ValueError("scale vector length mismatch")
        return self.g / self.s

    def describe(self) -> dict:
        return {"g": float(self.g), "mean_s": float(np.mean(self.s))}


def measured_jacobian(jac_op: JacobianOperator, geometry: ScanGeometry,
                      subset: AngleSubset) -> np.ndarray:
    """Dense M = A J (d_y x d_theta), rows via batched vjps of A's rows."""
    op = stacked_operator(geometry, subset)
    return jac_op.vjp(op.toarray())


def compute_gprior_scale(jac_op: JacobianOperator, geometry: ScanGeometry,
                         subset: AngleSubset, m_rows: np.ndarray | None = None,
                         floor_rel: float = 1e-12) -> np.ndarray:
    """s_j = d_y^-1 sum_i [A J]_ij^2, floored at floor_rel * mean(s).

    Depends only on the operator and the network, never on measured values.
    """
    if len(subset) == 0:
        raise ValueError("empty angle subset")
    m = m_rows if m_rows is not None else measured_jacobian(jac_op, geometry, subset)
    s = np.mean(m**2, axis=0)
    floor = floor_rel * float(np.mean(s))
    n_floored = int(np.sum(s < floor))
    s = np.maximum(s, max(floor, np.finfo(float).tiny))
    compute_gprior_scale.last_floored = n_floored  # diagnostic
    return s


def compute_g(y_pilot: np.ndarray, noise_variance: float, d_theta: int) -> float:
    """g = (d_y * d_theta)^-1 sum_i (y_i^2 - sigma_y^2) from the pilot scan."""
    y = np.asarray(y_pilot, dtype=float)
    g = float(np.sum(y**2 - noise_variance) / (y.size * d_theta))
    if g <= 0:
        raise ValueError(
            "g <= 0: noise variance exceeds the pilot second moment; "
            "review sigma_y^2"
        )
    return g


def build_gprior(jac_op: JacobianOperator, geometry: ScanGeometry,
                 subset: AngleSubset, y_pilot: np.ndarray,
                 noise_variance: float, m_rows: np.ndarray | None = None) -> GPrior:
    s = compute_gprior_scale(jac_op, geometry, subset, m_rows=m_rows)
    g = compute_g(y_pilot, noise_variance, jac_op.d_theta)
    return GPrior(g=g, s=s)


class LinearisedNetworkPrior(FeatureMapPrior):
    """Feature-map prior Phi = J Sigma_theta^{1/2} around a trained network."""

    def __init__(self, jacobian: JacobianOperator, theta_prior):
        self.jacobian = jacobian
        self.theta_prior = theta_prior

    @property
    def d_x(self):
        return self.jacobian.d_x

    @property
    def coef_dim(self):
        return self.jacobian.d_theta

    @property
    def _sqrt_var(self):
        sv = np.sqrt(self.theta_prior.variance_vector(self.jacobian.d_theta))
        return sv.astype(self.jacobian.out_dtype, copy=False)

    def apply(self, coefs):
        dtype = self.jacobian.out_dtype
        return self.jacobian.jvp(np.asarray(coefs, dtype=dtype) * self._sqrt_var)

    def apply_adjoint(self, images):
        return self.jacobian.vjp(images) * self._sqrt_var

    def hyperparameters(self) -> dict:
        return self.theta_prior.describe()


def fit_block_prior(jac_op: JacobianOperator, block_slices: dict,
                    geometry: ScanGeometry, subset: AngleSubset, y: np.ndarray,
                    noise_variance: float, m_rows: np.ndarray | None = None,
                    n_starts: int = 2, maxiter: int = 40, seed: int = 0):
    """Per-block variances maximising the pilot evidence.

    Precomputes per-block Grams G_b = M_b M_b^T so that each evidence
    evaluation is a cheap linear combination plus a Cholesky factorisation.
    Returns (BlockDiagonalPrior, EvidenceReport).
    """
    y = np.asarray(y, dtype=float)
    m = m_rows if m_rows is not None else measured_jacobian(jac_op, geometry, subset)
    names = list(block_slices)
    # float64 Grams: float32 accumulation noise can exceed the noise-variance
    # diagonal floor once block variances grow, making Sigma_yy indefinite
    grams = []
    for n in names:
        mb = m[:, block_slices[n]].astype(np.float64)
        gb = mb @ mb.T
        grams.append(0.5 * (gb + gb.T))
    d_y = y.size
    eye = np.eye(d_y)
    trace = []

    def neg_evidence(log_vars):
        vars_ = np.exp(log_vars)
        syy = noise_variance * eye.copy()
        for v, g in zip(vars_, grams):
            syy += v * g
        try:
            val = gaussian_logpdf_zero_mean(y, syy)
        except np.linalg.LinAlgError:
            val = -np.inf
        if not math.isfinite(val):
            trace.append((dict(zip(names, vars_)), -np.inf))
            return 1e12
        trace.append((dict(zip(names, vars_)), val))
        return -val

    # scale-matched equal-variance start: marginal variance ~ second moment
    total_gram_trace = sum(float(np.trace(g)) for g in grams)
    second_moment = float(np.mean(y**2))
    v0 = max((second_moment - noise_variance) * d_y / max(total_gram_trace, 1e-300),
             1e-12)
    rng = np.random.default_rng(seed)
    starts = [np.full(len(names), math.log(v0))]
    for _ in range(n_starts - 1):
        starts.append(starts[0] + rng.uniform(-2.0, 2.0, size=len(names)))

    # bound the search to a wide window around the scale-matched start so
    # the optimiser cannot wander into overflow territory
    centre = math.log(v0)
    bounds = [(centre - 12.0, centre + 12.0)] * len(names)
    best = None
    for x0 in starts:
        res = minimize(neg_evidence, x0, method="Powell", bounds=bounds,
                       options={"maxiter": maxiter, "xtol": 1e-4, "ftol": 1e-6})
        if best is None or res.fun < best.fun:
            best = res
    if not math.isfinite(best.fun) or best.fun >= 1e12:
        raise RuntimeError("block-prior evidence optimisation diverged")

    variances = dict(zip(names, np.exp(best.x)))
    prior = BlockDiagonalPrior(block_variances=variances, block_slices=dict(block_slices))
    hypers = {f"var[{k}]": float(v) for k, v in variances.items()}
    hypers["noise_variance"] = noise_variance
    report = EvidenceReport(log_evidence=float(-best.fun), hyperparameters=hypers,
                            trace=trace)
    return prior, report
