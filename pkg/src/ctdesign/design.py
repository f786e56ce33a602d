"""Greedy sequential angle selection.

Posterior bookkeeping runs entirely through the measured feature matrix
M = A Phi (rows Phi^T a_i), where Phi is the prior's feature map: the
measurement covariance is Sigma_yy = M M^T + sigma_y^2 I, Matheron
posterior samples need one feature-map application per batch, and adding
an angle extends the Cholesky factor by d_p rows without refactorising.
Per-angle covariance blocks are estimated from the pseudo-measurement
samples and scored by expected information gain (log-determinant) or
expected squared error (trace).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from sklearn.base import BaseEstimator

from .geometry import ScanGeometry, AngleSubset, angle_block, stacked_operator

__all__ = [
    "DesignState",
    "PseudoSampleBatch",
    "DesignResult",
    "init_state",
    "feature_rows",
    "matheron_samples",
    "estimate_block",
    "eig_score",
    "ese_score",
    "select_next",
    "update_state",
    "run_design",
    "equidistant_design",
    "random_design",
    "GreedyAngleDesigner",
]

JITTER_START = 1e-6
JITTER_MAX = 0.10


@dataclass
class DesignState:
    geometry: ScanGeometry
    prior: object
    noise_variance: float
    chosen: AngleSubset
    m_rows: np.ndarray          # (d_y, coef_dim), rows Phi^T a_i
    syy: np.ndarray             # dense Sigma_yy incl. noise, excl. jitter
    chol: np.ndarray            # lower factor of syy + jitter * I
    jitter: float               # absolute jitter on the diagonal
    step: int = 0
    measurements: list = field(default_factory=list)  # per chosen angle

    @property
    def d_y(self):
        return self.geometry.d_p * len(self.chosen)


@dataclass
class PseudoSampleBatch:
    samples: np.ndarray         # (K, d_p * n_unused), per-angle chunks
    unused: list
    d_p: int
    seed: int

    def chunk(self, angle_index: int) -> np.ndarray:
        pos = self.unused.index(angle_index)
        return self.samples[:, pos * self.d_p: (pos + 1) * self.d_p]


@dataclass
class DesignResult:
    pilot: AngleSubset
    selected: list
    score_history: list         # per step: dict angle_index -> score
    objective: str
    state: DesignState
    step_seconds: list = field(default_factory=list)


def feature_rows(prior, geometry: ScanGeometry, angles) -> np.ndarray:
    """Rows Phi^T a_i for the stacked operator over the given angles."""
    if isinstance(angles, AngleSubset):
        angles = list(angles)
    rows = np.vstack([angle_block(geometry, a).rows.toarray() for a in angles])
    return prior.apply_adjoint(rows)


def _factor_with_jitter(syy: np.ndarray, start_frac: float = JITTER_START,
                        max_frac: float = JITTER_MAX):
    """Cholesky with an escalating relative diagonal jitter."""
    mean_diag = float(np.mean(np.diag(syy)))
    frac = start_frac
    while True:
        jitter = frac * mean_diag
        try:
            chol = sla.cholesky(syy + jitter * np.eye(syy.shape[0]), lower=True)
            return chol, jitter
        except sla.LinAlgError:
            if frac >= max_frac:
                raise np.linalg.LinAlgError(
                    f"measurement covariance indefinite at jitter {frac:.0%} "
                    "of the diagonal mean"
                )
            frac = min(2.0 * frac, max_frac)


def init_state(prior, noise, geometry: ScanGeometry, pilot: AngleSubset,
               source=None) -> DesignState:
    """Build and factorise the pilot measurement covariance."""
    if len(pilot) == 0:
        raise ValueError("pilot subset must be nonempty")
    noise_variance = getattr(noise, "variance", None) or float(noise)
    m = feature_rows(prior, geometry, pilot)
    # the Gram matrix and its factor live in float64 even when the feature
    # rows are float32: Sigma_yy is ill-conditioned once angles accumulate,
    # and a float32 Cholesky only succeeds with jitter large enough to rival
    # the noise variance, which tempers the posterior and skews the scores
    syy = (m @ m.T).astype(np.float64)
    syy = 0.5 * (syy + syy.T)
    syy[np.diag_indices_from(syy)] += noise_variance
    chol, jitter = _factor_with_jitter(syy)
    measurements = []
    if source is not None:
        measurements = [np.asarray(source(a), dtype=float) for a in pilot]
    return DesignState(
        geometry=geometry, prior=prior, noise_variance=noise_variance,
        chosen=pilot, m_rows=m, syy=syy, chol=chol, jitter=jitter,
        measurements=measurements,
    )


def matheron_samples(state: DesignState, n_samples: int, seed: int) -> PseudoSampleBatch:
    """K pathwise posterior pseudo-measurements over all unused angles.

    Each sample is Abar (x_k - Sigma_xx A^T Sigma_yy^-1 (eta_k + A x_k))
    with x_k = Phi eps_k; in feature coordinates this is one feature-map
    application per sample plus triangular solves.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    unused = state.chosen.complement()
    if len(unused) == 0:
        raise ValueError("no unused angles to sample")
    rng = np.random.default_rng(seed)
    coef_dim = state.m_rows.shape[1]
    dtype = state.m_rows.dtype  # float32 feature maps stay float32 throughout
    eps = rng.standard_normal((n_samples, coef_dim)).astype(dtype, copy=False)
    eta = (np.sqrt(state.noise_variance)
           * rng.standard_normal((n_samples, state.d_y))).astype(dtype, copy=False)

    ax = eps @ state.m_rows.T                     # A x_k
    rhs = (eta + ax).T.astype(state.chol.dtype)
    w = sla.cho_solve((state.chol, True), rhs).T  # Sigma_yy^-1 (eta + A x)
    coefs = eps - w.astype(dtype) @ state.m_rows  # eps - M^T w
    z = state.prior.apply(coefs)                  # posterior image samples
    abar = stacked_operator(state.geometry, unused)
    samples = (abar @ z.T).T
    return PseudoSampleBatch(samples=np.ascontiguousarray(samples),
                             unused=list(unused), d_p=state.geometry.d_p,
                             seed=int(seed))


def estimate_block(batch: PseudoSampleBatch, angle_index: int) -> np.ndarray:
    """Monte-Carlo estimate of A^beta Sigma_x|y (A^beta)^T for one angle."""
    y = batch.chunk(angle_index)
    block = y.T @ y / y.shape[0]
    return 0.5 * (block + block.T)


def eig_score(block: np.ndarray, noise_variance: float) -> float:
    """logdet(sigma_y^2 I + block); the angle-independent constant is dropped."""
    block = 0.5 * (block + block.T)
    sign, logdet = np.linalg.slogdet(block + noise_variance * np.eye(block.shape[0]))
    value = float(sign * logdet)
    if sign <= 0 or not np.isfinite(value):
        raise np.linalg.LinAlgError("non-finite log-determinant in EIG score")
    return value


def ese_score(block: np.ndarray) -> float:
    """trace(block); the angle-independent constant is dropped."""
    return float(np.trace(block))


def select_next(scores: dict) -> int:
    """Argmax angle index; ties break to the lowest index."""
    if not scores:
        raise ValueError("empty score table")
    best = max(sorted(scores), key=lambda a: (scores[a], -a))
    return int(best)


def update_state(state: DesignState, new_angle: int,
                 measurements: np.ndarray | None = None) -> DesignState:
    """Extend Sigma_yy and its factor by the new angle's d_p rows."""
    if new_angle in state.chosen.indices:
        raise ValueError(f"angle {new_angle} already chosen")
    d_p = state.geometry.d_p
    m_new = feature_rows(state.prior, state.geometry, [new_angle])

    cross = (state.m_rows @ m_new.T).astype(np.float64)   # (d_y, d_p)
    corner = (m_new @ m_new.T).astype(np.float64)
    corner = 0.5 * (corner + corner.T)
    corner[np.diag_indices_from(corner)] += state.noise_variance

    d_old = state.d_y
    syy = np.empty((d_old + d_p, d_old + d_p))
    syy[:d_old, :d_old] = state.syy
    syy[:d_old, d_old:] = cross
    syy[d_old:, :d_old] = cross.T
    syy[d_old:, d_old:] = corner

    # block extension of the lower factor; refactorise only on failure
    l21 = sla.solve_triangular(state.chol, cross, lower=True).T
    schur = corner + state.jitter * np.eye(d_p) - l21 @ l21.T
    try:
        l22 = sla.cholesky(0.5 * (schur + schur.T), lower=True)
        chol = np.zeros_like(syy)
        chol[:d_old, :d_old] = state.chol
        chol[d_old:, :d_old] = l21
        chol[d_old:, d_old:] = l22
        jitter = state.jitter
    except sla.LinAlgError:
        mean_diag = float(np.mean(np.diag(syy)))
        frac = min(max(2.0 * state.jitter / mean_diag, JITTER_START), JITTER_MAX)
        chol, jitter = _factor_with_jitter(syy, start_frac=frac)

    new_measurements = list(state.measurements)
    if measurements is not None:
        new_measurements.append(np.asarray(measurements, dtype=float))
    return DesignState(
        geometry=state.geometry, prior=state.prior,
        noise_variance=state.noise_variance,
        chosen=state.chosen.extended(new_angle),
        m_rows=np.vstack([state.m_rows, m_new]),
        syy=syy, chol=chol, jitter=jitter, step=state.step + 1,
        measurements=new_measurements,
    )


def run_design(prior, noise, geometry: ScanGeometry, pilot: AngleSubset,
               objective: str = "ese", n_steps: int = 15, n_samples: int = 1000,
               seed: int = 0, source=None, retrain_every: int | None = None,
               retrain_fn=None) -> DesignResult:
    """Greedy loop: sample, score every unused angle, pick, update.

    ``source(angle_index)`` supplies measurements for chosen angles; it is
    only consulted for bookkeeping and for ``retrain_fn``, which (when
    given) rebuilds the prior from the accumulated data every
    ``retrain_every`` acquired angles.
    """
    if objective not in ("eig", "ese"):
        raise ValueError(f"unknown objective {objective!r}")
    state = init_state(prior, noise, geometry, pilot, source=source)
    selected = []
    history = []
    step_seconds = []
    rng = np.random.default_rng(seed)

    for step in range(n_steps):
        tic = time.perf_counter()
        batch = matheron_samples(state, n_samples, seed=int(rng.integers(2**31)))
        scores = {}
        for angle in batch.unused:
            block = estimate_block(batch, angle)
            if objective == "eig":
                scores[angle] = eig_score(block, state.noise_variance)
            else:
                scores[angle] = ese_score(block)
        choice = select_next(scores)
        history.append(scores)
        selected.append(choice)
        y_new = None if source is None else np.asarray(source(choice), dtype=float)
        state = update_state(state, choice, measurements=y_new)
        step_seconds.append(time.perf_counter() - tic)

        due = retrain_every and (step + 1) % retrain_every == 0
        if due and retrain_fn is not None and step + 1 < n_steps:
            if source is None:
                raise ValueError("retraining requires a measurement source")
            new_prior = retrain_fn(state.chosen, np.concatenate(state.measurements))
            state = init_state(new_prior, state.noise_variance, geometry,
                               state.chosen, source=source)
    return DesignResult(pilot=pilot, selected=selected, score_history=history,
                        objective=objective, state=state,
                        step_seconds=step_seconds)


def equidistant_design(n: int, n_candidates: int) -> AngleSubset:
    if n > n_candidates:
        raise ValueError("n exceeds candidate count")
    idx = [(k * n_candidates) // n for k in range(n)]
    return AngleSubset(idx, n_candidates)


def random_design(n: int, n_candidates: int, seed: int) -> AngleSubset:
    if n > n_candidates:
        raise ValueError("n exceeds candidate count")
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(n_candidates, size=n, replace=False).tolist())
    return AngleSubset(idx, n_candidates)


class GreedyAngleDesigner(BaseEstimator):
    """Estimator-style wrapper around :func:`run_design`."""

    def __init__(self, objective="ese", n_steps=15, n_samples=1000, seed=0,
                 retrain_every=None):
        self.objective = objective
        self.n_steps = n_steps
        self.n_samples = n_samples
        self.seed = seed
        self.retrain_every = retrain_every

    def fit(self, prior, noise, geometry, pilot, source=None, retrain_fn=None):
        result = run_design(
            prior, noise, geometry, pilot,
            objective=self.objective, n_steps=self.n_steps,
            n_samples=self.n_samples, seed=self.seed, source=source,
            retrain_every=self.retrain_every, retrain_fn=retrain_fn,
        )
        self.result_ = result
        self.selected_ = result.selected
        self.score_history_ = result.score_history
        return self

    def predict(self):
        """Full design: pilot plus selected angles, in acquisition order."""
        if not hasattr(self, "result_"):
            raise RuntimeError("designer is not fitted")
        return list(self.result_.pilot) + list(self.selected_)
