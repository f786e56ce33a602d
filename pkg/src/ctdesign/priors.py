"""Matrix-free Gaussian image priors.

Every prior here is represented through a linear feature map Phi with
x = Phi @ xi, xi ~ N(0, I), so that Sigma_xx = Phi Phi^T. This single
structure gives matvecs, exact sampling, and cheap assembly of measured
covariances (rows Phi^T a_i) for all prior families:

* ``IsotropicPrior``: Phi = sigma_x * I.
* ``Matern12Prior``: Phi is the spectral factor of a circulant embedding
  of the exponential kernel on the pixel grid (FFT matvecs).

The linearised-network prior (Jacobian feature map) lives in
:mod:`ctdesign.lindip` and follows the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

__all__ = [
    "GaussianNoise",
    "FeatureMapPrior",
    "IsotropicPrior",
    "Matern12Prior",
    "CirculantEmbedding",
    "EmbeddingError",
    "matern_cov_entry",
]


@dataclass
class GaussianNoise:
    """I.i.d. measurement noise N(0, variance I)."""

    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("noise variance must be > 0")


class FeatureMapPrior(BaseEstimator):
    """Zero-mean Gaussian prior given by x = Phi xi with xi ~ N(0, I).

    Subclasses implement ``apply`` / ``apply_adjoint`` for batched inputs
    (trailing axis is the vector axis). ``matvec`` and ``sample`` follow.
    """

    coef_dim: int
    d_x: int

    def apply(self, coefs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply_adjoint(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Sigma_xx v (batched over leading axes)."""
        return self.apply(self.apply_adjoint(v))

    def sample(self, seed, n_samples: int = 1) -> np.ndarray:
        """n_samples draws from N(0, Sigma_xx), shape (n_samples, d_x)."""
        if n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((n_samples, self.coef_dim))
        return self.apply(xi)

    def hyperparameters(self) -> dict:
        return self.get_params()

    def fit(self, geometry, subset, y, noise_variance=None, seed=0):
        """Refit hyperparameters by evidence maximisation on pilot data."""
        from .evidence import fit_hyperparameters

        fitted, noise, report = fit_hyperparameters(
            self, geometry, subset, y, fix_noise_variance=noise_variance, seed=seed
        )
        self.set_params(**fitted.get_params())
        self.noise_ = noise
        self.evidence_report_ = report
        return self


class IsotropicPrior(FeatureMapPrior):
    """Sigma_xx = variance * I: uncorrelated pixels."""

    def __init__(self, shape, variance=1.0):
        self.shape = tuple(shape)
        self.variance = float(variance)

    @property
    def d_x(self):
        return self.shape[0] * self.shape[1]

    @property
    def coef_dim(self):
        return self.d_x

    def _check(self):
        if self.variance <= 0:
            raise ValueError("pixel variance must be > 0")

    def apply(self, coefs):
        self._check()
        coefs = np.asarray(coefs, dtype=float)
        return np.sqrt(self.variance) * coefs

    def apply_adjoint(self, images):
        return self.apply(images)

    def matvec(self, v):
        self._check()
        return self.variance * np.asarray(v, dtype=float)


class EmbeddingError(RuntimeError):
    """Circulant embedding kept a significantly indefinite spectrum."""


class CirculantEmbedding:
    """Even periodic embedding of a stationary kernel on an h x w grid.

    Provides the spectral factor Phi of the embedded covariance: real
    coefficient vectors of length 2 * N1 * N2 map to h x w fields whose
    covariance is exactly the kernel matrix (up to clipped spectral mass).
    """

    def __init__(self, kernel_1d, h: int, w: int, max_enlarge: int = 2,
                 clip_tol: float = 1e-8, max_clipped_mass: float = 1e-2):
        self.h, self.w = int(h), int(w)
        last_exc = None
        for level in range(max_enlarge + 1):
            n1, n2 = 2 * h * 2**level, 2 * w * 2**level
            d1 = np.minimum(np.arange(n1), n1 - np.arange(n1))
            d2 = np.minimum(np.arange(n2), n2 - np.arange(n2))
            dist = np.hypot(d1[:, None], d2[None, :])
            lam = np.fft.fft2(kernel_1d(dist)).real
            neg = lam[lam < 0]
            clipped = -neg.sum() / max(lam[lam > 0].sum(), 1e-300)
            if lam.min() >= -clip_tol * lam.max():
                clipped = 0.0
            if clipped <= max_clipped_mass:
                self.n1, self.n2 = n1, n2
                self.sqrt_lam = np.sqrt(np.clip(lam, 0.0, None))
                self.clipped_mass = float(clipped)
                return
            last_exc = EmbeddingError(
                f"embedding spectrum indefinite after {level} enlargements: "
                f"clipped mass {clipped:.3e}, min eig {lam.min():.3e}"
            )
        raise last_exc

    @property
    def coef_dim(self):
        return 2 * self.n1 * self.n2

    def apply(self, coefs):
        coefs = np.asarray(coefs, dtype=float)
        batch = coefs.shape[:-1]
        ne = self.n1 * self.n2
        xi = (coefs[..., :ne] + 1j * coefs[..., ne:]).reshape(batch + (self.n1, self.n2))
        z = np.sqrt(ne) * np.fft.ifft2(self.sqrt_lam * xi)
        return z.real[..., : self.h, : self.w].reshape(batch + (self.h * self.w,))

    def apply_adjoint(self, images):
        images = np.asarray(images, dtype=float)
        batch = images.shape[:-1]
        ne = self.n1 * self.n2
        padded = np.zeros(batch + (self.n1, self.n2))
        padded[..., : self.h, : self.w] = images.reshape(batch + (self.h, self.w))
        u = self.sqrt_lam * np.fft.fft2(padded) / np.sqrt(ne)
        u = u.reshape(batch + (ne,))
        return np.concatenate([u.real, u.imag], axis=-1)


def matern_cov_entry(variance, lengthscale, ij, ij2):
    """Exponential-kernel covariance between two pixel locations."""
    dist = np.hypot(ij[0] - ij2[0], ij[1] - ij2[1])
    return variance * np.exp(-dist / lengthscale)


class Matern12Prior(FeatureMapPrior):
    """Exponential-kernel prior on the pixel grid, FFT-factorised."""

    def __init__(self, shape, variance=1.0, lengthscale=1.0):
        self.shape = tuple(shape)
        self.variance = float(variance)
        self.lengthscale = float(lengthscale)

    @property
    def d_x(self):
        return self.shape[0] * self.shape[1]

    @property
    def coef_dim(self):
        return self._embedding().coef_dim

    def _embedding(self) -> CirculantEmbedding:
        if self.variance <= 0 or self.lengthscale <= 0:
            raise ValueError("variance and lengthscale must be > 0")
        key = (self.shape, self.variance, self.lengthscale)
        if getattr(self, "_emb_key", None) != key:
            var, ell = self.variance, self.lengthscale
            self._emb = CirculantEmbedding(
                lambda d: var * np.exp(-d / ell), self.shape[0], self.shape[1]
            )
            self._emb_key = key
        return self._emb

    def cov_entry(self, ij, ij2):
        return matern_cov_entry(self.variance, self.lengthscale, ij, ij2)

    def apply(self, coefs):
        return self._embedding().apply(coefs)

    def apply_adjoint(self, images):
        return self._embedding().apply_adjoint(images)
