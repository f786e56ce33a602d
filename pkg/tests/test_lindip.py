import numpy as np
import pytest

from ctdesign.evidence import assemble_measurement_cov, gaussian_logpdf_zero_mean
from ctdesign.geometry import AngleSubset, build_geometry, stacked_operator
from ctdesign.lindip import (
    BlockDiagonalPrior,
    GPrior,
    LinearisedNetworkPrior,
    build_gprior,
    compute_g,
    compute_gprior_scale,
    fit_block_prior,
    measured_jacobian,
)
from ctdesign.network import DipNetwork, NetworkSpec


@pytest.fixture(scope="module")
def setup():
    geo = build_geometry(16, 16, 10)
    subset = AngleSubset([0, 2, 4, 6, 8], 10)
    net = DipNetwork(NetworkSpec(16, 16, scales=2, channels=4, in_channels=2),
                     seed=0)
    jac = net.jacobian()
    dense_j = jac.jvp(np.eye(jac.d_theta))  # rows J v_e -> J^T dense? see below
    # jvp over the identity returns J columns as rows, so dense J = transpose
    return geo, subset, net, jac, dense_j.T


class TestThetaPriors:
    def test_block_variance_vector(self):
        slices = {"a": slice(0, 2), "b": slice(2, 5)}
        prior = BlockDiagonalPrior({"a": 4.0, "b": 9.0}, slices)
        assert np.array_equal(prior.variance_vector(5), [4, 4, 9, 9, 9])

    def test_block_gap_rejected(self):
        prior = BlockDiagonalPrior({"a": 1.0}, {"a": slice(0, 2)})
        with pytest.raises(ValueError):
            prior.variance_vector(3)

    def test_nonpositive_variance_rejected(self):
        prior = BlockDiagonalPrior({"a": 0.0}, {"a": slice(0, 3)})
        with pytest.raises(ValueError):
            prior.variance_vector(3)

    def test_gprior_vector(self):
        p = GPrior(g=6.0, s=np.array([2.0, 3.0]))
        assert np.array_equal(p.variance_vector(2), [3.0, 2.0])
        with pytest.raises(ValueError):
            GPrior(g=-1.0, s=np.ones(2))
        with pytest.raises(ValueError):
            GPrior(g=1.0, s=np.array([1.0, 0.0]))


class TestMeasuredJacobian:
    def test_matches_dense_product(self, setup):
        geo, subset, _, jac, dense_j = setup
        a = stacked_operator(geo, subset).toarray()
        m = measured_jacobian(jac, geo, subset)
        assert m.shape == (a.shape[0], jac.d_theta)
        assert np.linalg.norm(m - a @ dense_j) / np.linalg.norm(a @ dense_j) < 1e-10


class TestGPriorFitting:
    def test_scale_matches_column_energy(self, setup):
        geo, subset, _, jac, dense_j = setup
        a = stacked_operator(geo, subset).toarray()
        m = a @ dense_j
        s = compute_gprior_scale(jac, geo, subset)
        assert np.allclose(s, np.maximum(np.mean(m**2, axis=0),
                                         1e-12 * np.mean(m**2)), rtol=1e-10)

    def test_g_hand_example(self):
        # d_y = 2, d_theta = 1, y = (2, 2), sigma^2 = 1:
        # g = (4 - 1 + 4 - 1) / (2 * 1) = 3
        assert compute_g(np.array([2.0, 2.0]), 1.0, 1) == pytest.approx(3.0)

    def test_g_rejects_overwhelming_noise(self):
        with pytest.raises(ValueError):
            compute_g(np.array([0.1, 0.1]), 1.0, 4)

    def test_gprior_variance_matching_identity(self, setup):
        # with Sigma_theta = g s^-1 I the expected per-ray signal energy
        # averaged over rays equals g * d_theta; total second moment matches
        # the estimator that produced g
        geo, subset, _, jac, dense_j = setup
        rng = np.random.default_rng(0)
        y = rng.normal(size=stacked_operator(geo, subset).shape[0])
        prior = build_gprior(jac, geo, subset, y, noise_variance=0.01)
        a = stacked_operator(geo, subset).toarray()
        m = a @ dense_j
        signal_cov = m @ np.diag(prior.variance_vector(jac.d_theta)) @ m.T
        lhs = np.trace(signal_cov) / m.shape[0]
        rhs = float(np.mean(y**2) - 0.01)
        assert lhs == pytest.approx(rhs, rel=1e-8)


class TestLinearisedPrior:
    def test_matvec_matches_dense_oracle(self, setup):
        _, _, _, jac, dense_j = setup
        var = np.linspace(0.5, 1.5, jac.d_theta)
        prior = LinearisedNetworkPrior(
            jac, BlockDiagonalPrior({"all": 1.0}, {"all": slice(0, jac.d_theta)})
        )
        prior_var = LinearisedNetworkPrior(jac, GPrior(g=1.0, s=1.0 / var))
        rng = np.random.default_rng(1)
        v = rng.normal(size=jac.d_x)
        ref = dense_j @ (var * (dense_j.T @ v))
        assert np.linalg.norm(prior_var.matvec(v) - ref) / np.linalg.norm(ref) < 1e-10
        ref_unit = dense_j @ (dense_j.T @ v)
        got = prior.matvec(v)
        assert np.linalg.norm(got - ref_unit) / np.linalg.norm(ref_unit) < 1e-10

    def test_sample_covariance(self, setup):
        _, _, _, jac, dense_j = setup
        prior = LinearisedNetworkPrior(
            jac, BlockDiagonalPrior({"all": 2.0}, {"all": slice(0, jac.d_theta)})
        )
        samples = prior.sample(seed=0, n_samples=4000)
        emp = samples.T @ samples / 4000
        ref = 2.0 * dense_j @ dense_j.T
        assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.12

    def test_adjointness(self, setup):
        _, _, _, jac, _ = setup
        prior = LinearisedNetworkPrior(jac, GPrior(g=0.7, s=np.ones(jac.d_theta)))
        rng = np.random.default_rng(2)
        c = rng.normal(size=jac.d_theta)
        u = rng.normal(size=jac.d_x)
        assert float(u @ prior.apply(c)) == pytest.approx(
            float(prior.apply_adjoint(u) @ c), rel=1e-12)


class TestBlockPriorFit:
    def test_fit_increases_evidence_and_matches_grid(self, setup):
        geo, subset, net, jac, _ = setup
        slices = {"all": slice(0, jac.d_theta)}
        # generate y from a known prior variance so the fit has a target
        true_prior = LinearisedNetworkPrior(
            jac, BlockDiagonalPrior({"all": 0.05}, slices))
        rng = np.random.default_rng(3)
        x = true_prior.sample(seed=3, n_samples=1)[0]
        a = stacked_operator(geo, subset)
        y = a @ x + 0.05 * rng.normal(size=a.shape[0])
        fitted, report = fit_block_prior(jac, slices, geo, subset, y,
                                         noise_variance=0.0025, n_starts=2,
                                         maxiter=40, seed=0)

        def ev(v):
            prior = LinearisedNetworkPrior(
                jac, BlockDiagonalPrior({"all": v}, slices))
            syy = assemble_measurement_cov(prior, 0.0025, geo, subset)
            return gaussian_logpdf_zero_mean(y, syy)

        # 1-D grid-search oracle over a log-spaced grid
        grid = np.exp(np.linspace(np.log(1e-4), np.log(10.0), 40))
        grid_best = max(grid, key=ev)
        v_fit = fitted.block_variances["all"]
        assert report.log_evidence >= ev(grid_best) - 1e-6
        assert abs(np.log(v_fit) - np.log(grid_best)) < np.log(3.0)

    def test_per_block_fit_runs_and_reports(self, setup):
        geo, subset, net, jac, _ = setup
        slices = net.block_slices()
        rng = np.random.default_rng(4)
        a = stacked_operator(geo, subset)
        y = rng.normal(size=a.shape[0])
        fitted, report = fit_block_prior(jac, slices, geo, subset, y,
                                         noise_variance=0.01, n_starts=1,
                                         maxiter=15, seed=0)
        assert set(fitted.block_variances) == set(slices)
        assert all(v > 0 for v in fitted.block_variances.values())
        assert np.isfinite(report.log_evidence)
        assert len(report.trace) > 0
