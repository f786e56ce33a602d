import numpy as np
import pytest
import scipy.linalg as sla

from ctdesign.design import (
    GreedyAngleDesigner,
    eig_score,
    equidistant_design,
    ese_score,
    estimate_block,
    init_state,
    matheron_samples,
    random_design,
    run_design,
    select_next,
    update_state,
)
from ctdesign.geometry import AngleSubset, build_geometry, stacked_operator
from ctdesign.phantoms import PhantomSpec, sample_phantom, simulate_measurements
from ctdesign.priors import FeatureMapPrior, IsotropicPrior, Matern12Prior


class ZeroPrior(FeatureMapPrior):
    """Degenerate zero-variance prior harness."""

    def __init__(self, d_x):
        self.d_x = d_x
        self.coef_dim = d_x

    def apply(self, coefs):
        return np.zeros_like(np.atleast_2d(coefs))[..., : self.d_x].reshape(
            np.shape(coefs)[:-1] + (self.d_x,)
        )

    def apply_adjoint(self, images):
        return np.zeros(np.shape(images)[:-1] + (self.coef_dim,))


def dense_posterior(prior, noise_var, geometry, subset):
    a = stacked_operator(geometry, subset).toarray()
    sxx = prior.matvec(np.eye(geometry.d_x))
    syy = a @ sxx @ a.T + noise_var * np.eye(a.shape[0])
    return sxx - sxx @ a.T @ np.linalg.solve(syy, a @ sxx), syy


@pytest.fixture(scope="module")
def toy():
    geo = build_geometry(16, 16, 10)
    pilot = AngleSubset([0, 2, 4, 6, 8], 10)
    prior = IsotropicPrior((16, 16), variance=0.8)
    return geo, pilot, prior


class TestInitState:
    def test_scalar_case(self):
        geo = build_geometry(1, 1, 1, 1)
        pilot = AngleSubset([0], 1)
        prior = IsotropicPrior((1, 1), variance=2.0)
        state = init_state(prior, 0.3, geo, pilot)
        a = stacked_operator(geo, pilot).toarray().ravel()
        assert state.syy[0, 0] == pytest.approx(2.0 * a @ a + 0.3)

    def test_factor_reproduces_dense(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        rebuilt = state.chol @ state.chol.T
        target = state.syy + state.jitter * np.eye(state.d_y)
        err = np.linalg.norm(rebuilt - target) / np.linalg.norm(target)
        assert err < 1e-10

    def test_permuted_pilot_same_spectrum(self, toy):
        geo, _, prior = toy
        s1 = init_state(prior, 0.05, geo, AngleSubset([0, 2, 4], 10))
        s2 = init_state(prior, 0.05, geo, AngleSubset([4, 0, 2], 10))
        e1 = np.sort(np.linalg.eigvalsh(s1.syy))
        e2 = np.sort(np.linalg.eigvalsh(s2.syy))
        assert np.allclose(e1, e2, rtol=1e-9)

    def test_empty_pilot_rejected(self, toy):
        geo, _, prior = toy
        with pytest.raises(ValueError):
            init_state(prior, 0.05, geo, AngleSubset([], 10))


class TestMatheron:
    def test_zero_prior_gives_zero_samples(self, toy):
        geo, pilot, _ = toy
        state = init_state(ZeroPrior(geo.d_x), 0.05, geo, pilot)
        batch = matheron_samples(state, 50, seed=0)
        assert np.all(batch.samples == 0)

    @pytest.mark.parametrize("prior_cls,kwargs", [
        (IsotropicPrior, {"variance": 0.8}),
        (Matern12Prior, {"variance": 0.8, "lengthscale": 2.5}),
    ])
    def test_covariance_matches_dense_oracle(self, toy, prior_cls, kwargs):
        geo, pilot, _ = toy
        prior = prior_cls((16, 16), **kwargs)
        state = init_state(prior, 0.05, geo, pilot)
        batch = matheron_samples(state, 50_000, seed=1)
        emp = batch.samples.T @ batch.samples / batch.samples.shape[0]
        post, _ = dense_posterior(prior, 0.05, geo, pilot)
        abar = stacked_operator(geo, pilot.complement()).toarray()
        ref = abar @ post @ abar.T
        assert np.linalg.norm(emp - ref) / np.linalg.norm(ref) < 0.05

    def test_sample_mean_shrinks(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        batch = matheron_samples(state, 40_000, seed=2)
        std = batch.samples.std(axis=0).mean()
        mean_norm = np.linalg.norm(batch.samples.mean(axis=0))
        predicted = std * np.sqrt(batch.samples.shape[1] / 40_000)
        assert mean_norm < 4 * predicted

    def test_seeded_determinism(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        a = matheron_samples(state, 10, seed=3).samples
        b = matheron_samples(state, 10, seed=3).samples
        assert np.array_equal(a, b)


class TestBlocksAndScores:
    def test_zero_batch_zero_block(self, toy):
        geo, pilot, _ = toy
        state = init_state(ZeroPrior(geo.d_x), 0.05, geo, pilot)
        batch = matheron_samples(state, 20, seed=0)
        block = estimate_block(batch, batch.unused[0])
        assert np.all(block == 0)
        assert eig_score(block, 0.3) == pytest.approx(geo.d_p * np.log(0.3))
        assert ese_score(block) == 0.0

    def test_block_symmetry(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        batch = matheron_samples(state, 100, seed=1)
        block = estimate_block(batch, batch.unused[1])
        assert np.array_equal(block, block.T)

    def test_block_converges_to_dense(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        batch = matheron_samples(state, 50_000, seed=4)
        post, _ = dense_posterior(prior, 0.05, geo, pilot)
        for angle in batch.unused[:2]:
            a_beta = stacked_operator(geo, AngleSubset([angle], 10)).toarray()
            ref = a_beta @ post @ a_beta.T
            est = estimate_block(batch, angle)
            assert np.linalg.norm(est - ref) / np.linalg.norm(ref) < 0.05

    def test_block_error_decreases_with_k(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        post, _ = dense_posterior(prior, 0.05, geo, pilot)
        angle = 1
        a_beta = stacked_operator(geo, AngleSubset([angle], 10)).toarray()
        ref = a_beta @ post @ a_beta.T
        errs = []
        for k in (200, 2000, 20000):
            rep = []
            for r in range(10):
                batch = matheron_samples(state, k, seed=100 + r)
                est = estimate_block(batch, angle)
                rep.append(np.linalg.norm(est - ref) / np.linalg.norm(ref))
            errs.append(np.mean(rep))
        assert errs[0] > errs[1] > errs[2]

    def test_scalar_logdet(self):
        assert eig_score(np.array([[2.0]]), 0.5) == pytest.approx(np.log(2.5))

    def test_trace_equals_mean_squared_chunk_norm(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        batch = matheron_samples(state, 500, seed=5)
        angle = batch.unused[0]
        trace = ese_score(estimate_block(batch, angle))
        chunk = batch.chunk(angle)
        assert trace == pytest.approx(np.mean(np.sum(chunk**2, axis=1)))


class TestSelect:
    def test_single_candidate(self):
        assert select_next({4: 1.0}) == 4

    def test_all_equal_lowest_index(self):
        assert select_next({3: 1.0, 1: 1.0, 2: 1.0}) == 1

    def test_increasing_scores_last_index(self):
        assert select_next({i: float(i) for i in range(5)}) == 4

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            select_next({})


class TestUpdateState:
    def test_extension_matches_dense_refactorisation(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        for angle in [1, 3, 5]:
            state = update_state(state, angle)
            rebuilt = state.chol @ state.chol.T
            target = state.syy + state.jitter * np.eye(state.d_y)
            assert np.linalg.norm(rebuilt - target) / np.linalg.norm(target) < 1e-8
            # dense reassembly of the full covariance
            a = stacked_operator(geo, state.chosen).toarray()
            sxx = prior.matvec(np.eye(geo.d_x))
            dense = a @ sxx @ a.T + 0.05 * np.eye(state.d_y)
            assert np.linalg.norm(state.syy - dense) / np.linalg.norm(dense) < 1e-10

    def test_entropy_never_increases(self, toy):
        geo, pilot, prior = toy
        subset = pilot
        post, _ = dense_posterior(prior, 0.05, geo, subset)
        prev = np.linalg.slogdet(post + 1e-12 * np.eye(geo.d_x))[1]
        for angle in [1, 3]:
            subset = subset.extended(angle)
            post, _ = dense_posterior(prior, 0.05, geo, subset)
            cur = np.linalg.slogdet(post + 1e-12 * np.eye(geo.d_x))[1]
            assert cur <= prev + 1e-8
            prev = cur

    def test_bookkeeping(self, toy):
        geo, pilot, prior = toy
        state = init_state(prior, 0.05, geo, pilot)
        state = update_state(state, 7)
        assert state.chosen.indices[-1] == 7
        with pytest.raises(ValueError):
            update_state(state, 7)


class TestRunDesign:
    def test_zero_steps_keeps_pilot(self, toy):
        geo, pilot, prior = toy
        result = run_design(prior, 0.05, geo, pilot, n_steps=0, n_samples=10, seed=0)
        assert result.selected == []
        assert result.state.chosen == pilot

    def test_measurement_independence_of_linear_priors(self):
        geo = build_geometry(16, 16, 12)
        pilot = AngleSubset([0, 3, 6, 9], 12)
        prior = Matern12Prior((16, 16), variance=0.5, lengthscale=2.0)
        x = sample_phantom(PhantomSpec(), 16, 16, seed=0)
        full = AngleSubset(range(12), 12)

        def make_source(noise_seed):
            sino = simulate_measurements(x, geo, full, 0.05, seed=noise_seed)
            d_p = geo.d_p

            def source(angle):
                return sino.y[angle * d_p: (angle + 1) * d_p]
            return source

        r1 = run_design(prior, 0.05, geo, pilot, n_steps=4, n_samples=400,
                        seed=11, source=make_source(1))
        r2 = run_design(prior, 0.05, geo, pilot, n_steps=4, n_samples=400,
                        seed=11, source=make_source(2))
        assert r1.selected == r2.selected

    def test_history_shape(self, toy):
        geo, pilot, prior = toy
        result = run_design(prior, 0.05, geo, pilot, n_steps=3, n_samples=50, seed=1)
        assert len(result.score_history) == 3
        assert len(result.score_history[0]) == 5  # 10 candidates - 5 pilot
        assert len(result.score_history[2]) == 3

    def test_objective_validation(self, toy):
        geo, pilot, prior = toy
        with pytest.raises(ValueError):
            run_design(prior, 0.05, geo, pilot, objective="bogus")

    def test_estimator_wrapper(self, toy):
        geo, pilot, prior = toy
        designer = GreedyAngleDesigner(objective="ese", n_steps=2, n_samples=50, seed=0)
        designer.fit(prior, 0.05, geo, pilot)
        assert len(designer.selected_) == 2
        assert designer.predict() == list(pilot) + designer.selected_
        assert designer.get_params()["n_steps"] == 2


class TestEseEigAgreementSinglePixel:
    def test_argmax_agreement_over_ten_steps(self):
        # with d_p = 1 both objectives are monotone transforms of the same scalar
        geo = build_geometry(12, 12, 14, d_p=1)
        pilot = AngleSubset([0, 7], 14)
        prior = IsotropicPrior((12, 12), variance=1.0)
        state = init_state(prior, 0.05, geo, pilot)
        for step in range(10):
            batch = matheron_samples(state, 300, seed=50 + step)
            eig = {a: eig_score(estimate_block(batch, a), 0.05) for a in batch.unused}
            ese = {a: ese_score(estimate_block(batch, a)) for a in batch.unused}
            assert select_next(eig) == select_next(ese)
            state = update_state(state, select_next(ese))


class TestBaselines:
    def test_equidistant_all(self):
        assert equidistant_design(6, 6).indices == list(range(6))

    def test_equidistant_five_of_200(self):
        assert equidistant_design(5, 200).indices == [0, 40, 80, 120, 160]

    def test_random_reproducible(self):
        a = random_design(7, 100, seed=3)
        b = random_design(7, 100, seed=3)
        assert a.indices == b.indices
        assert len(set(a.indices)) == 7

    def test_too_large_rejected(self):
        with pytest.raises(ValueError):
            equidistant_design(11, 10)
        with pytest.raises(ValueError):
            random_design(11, 10, seed=0)
