"""
Unit tests for the Gibbs sampler: full conditionals, initialization, the
chain driver and chain pooling.
"""

from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from app.bdmcmc import BdState
from app.bspline import BasisSpec, build_design
from app.data_io import SpectraDataset
from app.errors import (
    ConfigError,
    EmptyChainError,
    InputError,
    NumericError,
    SamplerError,
)
from app.gibbs_sampler import (
    Hyperparameters,
    McmcState,
    SamplerConfig,
    WeightedChain,
    betas_conditional,
    gibbs_sweep,
    initial_state,
    log_likelihood,
    mu_conditional,
    pool_chains,
    residual_sum_squares,
    run_chain,
    tau2_conditional,
    update_betas,
    update_mu,
    update_tau2,
)
from app.graph import Graph
from app.gwishart import GWishartParams, PrecisionMatrix


def _state(betas, mu, tau2=1.0, omega=None):
    p = mu.size
    values = np.eye(p) if omega is None else omega
    graph = Graph.complete(p) if omega is not None else Graph.empty(p)
    return McmcState(
        betas=np.array(betas, dtype=float),
        mu=np.array(mu, dtype=float),
        tau2=tau2,
        bd=BdState(graph, PrecisionMatrix(values, graph)),
    )


def _omega(p):
    values = 2.0 * np.eye(p)
    values[0, 1] = values[1, 0] = 0.5
    return values


class TestHyperparameters:
    """Test Hyperparameters validation."""

    @pytest.mark.unit
    def test_defaults(self, small_basis):
        hp = Hyperparameters(basis=small_basis, gw_prior=GWishartParams.identity(5))
        assert (hp.sigma_mu2, hp.a, hp.b) == (100.0, 10.0, 0.001)
        assert hp.graph_prior.kind == "uniform"
        assert hp.p == 5

    @pytest.mark.unit
    def test_prior_dimension_mismatch(self, small_basis):
        with pytest.raises(InputError):
            Hyperparameters(basis=small_basis, gw_prior=GWishartParams.identity(4))

    @pytest.mark.unit
    @pytest.mark.parametrize("field", ["a", "b", "sigma_mu2"])
    def test_non_positive_hyperparameter(self, small_basis, field):
        with pytest.raises(InputError):
            Hyperparameters(
                basis=small_basis, gw_prior=GWishartParams.identity(5), **{field: 0.0}
            )


class TestSamplerConfig:
    """Test SamplerConfig validation."""

    @pytest.mark.unit
    def test_iterations_must_exceed_burn_in(self):
        with pytest.raises(ValidationError):
            SamplerConfig(n_iter=100, burn_in=100)

    @pytest.mark.unit
    def test_mc_samples_minimum(self):
        with pytest.raises(ValidationError):
            SamplerConfig(mc_samples=500)

    @pytest.mark.unit
    def test_bd_options(self):
        options = SamplerConfig(proposal="gaussian", sigma_prop=0.3).bd_options()
        assert options.proposal == "gaussian"
        assert options.sigma_prop == 0.3
        assert options.normalizer == "approx"


class TestMcmcState:
    """Test McmcState."""

    @pytest.mark.unit
    def test_rejects_non_positive_tau2(self):
        with pytest.raises(NumericError):
            _state(np.zeros((2, 3)), np.zeros(3), tau2=0.0)

    @pytest.mark.unit
    def test_rejects_dimension_mismatch(self):
        with pytest.raises(InputError):
            _state(np.zeros((2, 4)), np.zeros(3))

    @pytest.mark.unit
    def test_scatter(self):
        state = _state([[1.0, 0.0], [3.0, 2.0]], np.array([1.0, 1.0]))
        np.testing.assert_array_equal(state.scatter(), [[4.0, 2.0], [2.0, 2.0]])


class TestBetasConditional:
    """Test the coefficient full conditional."""

    @pytest.mark.unit
    def test_strong_prior_pulls_to_mu(self, small_dataset, small_basis):
        design = build_design(small_basis, small_dataset.grid)
        mu = np.array([0.3, -0.2, 1.0, 0.0, 0.5])
        state = _state(np.zeros((8, 5)), mu, omega=1e8 * np.eye(5))
        _, means = betas_conditional(state, small_dataset, design)
        np.testing.assert_allclose(means, np.tile(mu, (8, 1)), atol=1e-5)

    @pytest.mark.unit
    def test_vanishing_noise_gives_least_squares(self, small_dataset, small_basis):
        design = build_design(small_basis, small_dataset.grid)
        state = _state(np.zeros((8, 5)), np.zeros(5), tau2=1e-8)
        _, means = betas_conditional(state, small_dataset, design)
        ls, *_ = np.linalg.lstsq(design.values, small_dataset.curves.T, rcond=None)
        np.testing.assert_allclose(means, ls.T, atol=1e-5)

    @pytest.mark.unit
    def test_draw_moments_match_closed_form(self, small_basis, rng):
        grid = np.linspace(0.0, 1.0, 25)
        design = build_design(small_basis, grid)
        curve = np.sin(2 * np.pi * grid)
        n = 20_000
        data = SpectraDataset(grid, np.tile(curve, (n, 1)))
        mu = np.array([0.1, 0.2, 0.0, -0.1, 0.3])
        tau2 = 0.5
        state = _state(np.zeros((n, 5)), mu, tau2=tau2, omega=_omega(5))

        precision = design.gram / tau2 + state.omega
        covariance = np.linalg.inv(precision)
        mean = covariance @ (design.values.T @ curve / tau2 + state.omega @ mu)

        draws = update_betas(state, data, design, rng)
        assert draws.shape == (n, 5)
        sd = np.sqrt(np.diag(covariance))
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=float(5 * sd.max() / np.sqrt(n)))
        np.testing.assert_allclose(
            np.cov(draws, rowvar=False), covariance, atol=0.05 * float(np.diag(covariance).max())
        )

    @pytest.mark.unit
    def test_dimension_mismatch(self, small_dataset):
        other = build_design(
            BasisSpec(domain_lo=0.0, domain_hi=1.0, n_basis=5), np.linspace(0, 1, 10)
        )
        state = _state(np.zeros((8, 5)), np.zeros(5))
        with pytest.raises(InputError):
            update_betas(state, small_dataset, other, np.random.default_rng(0))


class TestMuConditional:
    """Test the population mean full conditional."""

    @pytest.mark.unit
    def test_identity_precision(self):
        betas = np.array([[1.0, 2.0], [3.0, 0.0], [2.0, 1.0]])
        state = _state(betas, np.zeros(2))
        precision, mean = mu_conditional(state, sigma_mu2=1.0)
        np.testing.assert_allclose(precision, 4.0 * np.eye(2))
        np.testing.assert_allclose(mean, betas.sum(axis=0) / 4.0)

    @pytest.mark.unit
    def test_flat_prior_gives_sample_mean(self):
        betas = np.array([[1.0, 2.0, 0.0], [3.0, 0.0, 1.0]])
        state = _state(betas, np.zeros(3), omega=_omega(3))
        _, mean = mu_conditional(state, sigma_mu2=1e12)
        np.testing.assert_allclose(mean, betas.mean(axis=0), atol=1e-8)

    @pytest.mark.unit
    def test_draw_moments(self, rng):
        betas = np.array([[1.0, 2.0, 0.0], [3.0, 0.0, 1.0]])
        state = _state(betas, np.zeros(3), omega=_omega(3))
        precision, mean = mu_conditional(state, sigma_mu2=4.0)
        draws = np.array([update_mu(state, rng, sigma_mu2=4.0) for _ in range(20_000)])
        covariance = np.linalg.inv(precision)
        sd = np.sqrt(np.diag(covariance))
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=float(5 * sd.max() / np.sqrt(20_000)))
        np.testing.assert_allclose(
            np.cov(draws, rowvar=False), covariance, atol=0.05 * float(np.diag(covariance).max())
        )


class TestTau2Conditional:
    """Test the noise variance full conditional."""

    @pytest.mark.unit
    def test_shape_at_real_data_size(self, small_basis):
        grid = np.linspace(0.0, 1.0, 235)
        data = SpectraDataset(grid, np.zeros((200, 235)))
        design = build_design(small_basis, grid)
        state = _state(np.zeros((200, 5)), np.zeros(5))
        # zero residuals; Hyperparameters needs b > 0, so the b = 0 limit is
        # approached with the default b = 0.001
        shape, rate = tau2_conditional(state, data, design, a=10.0, b=0.001)
        assert shape == 23_505
        assert rate == pytest.approx(0.0005)

    @pytest.mark.unit
    def test_draw_mean(self, small_dataset, small_basis, rng):
        design = build_design(small_basis, small_dataset.grid)
        state = _state(np.zeros((8, 5)), np.zeros(5))
        shape, rate = tau2_conditional(state, small_dataset, design)
        draws = np.array(
            [update_tau2(state, small_dataset, design, rng) for _ in range(20_000)]
        )
        assert np.all(draws > 0)
        assert draws.mean() == pytest.approx(rate / (shape - 1), rel=0.01)

    @pytest.mark.unit
    def test_log_likelihood(self, small_dataset, small_basis):
        design = build_design(small_basis, small_dataset.grid)
        betas = np.zeros((8, 5))
        ssr = residual_sum_squares(betas, small_dataset, design)
        assert ssr == pytest.approx(float(np.sum(small_dataset.curves**2)))
        expected = -0.5 * 200 * np.log(2 * np.pi * 2.0) - 0.5 * ssr / 2.0
        assert log_likelihood(2.0, betas, small_dataset, design) == pytest.approx(expected)


class TestInitialState:
    """Test the ridge starting point."""

    @pytest.mark.unit
    def test_ridge_start(self, small_dataset, small_basis):
        design = build_design(small_basis, small_dataset.grid)
        state = initial_state(small_dataset, design)
        ridge = np.linalg.solve(
            design.gram + np.eye(5), design.values.T @ small_dataset.curves.T
        ).T
        np.testing.assert_allclose(state.betas, ridge, atol=1e-10)
        np.testing.assert_allclose(state.mu, ridge.mean(axis=0), atol=1e-10)
        assert state.tau2 > 0
        assert state.bd.graph == Graph.empty(5)
        np.testing.assert_array_equal(state.omega, np.eye(5))

    @pytest.mark.unit
    def test_given_graph(self, small_dataset, small_basis):
        design = build_design(small_basis, small_dataset.grid)
        graph = Graph(5, ((0, 1),))
        assert initial_state(small_dataset, design, graph).bd.graph == graph


class TestGibbsSweep:
    """Test one sweep and its rate-corrected coefficient updates."""

    @pytest.mark.unit
    def test_sample_carries_holding_time(self, small_dataset, small_hyperparameters, rng):
        design = build_design(small_hyperparameters.basis, small_dataset.grid)
        state = initial_state(small_dataset, design)
        before = state.bd.graph
        state, sample = gibbs_sweep(state, small_dataset, design, small_hyperparameters, rng)
        assert sample.graph == before
        assert sample.weight == state.bd.weight > 0
        assert state.bd.graph.n_edges == 1

    @pytest.mark.unit
    def test_rejected_updates_keep_coefficients(
        self, small_dataset, small_hyperparameters, rng
    ):
        design = build_design(small_hyperparameters.basis, small_dataset.grid)
        state = initial_state(small_dataset, design)
        betas, mu = state.betas.copy(), state.mu.copy()
        with patch("app.gibbs_sampler._log_total", side_effect=[0.0, -np.inf, -np.inf]):
            state, _ = gibbs_sweep(state, small_dataset, design, small_hyperparameters, rng)
        np.testing.assert_array_equal(state.betas, betas)
        np.testing.assert_array_equal(state.mu, mu)

    @pytest.mark.unit
    def test_larger_total_rate_is_accepted(self, small_dataset, small_hyperparameters, rng):
        design = build_design(small_hyperparameters.basis, small_dataset.grid)
        state = initial_state(small_dataset, design)
        betas, mu = state.betas.copy(), state.mu.copy()
        with patch("app.gibbs_sampler._log_total", side_effect=[0.0, 1.0, 2.0]):
            state, _ = gibbs_sweep(state, small_dataset, design, small_hyperparameters, rng)
        assert not np.array_equal(state.betas, betas)
        assert not np.array_equal(state.mu, mu)

    @pytest.mark.unit
    def test_fixed_graph_has_unit_weight(self, small_dataset, small_hyperparameters, rng):
        design = build_design(small_hyperparameters.basis, small_dataset.grid)
        complete = Graph.complete(5)
        state = initial_state(small_dataset, design, complete)
        state, sample = gibbs_sweep(
            state, small_dataset, design, small_hyperparameters, rng, fixed_graph=complete
        )
        assert sample.weight == 1.0
        assert state.bd.graph == complete


class TestRunChain:
    """Test the chain driver."""

    @pytest.mark.unit
    def test_chain_shapes(self, small_chain):
        assert small_chain.p == 5 and small_chain.n == 8
        assert small_chain.n_saved == 100
        assert small_chain.graph_bits.shape == (100, 10)
        assert small_chain.omegas.shape == (20, 5, 5)
        np.testing.assert_array_equal(small_chain.iterations, np.arange(20, 120))
        np.testing.assert_array_equal(small_chain.omega_iterations, np.arange(20, 120, 5))
        assert np.all(small_chain.weights > 0)
        assert np.all(small_chain.tau2 > 0)

    @pytest.mark.unit
    def test_stored_precisions_respect_graphs(self, small_chain):
        for omega, it in zip(small_chain.omegas, small_chain.omega_iterations):
            graph = small_chain.graph(int(it) - 20)
            mask = ~graph.adjacency & ~np.eye(5, dtype=bool)
            assert np.all(omega[mask] == 0.0)

    @pytest.mark.unit
    def test_single_stored_sweep(self, small_dataset, small_hyperparameters):
        chain = run_chain(
            small_dataset, small_hyperparameters, 6, 5, rng=np.random.default_rng(0)
        )
        assert chain.n_saved == 1
        assert chain.omegas.shape == (1, 5, 5)

    @pytest.mark.unit
    def test_fixed_seed_is_reproducible(self, small_dataset, small_hyperparameters):
        a = run_chain(small_dataset, small_hyperparameters, 30, 10, 2, np.random.default_rng(3))
        b = run_chain(small_dataset, small_hyperparameters, 30, 10, 2, np.random.default_rng(3))
        np.testing.assert_array_equal(a.graph_bits, b.graph_bits)
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.omegas, b.omegas)
        np.testing.assert_array_equal(a.beta_mean, b.beta_mean)

    @pytest.mark.unit
    def test_fixed_complete_graph(self, small_dataset, small_hyperparameters):
        chain = run_chain(
            small_dataset,
            small_hyperparameters,
            40,
            10,
            rng=np.random.default_rng(1),
            fixed_graph=Graph.complete(5),
        )
        np.testing.assert_array_equal(chain.weights, 1.0)
        assert chain.graph_bits[1:].all()

    @pytest.mark.unit
    @pytest.mark.parametrize("n_iter,burn_in,thin", [(10, 10, 1), (5, -1, 1), (10, 2, 0)])
    def test_bad_counts(self, small_dataset, small_hyperparameters, n_iter, burn_in, thin):
        with pytest.raises(ConfigError):
            run_chain(small_dataset, small_hyperparameters, n_iter, burn_in, thin)

    @pytest.mark.unit
    def test_fixed_graph_dimension(self, small_dataset, small_hyperparameters):
        with pytest.raises(InputError):
            run_chain(
                small_dataset, small_hyperparameters, 5, 1, fixed_graph=Graph.empty(4)
            )

    @pytest.mark.unit
    def test_numeric_failure_carries_iteration(self, small_dataset, small_hyperparameters):
        with patch("app.gibbs_sampler.update_tau2", side_effect=NumericError("boom")):
            with pytest.raises(SamplerError) as exc:
                run_chain(small_dataset, small_hyperparameters, 5, 1)
        assert exc.value.iteration == 0
        assert "boom" in str(exc.value)

    @pytest.mark.unit
    def test_verbose_progress(self, small_dataset, small_hyperparameters, capsys):
        run_chain(
            small_dataset,
            small_hyperparameters,
            4,
            1,
            rng=np.random.default_rng(0),
            verbose=True,
        )
        assert "Iteration 4/4" in capsys.readouterr().out


class TestWeightedChain:
    """Test WeightedChain validation and pooling."""

    @pytest.mark.unit
    def test_inconsistent_lengths(self, small_chain):
        with pytest.raises(InputError):
            WeightedChain(
                p=small_chain.p,
                n=small_chain.n,
                graph_bits=small_chain.graph_bits,
                weights=small_chain.weights[:-1],
                tau2=small_chain.tau2,
                log_lik=small_chain.log_lik,
                omegas=small_chain.omegas,
                omega_weights=small_chain.omega_weights,
                beta_mean=small_chain.beta_mean,
                mu_mean=small_chain.mu_mean,
                iterations=small_chain.iterations,
                omega_iterations=small_chain.omega_iterations,
            )

    @pytest.mark.unit
    def test_non_positive_weights(self, small_chain):
        weights = np.array(small_chain.weights)
        weights[0] = 0.0
        with pytest.raises(InputError):
            WeightedChain(
                p=small_chain.p,
                n=small_chain.n,
                graph_bits=small_chain.graph_bits,
                weights=weights,
                tau2=small_chain.tau2,
                log_lik=small_chain.log_lik,
                omegas=small_chain.omegas,
                omega_weights=small_chain.omega_weights,
                beta_mean=small_chain.beta_mean,
                mu_mean=small_chain.mu_mean,
                iterations=small_chain.iterations,
                omega_iterations=small_chain.omega_iterations,
            )

    @pytest.mark.unit
    def test_empty_chain_tau2_mean(self):
        chain = WeightedChain(
            p=2,
            n=1,
            graph_bits=np.zeros((0, 1), dtype=bool),
            weights=np.zeros(0),
            tau2=np.zeros(0),
            log_lik=np.zeros(0),
            omegas=np.zeros((0, 2, 2)),
            omega_weights=np.zeros(0),
            beta_mean=np.zeros((1, 2)),
            mu_mean=np.zeros(2),
            iterations=np.zeros(0, dtype=int),
            omega_iterations=np.zeros(0, dtype=int),
        )
        with pytest.raises(EmptyChainError):
            chain.tau2_mean

    @pytest.mark.unit
    def test_pool_nothing(self):
        with pytest.raises(EmptyChainError):
            pool_chains([])

    @pytest.mark.unit
    def test_pool_single_chain_is_identity(self, small_chain):
        assert pool_chains([small_chain]) is small_chain

    @pytest.mark.unit
    def test_tau2_mean_is_weighted(self, small_chain):
        chain = replace(small_chain, weights=np.linspace(1.0, 2.0, small_chain.n_saved))
        expected = np.sum(chain.weights * chain.tau2) / chain.weights.sum()
        assert chain.tau2_mean == pytest.approx(expected)

    @pytest.mark.unit
    def test_pool_weights_means_by_holding_time(self, small_chain):
        heavier = replace(
            small_chain,
            weights=3.0 * small_chain.weights,
            omega_weights=3.0 * small_chain.omega_weights,
            beta_mean=small_chain.beta_mean + 1.0,
            mu_mean=small_chain.mu_mean + 1.0,
        )
        pooled = pool_chains([small_chain, heavier])
        np.testing.assert_allclose(pooled.beta_mean, small_chain.beta_mean + 0.75)
        np.testing.assert_allclose(pooled.mu_mean, small_chain.mu_mean + 0.75)

    @pytest.mark.unit
    def test_pool_two_chains(self, small_chain):
        pooled = pool_chains([small_chain, small_chain])
        assert pooled.n_saved == 200
        assert pooled.omegas.shape[0] == 40
        np.testing.assert_allclose(pooled.beta_mean, small_chain.beta_mean)
        np.testing.assert_allclose(pooled.mu_mean, small_chain.mu_mean)
