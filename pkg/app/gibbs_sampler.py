"""
Gibbs sampler for the graphical B-spline smoothing model.

Each sweep draws the curve coefficients, the population mean and the noise
variance from their conjugate full conditionals, then moves (G, Omega) with
one birth-death step. The birth-death jump chain targets the posterior tilted
by the total event rate R, so coefficient and mean draws are kept with
probability min(1, R_new / R_old) and every stored quantity carries the
holding-time weight 1 / R. Post-burn-in graphs and weights are kept for every
sweep; precision matrices are thinned.
"""

from dataclasses import dataclass, field, replace
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg

from app.bdmcmc import (
    DEFAULT_MAX_RATE,
    BdState,
    BirthDeathOptions,
    NormalizerRatio,
    PosteriorGwParams,
    birth_death_step,
    log_total_rate,
)
from app.bspline import BasisSpec, DesignMatrix, build_design
from app.data_io import SpectraDataset
from app.errors import (
    ConfigError,
    EmptyChainError,
    InputError,
    NumericError,
    SamplerError,
    SpectraGraphError,
)
from app.graph import Graph, GraphPrior
from app.gwishart import GWishartParams, sample_direct

DEFAULT_SIGMA_MU2 = 100.0
DEFAULT_A = 10.0
DEFAULT_B = 0.001
DEFAULT_OMEGA_THIN = 10
TAU2_FLOOR = 1e-12


@dataclass(frozen=True)
class Hyperparameters:
    """
    Prior settings of the hierarchical model.

    Attributes:
        basis: B-spline basis of the curves
        gw_prior: G-Wishart prior (d, D) on Omega
        graph_prior: Prior over graphs
        sigma_mu2: Prior variance of every entry of mu
        a: Noise shape hyperparameter
        b: Noise rate hyperparameter
    """

    basis: BasisSpec
    gw_prior: GWishartParams
    graph_prior: GraphPrior = field(default_factory=GraphPrior)
    sigma_mu2: float = DEFAULT_SIGMA_MU2
    a: float = DEFAULT_A
    b: float = DEFAULT_B

    def __post_init__(self):
        if self.gw_prior.p != self.basis.n_basis:
            raise InputError(
                f"D is {self.gw_prior.p}x{self.gw_prior.p} but the basis has "
                f"{self.basis.n_basis} functions"
            )
        if not (self.sigma_mu2 > 0 and self.a > 0 and self.b > 0):
            raise InputError("sigma_mu2, a and b must be positive")

    @property
    def p(self) -> int:
        return self.basis.n_basis


class SamplerConfig(BaseModel):
    """
    Iteration counts and birth-death controls of a fit.

    Attributes:
        n_iter: Total sweeps
        burn_in: Discarded sweeps
        thin: Store Omega every thin-th post-burn-in sweep
        proposal: Birth-death rate construction
        sigma_prop: Scale of the "gaussian" proposal
        max_rate: Cap on every birth/death rate
        normalizer: Normalizing-constant ratio backend
        mc_samples: Importance draws per graph for the "mc" backend
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_iter: int = Field(60_000, ge=1)
    burn_in: int = Field(10_000, ge=0)
    thin: int = Field(DEFAULT_OMEGA_THIN, ge=1)
    proposal: Literal["conditional", "gaussian"] = "conditional"
    sigma_prop: float = Field(1.0, gt=0.0)
    max_rate: float = Field(DEFAULT_MAX_RATE, gt=0.0)
    normalizer: Literal["approx", "mc"] = "approx"
    mc_samples: int = Field(10_000, ge=1000)

    @model_validator(mode="after")
    def _check(self) -> "SamplerConfig":
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        return self

    def bd_options(self) -> BirthDeathOptions:
        return BirthDeathOptions(
            proposal=self.proposal,
            sigma_prop=self.sigma_prop,
            max_rate=self.max_rate,
            normalizer=self.normalizer,
            mc_samples=self.mc_samples,
        )


@dataclass
class McmcState:
    """
    Current values of every model parameter.

    Attributes:
        betas: n x p coefficient matrix, row i is beta_i
        mu: p-vector population mean
        tau2: Noise variance
        bd: Graph, precision matrix and holding time
    """

    betas: np.ndarray
    mu: np.ndarray
    tau2: float
    bd: BdState

    def __post_init__(self):
        if not self.tau2 > 0:
            raise NumericError(f"tau2 must be positive, got {self.tau2}")
        if self.betas.shape[1] != self.mu.size or self.mu.size != self.bd.graph.n_nodes:
            raise InputError("betas, mu and graph dimensions differ")

    @property
    def omega(self) -> np.ndarray:
        return self.bd.omega.values

    def scatter(self) -> np.ndarray:
        """U = sum_i (beta_i - mu)(beta_i - mu)^T."""
        centered = self.betas - self.mu
        return centered.T @ centered


@dataclass
class WeightedChain:
    """
    Post-burn-in output of one or more pooled chains.

    Attributes:
        p: Number of basis functions
        n: Number of curves
        graph_bits: n_saved x p(p-1)/2 upper-triangle edge indicators
        weights: n_saved holding times, one per stored graph
        tau2: n_saved noise variance trace
        log_lik: n_saved Gaussian log-likelihood trace
        omegas: Thinned stack of precision matrices
        omega_weights: Holding times matching omegas
        beta_mean: n x p holding-time weighted mean of the coefficient draws
        mu_mean: p-vector weighted mean of mu
        iterations: Sweep index of every stored graph
        omega_iterations: Sweep index of every stored precision matrix
    """

    p: int
    n: int
    graph_bits: np.ndarray
    weights: np.ndarray
    tau2: np.ndarray
    log_lik: np.ndarray
    omegas: np.ndarray
    omega_weights: np.ndarray
    beta_mean: np.ndarray
    mu_mean: np.ndarray
    iterations: np.ndarray
    omega_iterations: np.ndarray

    def __post_init__(self):
        m = self.p * (self.p - 1) // 2
        k = self.weights.shape[0]
        if self.graph_bits.shape != (k, m):
            raise InputError("graph indicators and weights have inconsistent lengths")
        if self.tau2.shape[0] != k or self.log_lik.shape[0] != k:
            raise InputError("scalar traces and weights have inconsistent lengths")
        if self.iterations.shape[0] != k:
            raise InputError("iteration index and weights have inconsistent lengths")
        if self.omegas.shape[0] != self.omega_weights.shape[0]:
            raise InputError("precision samples and their weights differ in length")
        if self.omegas.shape[0] != self.omega_iterations.shape[0]:
            raise InputError("precision samples and their index differ in length")
        if np.any(self.weights <= 0) or np.any(self.omega_weights <= 0):
            raise InputError("holding-time weights must be positive")
        if self.beta_mean.shape != (self.n, self.p) or self.mu_mean.shape != (self.p,):
            raise InputError("coefficient means have the wrong shape")

    @property
    def n_saved(self) -> int:
        return self.weights.shape[0]

    @property
    def tau2_mean(self) -> float:
        if self.n_saved == 0:
            raise EmptyChainError("chain holds no samples")
        return float(np.average(self.tau2, weights=self.weights))

    def graph(self, t: int) -> Graph:
        return Graph.from_upper_bits(self.p, self.graph_bits[t])


def pool_chains(chains: List[WeightedChain]) -> WeightedChain:
    """
    Concatenate independent chains.

    Graph and precision samples are stacked in chain order; coefficient means
    are averaged with the total holding time of each chain as weight.
    """
    if not chains:
        raise EmptyChainError("no chains to pool")
    if len(chains) == 1:
        return chains[0]
    first = chains[0]
    if any(c.p != first.p or c.n != first.n for c in chains):
        raise InputError("chains disagree on p or n")
    totals = np.array([c.weights.sum() for c in chains], dtype=float)
    share = totals / totals.sum()
    return WeightedChain(
        p=first.p,
        n=first.n,
        graph_bits=np.concatenate([c.graph_bits for c in chains]),
        weights=np.concatenate([c.weights for c in chains]),
        tau2=np.concatenate([c.tau2 for c in chains]),
        log_lik=np.concatenate([c.log_lik for c in chains]),
        omegas=np.concatenate([c.omegas for c in chains]),
        omega_weights=np.concatenate([c.omega_weights for c in chains]),
        beta_mean=sum(w * c.beta_mean for w, c in zip(share, chains)),
        mu_mean=sum(w * c.mu_mean for w, c in zip(share, chains)),
        iterations=np.concatenate([c.iterations for c in chains]),
        omega_iterations=np.concatenate([c.omega_iterations for c in chains]),
    )


def _check_dimensions(data: SpectraDataset, design: DesignMatrix) -> None:
    if design.n_points != data.n_points:
        raise InputError(
            f"design matrix has {design.n_points} rows, data has {data.n_points} points"
        )


def _draw_gaussian(
    precision: np.ndarray, rhs: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draws N(Q^-1 rhs_i, Q^-1) for every row rhs_i, sharing one factorization."""
    try:
        chol = linalg.cholesky(precision, lower=True)
    except linalg.LinAlgError:
        raise NumericError("full-conditional precision is not positive definite")
    mean = linalg.cho_solve((chol, True), rhs.T).T
    z = rng.standard_normal(mean.shape)
    noise = linalg.solve_triangular(chol.T, z.T, lower=False).T
    return mean + noise


def _betas_system(state: McmcState, data: SpectraDataset, design: DesignMatrix):
    _check_dimensions(data, design)
    precision = design.gram / state.tau2 + state.omega
    rhs = data.curves @ design.values / state.tau2 + state.omega @ state.mu
    return precision, rhs


def betas_conditional(
    state: McmcState, data: SpectraDataset, design: DesignMatrix
) -> Tuple[np.ndarray, np.ndarray]:
    """Precision B_n^-1 and the n x p conditional means of beta_i."""
    precision, rhs = _betas_system(state, data, design)
    return precision, linalg.solve(precision, rhs.T, assume_a="pos").T


def update_betas(
    state: McmcState,
    data: SpectraDataset,
    design: DesignMatrix,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Draw every beta_i from its full conditional.

    beta_i ~ N(B_n (Phi^T Y_i / tau2 + Omega mu), B_n) with
    B_n = (Phi^T Phi / tau2 + Omega)^-1.

    Returns:
        n x p matrix of new coefficients
    """
    precision, rhs = _betas_system(state, data, design)
    return _draw_gaussian(precision, rhs, rng)


def _mu_system(state: McmcState, sigma_mu2: float):
    n, p = state.betas.shape
    if n < 1:
        raise InputError("at least one curve is required")
    precision = np.eye(p) / sigma_mu2 + n * state.omega
    rhs = state.omega @ state.betas.sum(axis=0)
    return precision, rhs


def mu_conditional(
    state: McmcState, sigma_mu2: float = DEFAULT_SIGMA_MU2
) -> Tuple[np.ndarray, np.ndarray]:
    """Precision M = I / sigma_mu2 + n Omega and mean M^-1 Omega sum_i beta_i."""
    precision, rhs = _mu_system(state, sigma_mu2)
    return precision, linalg.solve(precision, rhs, assume_a="pos")


def update_mu(
    state: McmcState,
    rng: np.random.Generator,
    sigma_mu2: float = DEFAULT_SIGMA_MU2,
) -> np.ndarray:
    """Draw mu from N(m, M^-1); M is the conditional precision."""
    precision, rhs = _mu_system(state, sigma_mu2)
    return _draw_gaussian(precision, rhs[None, :], rng)[0]


def residual_sum_squares(
    betas: np.ndarray, data: SpectraDataset, design: DesignMatrix
) -> float:
    residuals = data.curves - betas @ design.values.T
    return float(np.sum(residuals**2))


def tau2_conditional(
    state: McmcState,
    data: SpectraDataset,
    design: DesignMatrix,
    a: float = DEFAULT_A,
    b: float = DEFAULT_B,
) -> Tuple[float, float]:
    """Inverse-Gamma shape (nr + a) / 2 and rate (b + SSR) / 2."""
    _check_dimensions(data, design)
    n, r = data.curves.shape
    ssr = residual_sum_squares(state.betas, data, design)
    return 0.5 * (n * r + a), 0.5 * (b + ssr)


def update_tau2(
    state: McmcState,
    data: SpectraDataset,
    design: DesignMatrix,
    rng: np.random.Generator,
    a: float = DEFAULT_A,
    b: float = DEFAULT_B,
) -> float:
    """Draw tau2 from its Inverse-Gamma full conditional."""
    shape, rate = tau2_conditional(state, data, design, a, b)
    return float(1.0 / rng.gamma(shape, 1.0 / rate))


def log_likelihood(
    tau2: float, betas: np.ndarray, data: SpectraDataset, design: DesignMatrix
) -> float:
    n, r = data.curves.shape
    ssr = residual_sum_squares(betas, data, design)
    return float(-0.5 * n * r * np.log(2.0 * np.pi * tau2) - 0.5 * ssr / tau2)


def initial_state(
    data: SpectraDataset,
    design: DesignMatrix,
    graph: Optional[Graph] = None,
) -> McmcState:
    """
    Ridge starting point.

    beta_i = (Phi^T Phi + I)^-1 Phi^T Y_i, mu their mean, tau2 the mean
    squared residual, Omega = I on the empty (or given) graph.
    """
    _check_dimensions(data, design)
    p = design.n_basis
    ridge = design.gram + np.eye(p)
    betas = linalg.solve(ridge, design.values.T @ data.curves.T, assume_a="pos").T
    mu = betas.mean(axis=0)
    tau2 = residual_sum_squares(betas, data, design) / data.curves.size
    return McmcState(
        betas=betas,
        mu=mu,
        tau2=max(tau2, TAU2_FLOOR),
        bd=BdState.initial(p, graph),
    )


def _log_total(
    state: McmcState,
    hp: Hyperparameters,
    options: BirthDeathOptions,
    normalizer: NormalizerRatio,
) -> float:
    post = PosteriorGwParams.from_scatter(hp.gw_prior, state.betas.shape[0], state.scatter())
    return log_total_rate(state.bd, post, hp.graph_prior, options, normalizer)


def _rate_corrected(
    state: McmcState,
    proposal: McmcState,
    log_total: float,
    hp: Hyperparameters,
    rng: np.random.Generator,
    options: BirthDeathOptions,
    normalizer: NormalizerRatio,
) -> Tuple[McmcState, float]:
    # the proposal is an exact conditional draw, so only the rate ratio remains
    log_total_new = _log_total(proposal, hp, options, normalizer)
    if np.log(rng.uniform()) < log_total_new - log_total:
        return proposal, log_total_new
    return state, log_total


def gibbs_sweep(
    state: McmcState,
    data: SpectraDataset,
    design: DesignMatrix,
    hp: Hyperparameters,
    rng: np.random.Generator,
    options: Optional[BirthDeathOptions] = None,
    normalizer: Optional[NormalizerRatio] = None,
    fixed_graph: Optional[Graph] = None,
) -> Tuple[McmcState, BdState]:
    """
    One sweep of the sampler.

    Args:
        state: Current parameters
        data: Observed curves
        design: Design matrix on data.grid
        hp: Hyperparameters
        rng: Random generator owned by the caller
        options: Birth-death controls
        normalizer: Normalizer ratio backend, shared across sweeps
        fixed_graph: Keep G fixed and draw Omega directly

    Returns:
        (new_state, sample) where sample is the (G, Omega) pair that goes with
        the coefficients of new_state, weighted by its holding time
    """
    options = options or BirthDeathOptions()
    n = data.n_curves
    if fixed_graph is not None:
        state.betas = update_betas(state, data, design, rng)
        state.mu = update_mu(state, rng, hp.sigma_mu2)
        state.tau2 = update_tau2(state, data, design, rng, hp.a, hp.b)
        post = PosteriorGwParams.from_scatter(hp.gw_prior, n, state.scatter())
        sample = BdState(state.bd.graph, state.bd.omega, 1.0)
        omega = sample_direct(post.as_params(), fixed_graph, rng)
        state.bd = BdState(fixed_graph, omega, 1.0)
        return state, sample

    normalizer = normalizer or NormalizerRatio(
        hp.gw_prior, options.normalizer, options.mc_samples
    )
    log_total = _log_total(state, hp, options, normalizer)
    proposal = replace(state, betas=update_betas(state, data, design, rng))
    state, log_total = _rate_corrected(
        state, proposal, log_total, hp, rng, options, normalizer
    )
    proposal = replace(state, mu=update_mu(state, rng, hp.sigma_mu2))
    state, _ = _rate_corrected(state, proposal, log_total, hp, rng, options, normalizer)
    state.tau2 = update_tau2(state, data, design, rng, hp.a, hp.b)

    post = PosteriorGwParams.from_scatter(hp.gw_prior, n, state.scatter())
    sample = state.bd
    state.bd = birth_death_step(sample, post, hp.graph_prior, rng, options, normalizer)
    return state, BdState(sample.graph, sample.omega, state.bd.weight)


def run_chain(
    data: SpectraDataset,
    hp: Hyperparameters,
    n_iter: int,
    burn_in: int,
    thin: int = DEFAULT_OMEGA_THIN,
    rng: Optional[np.random.Generator] = None,
    options: Optional[BirthDeathOptions] = None,
    fixed_graph: Optional[Graph] = None,
    verbose: bool = False,
    design: Optional[DesignMatrix] = None,
) -> WeightedChain:
    """
    Run the sampler.

    Every sweep updates the coefficients, mu and tau2, recomputes
    U = sum_i (beta_i - mu)(beta_i - mu)^T and takes one birth-death step on
    (G, Omega) under G-Wishart(d + n, D + U). The state before the jump is
    stored with its holding time, and coefficient means are weighted by it.

    Args:
        data: Observed curves
        hp: Hyperparameters
        n_iter: Total number of sweeps
        burn_in: Sweeps discarded before storing
        thin: Store Omega every thin-th post-burn-in sweep
        rng: Random generator owned by the caller
        options: Birth-death controls
        fixed_graph: Keep G fixed and draw Omega directly instead of moving
            the graph (weights are then 1)
        verbose: Print progress on one carriage-returned line
        design: Precomputed design matrix on data.grid

    Returns:
        WeightedChain with n_iter - burn_in stored sweeps

    Raises:
        ConfigError: If n_iter <= burn_in, burn_in < 0 or thin < 1
        SamplerError: If a numeric failure happens inside a sweep
    """
    if not (n_iter > burn_in >= 0):
        raise ConfigError(f"need n_iter > burn_in >= 0, got {n_iter} and {burn_in}")
    if thin < 1:
        raise ConfigError("thin must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    options = options or BirthDeathOptions()
    design = design if design is not None else build_design(hp.basis, data.grid)
    _check_dimensions(data, design)
    if fixed_graph is not None and fixed_graph.n_nodes != hp.p:
        raise InputError("fixed graph does not match the basis size")

    n, p = data.n_curves, hp.p
    n_saved = n_iter - burn_in
    m = p * (p - 1) // 2
    normalizer = NormalizerRatio(hp.gw_prior, options.normalizer, options.mc_samples)

    graph_bits = np.zeros((n_saved, m), dtype=bool)
    weights = np.zeros(n_saved)
    tau2_trace = np.zeros(n_saved)
    loglik_trace = np.zeros(n_saved)
    omegas: List[np.ndarray] = []
    omega_weights: List[float] = []
    omega_iterations: List[int] = []
    beta_sum = np.zeros((n, p))
    mu_sum = np.zeros(p)

    state = initial_state(data, design, fixed_graph)
    report_every = max(1, n_iter // 100)

    for it in range(n_iter):
        try:
            state, current = gibbs_sweep(
                state, data, design, hp, rng, options, normalizer, fixed_graph
            )
            weight = current.weight
        except SpectraGraphError as e:
            raise SamplerError(str(e), it) from e
        except (linalg.LinAlgError, FloatingPointError) as e:
            raise SamplerError(f"linear algebra failure: {e}", it) from e

        if it >= burn_in:
            t = it - burn_in
            graph_bits[t] = current.graph.upper_bits()
            weights[t] = weight
            tau2_trace[t] = state.tau2
            loglik_trace[t] = log_likelihood(state.tau2, state.betas, data, design)
            beta_sum += weight * state.betas
            mu_sum += weight * state.mu
            if t % thin == 0:
                omegas.append(np.array(current.omega.values))
                omega_weights.append(weight)
                omega_iterations.append(it)

        if verbose and ((it + 1) % report_every == 0 or it + 1 == n_iter):
            print(
                f"Iteration {it + 1}/{n_iter} | edges {state.bd.graph.n_edges} "
                f"| tau2 {state.tau2:.4g}",
                end="\r",
                flush=True,
            )
    if verbose:
        print()

    return WeightedChain(
        p=p,
        n=n,
        graph_bits=graph_bits,
        weights=weights,
        tau2=tau2_trace,
        log_lik=loglik_trace,
        omegas=np.array(omegas).reshape(-1, p, p),
        omega_weights=np.array(omega_weights),
        beta_mean=beta_sum / weights.sum(),
        mu_mean=mu_sum / weights.sum(),
        iterations=np.arange(burn_in, n_iter),
        omega_iterations=np.array(omega_iterations, dtype=int),
    )
