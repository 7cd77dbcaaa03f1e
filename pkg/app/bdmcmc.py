"""
Birth-death moves over (G, Omega).

Every non-edge is born and every edge dies as an independent Poisson
process whose rates satisfy the detailed balance conditions of the joint
conditional

    P(G, Omega | betas, mu) ∝ pi(G) / I_G(d, D) |Omega|^((d* - 2) / 2) exp(-tr(Omega D*) / 2)

with d* = d + n and D* = D + U.

For an edge e = (i, j), i < j, a jump only touches omega_ij and the pivot
diagonal omega_jj: omega_ij is set (birth) or zeroed (death) and omega_jj is
moved so that the Schur complement of omega_jj stays fixed. |Omega| is then
unchanged, the map has unit Jacobian and the log target is quadratic in
omega_ij, -A x^2 / 2 - B x, with

    K_ii = S_ii - S_ij^2 / S_jj     (S = Omega^-1)
    A    = D*_jj K_ii
    B    = D*_jj (-S_ij / S_jj - K_ii omega_ij) + D*_ij

A and B do not change along the move, so integrating omega_ij out gives
the conditional odds O_e of the edge.

The jump chain of this process visits states with law proportional to
P(G, Omega | betas, mu) R(G, Omega), R being the total event rate, and the
expected holding time 1 / R turns it back into the target. The refresh of
Omega after a jump and the coefficient updates of the sampler keep that
tilted law by accepting exact conditional draws with probability
min(1, R_new / R_old).
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from app.errors import InputError, NumericError
from app.graph import Edge, Graph, GraphPrior, log_prior_ratio_add
from app.gwishart import (
    GWishartParams,
    PrecisionMatrix,
    log_normconst_decomposable,
    log_normconst_mc,
    log_normconst_ratio_approx,
    sample_direct,
)

DEFAULT_MAX_RATE = 1e10
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class BdState:
    """
    Graph, precision matrix and the holding time of the state.

    Attributes:
        graph: Current graph
        omega: Precision matrix Markov with respect to graph
        weight: Expected holding time 1 / (total birth + total death rate)
    """

    graph: Graph
    omega: PrecisionMatrix
    weight: float = 1.0

    def __post_init__(self):
        if self.omega.graph.n_nodes != self.graph.n_nodes:
            raise InputError("graph and precision matrix dimensions differ")
        outside = ~self.graph.adjacency & ~np.eye(self.graph.n_nodes, dtype=bool)
        if np.any(self.omega.values[outside] != 0.0):
            raise InputError("precision matrix is not Markov with respect to graph")
        if not (np.isfinite(self.weight) and self.weight > 0):
            raise NumericError(f"holding time must be positive, got {self.weight}")

    @classmethod
    def initial(cls, p: int, graph: Optional[Graph] = None) -> "BdState":
        graph = graph if graph is not None else Graph.empty(p)
        return cls(graph, PrecisionMatrix(np.eye(p), graph))


@dataclass(frozen=True)
class PosteriorGwParams:
    """
    Posterior G-Wishart parameters d + n and D + U.

    Attributes:
        shape: d + n
        inv_scale: D + U, symmetric positive definite
        prior: Prior parameters (d, D), needed for the normalizer ratios
    """

    shape: float
    inv_scale: np.ndarray
    prior: GWishartParams

    def __post_init__(self):
        inv_scale = np.asarray(self.inv_scale, dtype=float)
        if inv_scale.shape != self.prior.inv_scale.shape:
            raise InputError("posterior and prior inverse scales differ in shape")
        object.__setattr__(self, "inv_scale", inv_scale)

    @classmethod
    def from_scatter(
        cls, prior: GWishartParams, n: int, scatter: np.ndarray
    ) -> "PosteriorGwParams":
        return cls(prior.shape + n, prior.inv_scale + scatter, prior)

    def as_params(self) -> GWishartParams:
        return GWishartParams(self.shape, self.inv_scale)


@dataclass(frozen=True)
class BirthDeathOptions:
    """
    Controls of the birth-death step.

    Attributes:
        proposal: "conditional" (square-root balanced rates from the
            conditional odds) or "gaussian" (zero-centred Gaussian birth
            proposal with scale sigma_prop, unit birth rates)
        sigma_prop: Scale of the "gaussian" proposal
        max_rate: Cap applied to every rate
        normalizer: "approx" or "mc" backend for I_{G-e} / I_{G+e}
        mc_samples: Importance draws per graph for the "mc" backend
    """

    proposal: Literal["conditional", "gaussian"] = "conditional"
    sigma_prop: float = 1.0
    max_rate: float = DEFAULT_MAX_RATE
    normalizer: Literal["approx", "mc"] = "approx"
    mc_samples: int = 10_000

    def __post_init__(self):
        if self.proposal not in ("conditional", "gaussian"):
            raise InputError(f"unknown proposal '{self.proposal}'")
        if self.normalizer not in ("approx", "mc"):
            raise InputError(f"unknown normalizer '{self.normalizer}'")
        if not self.sigma_prop > 0 or not self.max_rate > 0:
            raise InputError("sigma_prop and max_rate must be positive")


class NormalizerRatio:
    """
    log I_{G+e}(d, D) - log I_{G-e}(d, D) for every node pair.

    The "mc" backend uses the closed form for decomposable graphs and a
    Monte Carlo estimate otherwise. It memoizes one value per visited graph
    and draws from its own generator so that caching does not perturb the
    chain. Both backends keep the vector of the last graph asked for.
    """

    def __init__(
        self,
        prior: GWishartParams,
        backend: str = "approx",
        mc_samples: int = 10_000,
        seed: int = 0,
    ):
        self.prior = prior
        self.backend = backend
        self.mc_samples = mc_samples
        self._rng = np.random.default_rng(seed)
        self._cache: Dict[frozenset, float] = {}
        self._last: Optional[Tuple[frozenset, np.ndarray]] = None

    def log_normconst(self, g: Graph) -> float:
        key = g.key()
        if key not in self._cache:
            if g.is_decomposable():
                self._cache[key] = log_normconst_decomposable(self.prior, g)
            else:
                estimate, _ = log_normconst_mc(self.prior, g, self.mc_samples, self._rng)
                self._cache[key] = estimate
        return self._cache[key]

    def __call__(self, g: Graph) -> np.ndarray:
        key = g.key()
        if self._last is not None and self._last[0] == key:
            return self._last[1]
        if self.backend == "approx":
            out = log_normconst_ratio_approx(self.prior, g)
        else:
            rows, cols = np.triu_indices(g.n_nodes, 1)
            here = self.log_normconst(g)
            out = np.empty(rows.size)
            for idx, (j, k) in enumerate(zip(rows.tolist(), cols.tolist())):
                other = self.log_normconst(_toggle(g, (j, k)))
                out[idx] = here - other if g.has_edge(j, k) else other - here
        out.setflags(write=False)
        self._last = (key, out)
        return out


def _toggle(g: Graph, e: Edge) -> Graph:
    return g.remove_edge(*e) if g.has_edge(*e) else g.add_edge(*e)


@lru_cache(maxsize=16)
def _log_prior_ratio_add(prior: GraphPrior, p: int) -> np.ndarray:
    rows, cols = np.triu_indices(p, 1)
    if prior.kind == "uniform":
        out = np.zeros(rows.size)
    else:
        out = np.array(
            [
                log_prior_ratio_add(prior, (j, k), p)
                for j, k in zip(rows.tolist(), cols.tolist())
            ]
        )
    out.setflags(write=False)
    return out


def _inverse(omega: np.ndarray) -> np.ndarray:
    p = omega.shape[0]
    return linalg.cho_solve((linalg.cholesky(omega, lower=True), True), np.eye(p))


def _conditional_terms(
    omega: np.ndarray, post: PosteriorGwParams
) -> Tuple[np.ndarray, np.ndarray]:
    """A and B of the quadratic log target in omega_ij, for all pairs."""
    p = omega.shape[0]
    rows, cols = np.triu_indices(p, 1)
    S = _inverse(omega)
    s_ij = S[rows, cols]
    s_jj = S[cols, cols]
    k_ii = S[rows, rows] - s_ij**2 / s_jj
    D = post.inv_scale
    A = D[cols, cols] * k_ii
    B = D[cols, cols] * (-s_ij / s_jj - k_ii * omega[rows, cols]) + D[rows, cols]
    return A, B


def _rate_terms(
    state: BdState,
    post: PosteriorGwParams,
    prior: GraphPrior,
    options: BirthDeathOptions,
    normalizer: NormalizerRatio,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    g = state.graph
    p = g.n_nodes
    present = g.upper_bits()
    A, B = _conditional_terms(state.omega.values, post)
    if np.any(A <= 0):
        raise NumericError("non-positive conditional precision in rate computation")

    # log of target(G+e) / target(G-e) without the omega_e factor
    log_static = _log_prior_ratio_add(prior, p) - normalizer(g)

    if options.proposal == "conditional":
        log_odds = log_static + HALF_LOG_2PI - 0.5 * np.log(A) + B**2 / (2.0 * A)
        out = np.where(present, -0.5 * log_odds, 0.5 * log_odds)
    else:
        rows, cols = np.triu_indices(p, 1)
        x = state.omega.values[rows, cols]
        sig = options.sigma_prop
        log_q = -0.5 * (x / sig) ** 2 - np.log(sig) - HALF_LOG_2PI
        log_death = -log_static + 0.5 * A * x**2 + B * x + log_q
        out = np.where(present, log_death, 0.0)

    return np.minimum(out, np.log(options.max_rate)), present, A, B


def _defaults(
    post: PosteriorGwParams,
    options: Optional[BirthDeathOptions],
    normalizer: Optional[NormalizerRatio],
) -> Tuple[BirthDeathOptions, NormalizerRatio]:
    options = options or BirthDeathOptions()
    normalizer = normalizer or NormalizerRatio(
        post.prior, options.normalizer, options.mc_samples
    )
    return options, normalizer


def log_rates(
    state: BdState,
    post: PosteriorGwParams,
    prior: GraphPrior,
    options: Optional[BirthDeathOptions] = None,
    normalizer: Optional[NormalizerRatio] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log birth/death rates for every node pair.

    Args:
        state: Current state
        post: Posterior G-Wishart parameters
        prior: Graph prior
        options: Step controls
        normalizer: Normalizer ratio backend

    Returns:
        (log_rate, present) over the upper-triangle pairs in row-major order;
        log_rate is a death rate where present is True and a birth rate
        elsewhere, capped at log(max_rate)
    """
    options, normalizer = _defaults(post, options, normalizer)
    out, present, _, _ = _rate_terms(state, post, prior, options, normalizer)
    return out, present


def log_total_rate(
    state: BdState,
    post: PosteriorGwParams,
    prior: GraphPrior,
    options: Optional[BirthDeathOptions] = None,
    normalizer: Optional[NormalizerRatio] = None,
) -> float:
    """log R, R being the sum of every birth and death rate of the state."""
    rates, _ = log_rates(state, post, prior, options, normalizer)
    if rates.size == 0:
        raise NumericError("no node pairs: the birth-death process has no events")
    return float(logsumexp(rates))


def death_rate(
    e: Edge,
    state: BdState,
    post: PosteriorGwParams,
    prior: GraphPrior,
    options: Optional[BirthDeathOptions] = None,
    normalizer: Optional[NormalizerRatio] = None,
) -> float:
    """Rate at which edge e leaves the current graph."""
    j, k = min(e), max(e)
    if not state.graph.has_edge(j, k):
        raise InputError(f"edge ({j}, {k}) is not in the graph")
    rates, _ = log_rates(state, post, prior, options, normalizer)
    return float(np.exp(rates[_pair_index(state.graph.n_nodes, j, k)]))


def birth_rate(
    e: Edge,
    state: BdState,
    post: PosteriorGwParams,
    prior: GraphPrior,
    options: Optional[BirthDeathOptions] = None,
    normalizer: Optional[NormalizerRatio] = None,
) -> float:
    """Rate at which the non-edge e enters the current graph."""
    j, k = min(e), max(e)
    if state.graph.has_edge(j, k):
        raise InputError(f"edge ({j}, {k}) is already in the graph")
    rates, _ = log_rates(state, post, prior, options, normalizer)
    return float(np.exp(rates[_pair_index(state.graph.n_nodes, j, k)]))


def _pair_index(p: int, j: int, k: int) -> int:
    # row-major position of (j, k), j < k, in the upper triangle
    return j * p - j * (j + 1) // 2 + (k - j - 1)


def move_pair(omega: np.ndarray, e: Edge, value: float) -> np.ndarray:
    """
    Set omega_jk to value and re-complete the pivot omega_kk (j < k).

    The Schur complement of omega_kk is kept, so the determinant and the
    positive definiteness of omega are preserved.

    Returns:
        New p x p matrix; the input is not modified
    """
    j, k = min(e), max(e)
    if j == k:
        raise InputError("a node pair needs two distinct nodes")
    S = _inverse(omega)
    k_jj = S[j, j] - S[j, k] ** 2 / S[k, k]
    step = value - omega[j, k]
    out = np.array(omega, dtype=float)
    out[j, k] = out[k, j] = value
    out[k, k] += 2.0 * step * (-S[j, k] / S[k, k]) + step**2 * k_jj
    return out


def birth_death_step(
    state: BdState,
    post: PosteriorGwParams,
    prior: GraphPrior,
    rng: np.random.Generator,
    options: Optional[BirthDeathOptions] = None,
    normalizer: Optional[NormalizerRatio] = None,
) -> BdState:
    """
    One jump of the birth-death process followed by an Omega refresh.

    A birth draws omega_e from its conditional law ("conditional") or from
    N(0, sigma_prop^2) ("gaussian"); a death zeroes it. The refresh proposes
    an exact draw from P(Omega | G, betas, mu) on the new graph and keeps it
    with probability min(1, R_new / R_jumped).

    Args:
        state: Current (G, Omega)
        post: Posterior G-Wishart parameters (d + n, D + U)
        prior: Graph prior
        rng: Random generator owned by the caller
        options: Step controls
        normalizer: Normalizer ratio backend, shared across steps of a chain

    Returns:
        New state whose weight is the holding time of the input state

    Raises:
        NumericError: If every rate is zero or a rate is not finite
        ConvergenceError: If the Omega refresh fails
    """
    options, normalizer = _defaults(post, options, normalizer)
    rates_log, present, A, B = _rate_terms(state, post, prior, options, normalizer)
    if rates_log.size == 0:
        raise NumericError("no node pairs: the birth-death process has no events")
    log_total = float(logsumexp(rates_log))
    if not np.isfinite(log_total):
        raise NumericError(f"invalid total event rate exp({log_total})")
    weight = float(np.exp(-log_total))
    if not (np.isfinite(weight) and weight > 0):
        raise NumericError(f"invalid total event rate exp({log_total})")

    idx = int(rng.choice(rates_log.size, p=np.exp(rates_log - log_total)))
    rows, cols = np.triu_indices(state.graph.n_nodes, 1)
    e = (int(rows[idx]), int(cols[idx]))
    if present[idx]:
        value = 0.0
    elif options.proposal == "conditional":
        value = -B[idx] / A[idx] + rng.standard_normal() / np.sqrt(A[idx])
    else:
        value = options.sigma_prop * rng.standard_normal()
    new_graph = _toggle(state.graph, e)
    jumped = BdState(
        new_graph, PrecisionMatrix(move_pair(state.omega.values, e, value), new_graph)
    )

    fresh = BdState(new_graph, sample_direct(post.as_params(), new_graph, rng))
    log_ratio = log_total_rate(fresh, post, prior, options, normalizer) - log_total_rate(
        jumped, post, prior, options, normalizer
    )
    kept = fresh if np.log(rng.uniform()) < log_ratio else jumped
    return BdState(new_graph, kept.omega, weight)
