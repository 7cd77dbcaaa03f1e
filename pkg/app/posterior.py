"""
Posterior summaries of a weighted chain.

Every summary is a holding-time weighted average over the stored states.
The sampler keeps the coefficient and noise-variance means weighted too,
since its discrete-time chain targets the posterior tilted by the total
jump rate.
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from app.bspline import DesignMatrix
from app.errors import EmptyChainError, InputError
from app.gibbs_sampler import WeightedChain
from app.graph import Graph

DEFAULT_ALPHA = 0.05
MEDIAN_THRESHOLD = 0.5


@dataclass(frozen=True)
class EdgeProbMatrix:
    """Symmetric p x p matrix of inclusion probabilities, zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise InputError("edge probabilities must form a square matrix")
        if not np.array_equal(values, values.T):
            raise InputError("edge probabilities must be symmetric")
        if np.any(np.diag(values) != 0):
            raise InputError("edge probabilities must have a zero diagonal")
        if np.any(values < 0) or np.any(values > 1):
            raise InputError("edge probabilities must lie in [0, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_upper(cls, p: int, upper) -> "EdgeProbMatrix":
        values = np.zeros((p, p))
        values[np.triu_indices(p, 1)] = upper
        return cls(values + values.T)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    def upper(self) -> np.ndarray:
        return self.values[np.triu_indices(self.p, 1)]


@dataclass
class PosteriorSummary:
    """
    Everything reported about one fit.

    Attributes:
        omega_hat: Weighted mean precision matrix
        edge_probs: Edge inclusion probabilities
        selected_graphs: Graph per selection rule ("median", "bfdr")
        bfdr_threshold: Probability threshold picked by the BFDR rule
        alpha: BFDR budget used
        beta_hat: n x p mean coefficients
        mu_hat: p-vector mean of mu
        tau2_hat: Mean noise variance
    """

    omega_hat: np.ndarray
    edge_probs: EdgeProbMatrix
    selected_graphs: Dict[str, Graph]
    bfdr_threshold: float
    alpha: float
    beta_hat: np.ndarray
    mu_hat: np.ndarray
    tau2_hat: float
    extras: Dict[str, float] = field(default_factory=dict)


def omega_hat(chain: WeightedChain) -> np.ndarray:
    """
    Holding-time weighted mean of the stored precision matrices.

    Raises:
        EmptyChainError: If the chain stores no precision matrix
    """
    if chain.omegas.shape[0] == 0:
        raise EmptyChainError("chain stores no precision matrices")
    w = chain.omega_weights / chain.omega_weights.sum()
    estimate = np.tensordot(w, chain.omegas, axes=1)
    return (estimate + estimate.T) / 2.0


def edge_probs(chain: WeightedChain) -> EdgeProbMatrix:
    """
    Weighted share of visits in which every edge is present.

    p_jk = sum_t 1((j, k) in E_t) w_t / sum_t w_t

    Raises:
        EmptyChainError: If the chain holds no samples
    """
    if chain.n_saved == 0:
        raise EmptyChainError("chain holds no samples")
    w = chain.weights / chain.weights.sum()
    upper = np.clip(w @ chain.graph_bits.astype(float), 0.0, 1.0)
    return EdgeProbMatrix.from_upper(chain.p, upper)


def select_median_graph(probs: EdgeProbMatrix) -> Graph:
    """Edges whose inclusion probability is strictly above one half."""
    return Graph.from_upper_bits(probs.p, probs.upper() > MEDIAN_THRESHOLD)


def bfdr(probs: EdgeProbMatrix, threshold: float) -> float:
    """
    Bayesian false discovery rate of the edges with probability >= threshold.

    Returns:
        Mean of 1 - p_jk over the selected edges, or nan when none is selected
    """
    upper = probs.upper()
    selected = upper >= threshold
    if not selected.any():
        return float("nan")
    return float(np.sum(1.0 - upper[selected]) / np.count_nonzero(selected))


def select_bfdr_graph(
    probs: EdgeProbMatrix, alpha: float = DEFAULT_ALPHA
) -> Tuple[Graph, float]:
    """
    Most inclusive graph whose BFDR stays below alpha.

    Candidate thresholds are the distinct observed probabilities; the
    smallest one with BFDR < alpha is chosen.

    Args:
        probs: Edge inclusion probabilities
        alpha: BFDR budget in (0, 1]

    Returns:
        (graph, threshold); the empty graph and threshold 1 when no
        candidate qualifies
    """
    if not 0.0 < alpha <= 1.0:
        raise InputError(f"alpha must lie in (0, 1], got {alpha}")
    upper = probs.upper()
    for s in np.unique(upper):
        rate = bfdr(probs, s)
        if not np.isnan(rate) and rate < alpha:
            return Graph.from_upper_bits(probs.p, upper >= s), float(s)
    return Graph.empty(probs.p), 1.0


def smooth_estimates(chain: WeightedChain, design: DesignMatrix) -> np.ndarray:
    """Fitted curves Phi beta_i from the mean coefficients, n x r."""
    if chain.n_saved == 0:
        raise EmptyChainError("chain holds no samples")
    if design.n_basis != chain.p:
        raise InputError("design matrix and chain disagree on p")
    return chain.beta_mean @ design.values.T


def summarize(chain: WeightedChain, alpha: float = DEFAULT_ALPHA) -> PosteriorSummary:
    """Compute every summary of a chain."""
    probs = edge_probs(chain)
    bfdr_graph, threshold = select_bfdr_graph(probs, alpha)
    return PosteriorSummary(
        omega_hat=omega_hat(chain),
        edge_probs=probs,
        selected_graphs={"median": select_median_graph(probs), "bfdr": bfdr_graph},
        bfdr_threshold=threshold,
        alpha=alpha,
        beta_hat=chain.beta_mean,
        mu_hat=chain.mu_mean,
        tau2_hat=chain.tau2_mean,
        extras={
            "mean_edges": float(
                np.sum(chain.weights * chain.graph_bits.sum(axis=1))
                / chain.weights.sum()
            ),
            "n_saved": float(chain.n_saved),
        },
    )
