"""
G-Wishart distribution utilities.

The density convention is

    p(Omega | G) = I_G(d, D)^-1 |Omega|^((d - 2) / 2) exp(-tr(Omega D) / 2)

restricted to precision matrices whose off-diagonal zeros match the
non-edges of G. On the complete graph this is a standard Wishart with
d + p - 1 degrees of freedom and scale matrix D^-1.

Direct sampling follows the block-completion scheme: draw an unconstrained
Wishart precision, invert it, and complete the covariance against the graph
by cyclic neighbourhood regressions. The normalizing constant I_G is
estimated by Monte Carlo over the free elements of the Cholesky factor and
is gated to small graphs.
"""

from dataclasses import dataclass, field
from typing import Optional, Tuple

import networkx as nx
import numpy as np
from scipy import linalg
from scipy.special import gammaln, logsumexp, multigammaln
from scipy.stats import wishart

from app.errors import (
    ConvergenceError,
    DomainError,
    InputError,
    UnsupportedError,
)
from app.graph import Graph

COMPLETION_TOL = 1e-8
COMPLETION_MAX_ITER = 1000
MC_MAX_NODES = 12
MC_MIN_SAMPLES = 1000
MC_CHUNK = 10_000
SYMMETRY_TOL = 1e-12

LOG2 = np.log(2.0)
LOG2PI = np.log(2.0 * np.pi)


def _cholesky(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        raise DomainError(f"{what} is not positive definite")


def _check_square_symmetric(matrix: np.ndarray, what: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InputError(f"{what} must be a square matrix")
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOL * scale:
        raise DomainError(f"{what} is not symmetric")
    return (matrix + matrix.T) / 2.0


@dataclass(frozen=True)
class GWishartParams:
    """
    Shape d and inverse scale D of a G-Wishart distribution.

    Attributes:
        shape: Degrees of freedom d, must exceed 2
        inv_scale: Symmetric positive definite p x p matrix D
    """

    shape: float
    inv_scale: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.shape > 2:
            raise DomainError(f"G-Wishart shape must exceed 2, got {self.shape}")
        D = _check_square_symmetric(self.inv_scale, "inverse scale D")
        chol = _cholesky(D, "inverse scale D")
        D.setflags(write=False)
        object.__setattr__(self, "inv_scale", D)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def identity(cls, p: int, shape: float = 3.0, scale: float = 1.0):
        return cls(shape, scale * np.eye(p))

    @property
    def p(self) -> int:
        return self.inv_scale.shape[0]

    def scale_matrix(self) -> np.ndarray:
        """D^-1, the Wishart scale on the complete graph."""
        return linalg.cho_solve((self.chol, True), np.eye(self.p))

    def scale_chol_upper(self) -> np.ndarray:
        """Upper-triangular T with D^-1 = T^T T."""
        return linalg.cholesky(self.scale_matrix(), lower=False)


@dataclass(frozen=True)
class PrecisionMatrix:
    """
    Precision matrix Markov with respect to a graph.

    Attributes:
        values: Symmetric positive definite p x p matrix, exactly zero at
            every off-diagonal position that is not an edge of graph
        graph: Graph the zero pattern refers to
    """

    values: np.ndarray
    graph: Graph

    def __post_init__(self):
        values = _check_square_symmetric(self.values, "precision matrix")
        if values.shape[0] != self.graph.n_nodes:
            raise InputError("precision matrix and graph dimensions differ")
        off_pattern = ~self.graph.adjacency & ~np.eye(values.shape[0], dtype=bool)
        if np.any(values[off_pattern] != 0.0):
            raise DomainError("precision matrix has nonzeros outside the graph")
        _cholesky(values, "precision matrix")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    def covariance(self) -> np.ndarray:
        chol = linalg.cholesky(self.values, lower=True)
        return linalg.cho_solve((chol, True), np.eye(self.p))


def log_density_unnorm(params: GWishartParams, omega: PrecisionMatrix) -> float:
    """
    Unnormalized G-Wishart log density.

    Args:
        params: Shape d and inverse scale D
        omega: Precision matrix in P_G

    Returns:
        ((d - 2) / 2) log|Omega| - tr(Omega D) / 2

    Raises:
        DomainError: If omega is not positive definite
    """
    if omega.p != params.p:
        raise InputError("precision matrix and parameters dimensions differ")
    chol = _cholesky(omega.values, "precision matrix")
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    trace = float(np.sum(omega.values * params.inv_scale))
    return 0.5 * (params.shape - 2.0) * logdet - 0.5 * trace


def complete_matrix(
    sigma: np.ndarray,
    g: Graph,
    tol: float = COMPLETION_TOL,
    max_iter: int = COMPLETION_MAX_ITER,
) -> PrecisionMatrix:
    """
    Complete a covariance against a graph.

    Finds Omega in P_G whose inverse agrees with sigma on the diagonal and on
    every edge. Each sweep regresses node j on its neighbours N_j and resets
    the non-neighbour covariances to the implied values; sweeps repeat until
    the largest change falls below tol.

    Args:
        sigma: Symmetric positive definite p x p matrix
        g: Target graph
        tol: Max-abs change per sweep at which the iteration stops
        max_iter: Maximum number of sweeps

    Returns:
        PrecisionMatrix Markov with respect to g

    Raises:
        DomainError: If sigma is not positive definite
        ConvergenceError: If the sweeps do not converge within max_iter
    """
    sigma = _check_square_symmetric(sigma, "covariance")
    p = sigma.shape[0]
    if p != g.n_nodes:
        raise InputError("covariance and graph dimensions differ")
    chol = _cholesky(sigma, "covariance")

    if g.n_edges == g.max_edges:
        omega = linalg.cho_solve((chol, True), np.eye(p))
        return PrecisionMatrix((omega + omega.T) / 2.0, g)

    neighbours = [g.neighbors(j) for j in range(p)]
    others = [np.delete(np.arange(p), j) for j in range(p)]
    W = sigma.copy()
    change = np.inf
    for _ in range(max_iter):
        previous = W.copy()
        for j in range(p):
            nb, rest = neighbours[j], others[j]
            if nb.size == 0:
                W[rest, j] = 0.0
                W[j, rest] = 0.0
                continue
            beta = linalg.solve(W[np.ix_(nb, nb)], sigma[nb, j], assume_a="pos")
            column = W[np.ix_(rest, nb)] @ beta
            W[rest, j] = column
            W[j, rest] = column
        change = float(np.max(np.abs(W - previous)))
        if change < tol:
            break
    else:
        raise ConvergenceError(
            f"matrix completion did not converge in {max_iter} sweeps", change
        )

    omega = np.zeros((p, p))
    for j in range(p):
        nb = neighbours[j]
        if nb.size == 0:
            omega[j, j] = 1.0 / sigma[j, j]
            continue
        beta = linalg.solve(W[np.ix_(nb, nb)], sigma[nb, j], assume_a="pos")
        omega[j, j] = 1.0 / (sigma[j, j] - W[j, nb] @ beta)
        omega[nb, j] = -beta * omega[j, j]
    return PrecisionMatrix((omega + omega.T) / 2.0, g)


def sample_direct(
    params: GWishartParams, g: Graph, rng: np.random.Generator
) -> PrecisionMatrix:
    """
    One exact draw from G-Wishart(d, D) on graph g.

    Args:
        params: Shape d and inverse scale D
        g: Graph the draw must be Markov with respect to
        rng: Random generator owned by the caller

    Returns:
        PrecisionMatrix with exact structural zeros

    Raises:
        ConvergenceError: If the completion step fails
    """
    p = params.p
    if g.n_nodes != p:
        raise InputError("graph and parameters dimensions differ")
    draw = wishart.rvs(
        df=params.shape + p - 1, scale=params.scale_matrix(), random_state=rng
    )
    K = np.atleast_2d(draw).reshape(p, p)
    if g.n_edges == g.max_edges:
        return PrecisionMatrix((K + K.T) / 2.0, g)
    chol = _cholesky((K + K.T) / 2.0, "Wishart draw")
    sigma = linalg.cho_solve((chol, True), np.eye(p))
    return complete_matrix(sigma, g)


def log_normconst_wishart(params: GWishartParams) -> float:
    """Closed-form log I_G for the complete graph (standard Wishart constant)."""
    p = params.p
    nu = params.shape + p - 1
    logdet_scale = -2.0 * np.sum(np.log(np.diag(params.chol)))
    return float(
        0.5 * nu * p * LOG2 + 0.5 * nu * logdet_scale + multigammaln(0.5 * nu, p)
    )


def log_normconst_decomposable(params: GWishartParams, g: Graph) -> float:
    """
    Closed-form log I_G for a decomposable (chordal) graph.

    The constant factorizes over the cliques and separators of a junction
    tree, each factor being the complete-graph constant of the matching
    sub-block of D.

    Raises:
        InputError: If g is not chordal
    """
    if g.n_nodes != params.p:
        raise InputError("graph and parameters dimensions differ")
    nxg = g.to_networkx()
    if not nx.is_chordal(nxg):
        raise InputError("graph is not decomposable")

    def block_term(nodes) -> float:
        idx = np.array(sorted(nodes))
        sub = GWishartParams(params.shape, params.inv_scale[np.ix_(idx, idx)])
        return log_normconst_wishart(sub)

    cliques = [frozenset(c) for c in nx.chordal_graph_cliques(nxg)]
    overlap = nx.Graph()
    overlap.add_nodes_from(range(len(cliques)))
    for a in range(len(cliques)):
        for b in range(a + 1, len(cliques)):
            shared = cliques[a] & cliques[b]
            if shared:
                overlap.add_edge(a, b, weight=len(shared))
    tree = nx.maximum_spanning_tree(overlap)

    total = sum(block_term(c) for c in cliques)
    for a, b in tree.edges:
        total -= block_term(cliques[a] & cliques[b])
    return float(total)


def _prefactor_terms(
    params: GWishartParams, g: Graph
) -> Tuple[float, np.ndarray, np.ndarray]:
    p = params.p
    adj = g.adjacency
    T = params.scale_chol_upper()
    nu = np.array([adj[i, i + 1 :].sum() for i in range(p)], dtype=float)
    k = np.array([adj[i, :i].sum() for i in range(p)], dtype=float)
    b = nu + k + 1.0
    d = params.shape
    log_t = np.log(np.diag(T))
    log_const = np.sum(
        0.5 * (d + nu) * LOG2
        + 0.5 * nu * LOG2PI
        + gammaln(0.5 * (d + nu))
        + (d + b - 1.0) * log_t
    )
    return float(log_const), nu, T


def _log_correction_chunk(
    d: float,
    nu: np.ndarray,
    T: np.ndarray,
    adj: np.ndarray,
    m: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    log f for m importance draws of the free Cholesky elements.

    Free entries of Psi are drawn (chi diagonals, standard normal edges);
    non-free entries follow from the zero constraints, working row by row on
    Phi = Psi T where Omega = Phi^T Phi.
    """
    p = T.shape[0]
    t = np.diag(T)
    psi = np.zeros((m, p, p))
    phi = np.zeros((m, p, p))
    penalty = np.zeros(m)
    for i in range(p):
        psi[:, i, i] = np.sqrt(rng.chisquare(d + nu[i], size=m))
        phi[:, i, i] = psi[:, i, i] * t[i]
        for j in range(i + 1, p):
            if adj[i, j]:
                psi[:, i, j] = rng.standard_normal(m)
                phi[:, i, j] = psi[:, i, i : j + 1] @ T[i : j + 1, j]
            else:
                cross = np.einsum("mr,mr->m", phi[:, :i, i], phi[:, :i, j])
                phi[:, i, j] = -cross / phi[:, i, i]
                psi[:, i, j] = (phi[:, i, j] - psi[:, i, i:j] @ T[i:j, j]) / t[j]
                penalty += psi[:, i, j] ** 2
    return -0.5 * penalty


def log_normconst_mc(
    params: GWishartParams,
    g: Graph,
    n_samples: int = 10_000,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, float]:
    """
    Monte Carlo estimate of log I_G(d, D).

    Args:
        params: Shape d and inverse scale D
        g: Graph
        n_samples: Number of importance draws, at least 1000
        rng: Random generator owned by the caller

    Returns:
        (estimate, std_error) on the log scale; the standard error is the
        delta-method value sd(f) / (sqrt(N) mean(f)) and is 0 when every
        Cholesky element is free

    Raises:
        UnsupportedError: If the graph has more than 12 nodes
        InputError: If n_samples is below 1000
    """
    p = params.p
    if g.n_nodes != p:
        raise InputError("graph and parameters dimensions differ")
    if p > MC_MAX_NODES:
        raise UnsupportedError(
            f"Monte Carlo normalizing constant is limited to p <= {MC_MAX_NODES}"
        )
    if n_samples < MC_MIN_SAMPLES:
        raise InputError(f"n_samples must be at least {MC_MIN_SAMPLES}")
    rng = rng if rng is not None else np.random.default_rng()

    log_const, nu, T = _prefactor_terms(params, g)
    if g.n_edges == g.max_edges:
        return log_const, 0.0

    chunks = []
    remaining = n_samples
    while remaining > 0:
        m = min(MC_CHUNK, remaining)
        chunks.append(_log_correction_chunk(params.shape, nu, T, g.adjacency, m, rng))
        remaining -= m
    log_f = np.concatenate(chunks)

    log_mean = logsumexp(log_f) - np.log(n_samples)
    w = np.exp(log_f - log_f.max())
    std_error = float(np.std(w, ddof=1) / (np.sqrt(n_samples) * np.mean(w)))
    return float(log_const + log_mean), std_error


def log_normconst_ratio_approx(params: GWishartParams, g: Graph) -> np.ndarray:
    """
    Approximate log I_{G+e}(d, D) - log I_{G-e}(d, D) for every node pair.

    Uses the ratio of the Cholesky prefactors only, treating the Monte Carlo
    correction terms of both graphs as equal.

    Returns:
        Vector over the upper-triangle pairs (row-major, j < k)
    """
    p = params.p
    rows, cols = np.triu_indices(p, 1)
    t = np.diag(params.scale_chol_upper())
    present = g.upper_bits()
    nu = np.array([g.adjacency[i, i + 1 :].sum() for i in range(p)], dtype=float)
    # nu of the lower endpoint in the graph that contains the edge
    nu_with = nu[rows] + (~present).astype(float)
    d = params.shape
    return (
        0.5 * LOG2
        + 0.5 * LOG2PI
        + gammaln(0.5 * (d + nu_with))
        - gammaln(0.5 * (d + nu_with - 1.0))
        + np.log(t[rows])
        + np.log(t[cols])
    )

