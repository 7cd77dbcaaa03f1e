"""
Cubic B-spline bases over the curve domain.

Builds clamped knot vectors with equally spaced interior knots, evaluates the
basis at single points with the Cox-de Boor recursion and assembles the
r x p design matrix of the smoothing model with scipy. Each coefficient is
also mapped to the part of the domain it represents, so graph nodes can be
labelled with spectral bands.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.interpolate import BSpline

from app.errors import DomainError, InputError, InvalidSpecError

CUBIC = 3


class BasisSpec(BaseModel):
    """
    Clamped B-spline basis on [domain_lo, domain_hi].

    Attributes:
        domain_lo: Left end of the curve domain
        domain_hi: Right end of the curve domain
        n_basis: Number of basis functions (p)
        degree: Polynomial degree, fixed to 3
    """

    model_config = ConfigDict(frozen=True)

    domain_lo: float
    domain_hi: float
    n_basis: int
    degree: int = CUBIC

    @model_validator(mode="after")
    def _check(self) -> "BasisSpec":
        if self.degree != CUBIC:
            raise ValueError("only cubic B-splines (degree 3) are supported")
        if not self.domain_lo < self.domain_hi:
            raise ValueError("domain_lo must be smaller than domain_hi")
        if self.n_basis < self.degree + 1:
            raise ValueError(
                f"n_basis must be at least degree + 1 = {self.degree + 1}"
            )
        return self


@dataclass(frozen=True)
class DesignMatrix:
    """
    Basis functions evaluated on an observation grid.

    Attributes:
        values: r x p matrix, element (l, j) is phi_j(s_l)
        grid: r ascending grid points
    """

    values: np.ndarray
    grid: np.ndarray
    gram: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        grid = np.asarray(self.grid, dtype=float)
        if values.ndim != 2 or values.shape[0] != grid.shape[0]:
            raise InputError("design matrix rows must match the grid length")
        values.setflags(write=False)
        grid.setflags(write=False)
        gram = values.T @ values
        gram.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "gram", gram)

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @property
    def n_basis(self) -> int:
        return self.values.shape[1]


def make_knots(spec: BasisSpec) -> np.ndarray:
    """
    Build the clamped knot vector of a basis.

    The end points are repeated degree + 1 times and the p - degree - 1
    interior knots are equally spaced.

    Args:
        spec: Basis specification

    Returns:
        Nondecreasing knot vector of length n_basis + degree + 1

    Raises:
        InvalidSpecError: If n_basis < degree + 1
    """
    k = spec.degree
    if spec.n_basis < k + 1:
        raise InvalidSpecError(f"n_basis must be at least {k + 1}")
    n_interior = spec.n_basis - k - 1
    interior = np.linspace(spec.domain_lo, spec.domain_hi, n_interior + 2)[1:-1]
    return np.concatenate(
        [
            np.full(k + 1, spec.domain_lo),
            interior,
            np.full(k + 1, spec.domain_hi),
        ]
    )


def _find_span(knots: np.ndarray, degree: int, n_basis: int, s: float) -> int:
    # The right end point belongs to the last non-degenerate span.
    if s >= knots[n_basis]:
        return n_basis - 1
    return int(np.searchsorted(knots, s, side="right") - 1)


def _nonzero_basis(knots: np.ndarray, degree: int, span: int, s: float) -> np.ndarray:
    """Cox-de Boor triangle for the degree + 1 functions alive on a span."""
    values = np.zeros(degree + 1)
    left = np.zeros(degree + 1)
    right = np.zeros(degree + 1)
    values[0] = 1.0
    for j in range(1, degree + 1):
        left[j] = s - knots[span + 1 - j]
        right[j] = knots[span + j] - s
        saved = 0.0
        for r in range(j):
            temp = values[r] / (right[r + 1] + left[j - r])
            values[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        values[j] = saved
    return values


def eval_basis(spec: BasisSpec, s: float) -> np.ndarray:
    """
    Evaluate all p basis functions at one point.

    Args:
        spec: Basis specification
        s: Evaluation point in [domain_lo, domain_hi]

    Returns:
        Vector of p nonnegative values summing to one, with at most
        degree + 1 nonzero entries

    Raises:
        DomainError: If s lies outside the domain
    """
    if not spec.domain_lo <= s <= spec.domain_hi:
        raise DomainError(
            f"point {s} outside basis domain [{spec.domain_lo}, {spec.domain_hi}]"
        )
    knots = make_knots(spec)
    return _eval_with_knots(knots, spec, float(s))


def _eval_with_knots(knots: np.ndarray, spec: BasisSpec, s: float) -> np.ndarray:
    p, k = spec.n_basis, spec.degree
    span = _find_span(knots, k, p, s)
    out = np.zeros(p)
    out[span - k : span + 1] = _nonzero_basis(knots, k, span, s)
    return out


def build_design(spec: BasisSpec, grid) -> DesignMatrix:
    """
    Assemble the design matrix Phi on an observation grid.

    Args:
        spec: Basis specification
        grid: Strictly ascending grid points inside the domain

    Returns:
        DesignMatrix whose row l equals eval_basis(spec, grid[l])

    Raises:
        InputError: If the grid is empty or not strictly ascending
        DomainError: If a grid point lies outside the domain
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise InputError("grid must contain at least one point")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise InputError("grid must be strictly ascending")
    if grid[0] < spec.domain_lo or grid[-1] > spec.domain_hi:
        raise DomainError("grid extends outside the basis domain")
    values = BSpline.design_matrix(grid, make_knots(spec), spec.degree).toarray()
    return DesignMatrix(values=values, grid=grid)


def greville_abscissae(spec: BasisSpec) -> np.ndarray:
    """Knot averages t_{j+1..j+degree}, one per basis function."""
    knots = make_knots(spec)
    k = spec.degree
    return np.array(
        [knots[j + 1 : j + k + 1].mean() for j in range(spec.n_basis)]
    )


def band_of_node(spec: BasisSpec, j: int) -> Tuple[float, float]:
    """
    Domain sub-interval represented by coefficient j.

    The interval runs between the midpoints of consecutive Greville abscissae,
    so the p intervals tile [domain_lo, domain_hi] without overlap.

    Args:
        spec: Basis specification
        j: 0-based coefficient index

    Returns:
        (lo, hi) bounds of the band
    """
    if not 0 <= j < spec.n_basis:
        raise InputError(f"node index {j} outside 0..{spec.n_basis - 1}")
    g = greville_abscissae(spec)
    mids = (g[:-1] + g[1:]) / 2.0
    lo = spec.domain_lo if j == 0 else float(mids[j - 1])
    hi = spec.domain_hi if j == spec.n_basis - 1 else float(mids[j])
    return lo, hi


def node_bands(spec: BasisSpec) -> List[Tuple[float, float]]:
    return [band_of_node(spec, j) for j in range(spec.n_basis)]
