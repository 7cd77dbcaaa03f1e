"""
Undirected graphs on coefficient nodes and the priors placed on them.

Graphs are immutable: an adjacency bitset (numpy bool matrix) for O(1)
membership plus a sorted tuple of 0-based (j, k) edges with j < k. Files use
1-based node indices; see read_edgelist / write_edgelist.
"""

import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, List, Literal, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from app.errors import DataError, InputError

Edge = Tuple[int, int]


@dataclass(frozen=True)
class Graph:
    """
    Undirected simple graph on n_nodes nodes.

    Attributes:
        n_nodes: Number of nodes (p)
        edges: Sorted tuple of 0-based (j, k) pairs with j < k
    """

    n_nodes: int
    edges: Tuple[Edge, ...] = ()
    adjacency: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_nodes < 1:
            raise InputError("a graph needs at least one node")
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        normalized = set()
        for j, k in self.edges:
            j, k = int(j), int(k)
            if j == k:
                raise InputError(f"self-loop on node {j}")
            if not (0 <= j < self.n_nodes and 0 <= k < self.n_nodes):
                raise InputError(f"edge ({j}, {k}) outside 0..{self.n_nodes - 1}")
            edge = (min(j, k), max(j, k))
            if edge in normalized:
                raise InputError(f"duplicate edge {edge}")
            normalized.add(edge)
            adj[edge] = adj[edge[::-1]] = True
        adj.setflags(write=False)
        object.__setattr__(self, "edges", tuple(sorted(normalized)))
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def empty(cls, n_nodes: int) -> "Graph":
        return cls(n_nodes)

    @classmethod
    def complete(cls, n_nodes: int) -> "Graph":
        return cls(n_nodes, tuple(combinations(range(n_nodes), 2)))

    @classmethod
    def from_adjacency(cls, adjacency) -> "Graph":
        """Build a graph from a symmetric 0/1 matrix with zero diagonal."""
        adj = np.asarray(adjacency)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise InputError("adjacency matrix must be square")
        adj = adj.astype(bool)
        if np.any(np.diag(adj)):
            raise InputError("adjacency matrix must have a zero diagonal")
        if not np.array_equal(adj, adj.T):
            raise InputError("adjacency matrix must be symmetric")
        rows, cols = np.nonzero(np.triu(adj, 1))
        return cls(adj.shape[0], tuple(zip(rows.tolist(), cols.tolist())))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def max_edges(self) -> int:
        return self.n_nodes * (self.n_nodes - 1) // 2

    def has_edge(self, j: int, k: int) -> bool:
        return bool(self.adjacency[j, k])

    def neighbors(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[j])

    def non_edges(self) -> List[Edge]:
        rows, cols = np.nonzero(np.triu(~self.adjacency, 1))
        return list(zip(rows.tolist(), cols.tolist()))

    def add_edge(self, j: int, k: int) -> "Graph":
        if self.has_edge(j, k):
            raise InputError(f"edge ({j}, {k}) already present")
        return Graph(self.n_nodes, self.edges + ((min(j, k), max(j, k)),))

    def remove_edge(self, j: int, k: int) -> "Graph":
        edge = (min(j, k), max(j, k))
        if not self.has_edge(*edge):
            raise InputError(f"edge {edge} not present")
        return Graph(self.n_nodes, tuple(e for e in self.edges if e != edge))

    def upper_bits(self) -> np.ndarray:
        """Upper-triangle indicators in row-major (j < k) order."""
        return self.adjacency[np.triu_indices(self.n_nodes, 1)].copy()

    @classmethod
    def from_upper_bits(cls, n_nodes: int, bits) -> "Graph":
        rows, cols = np.triu_indices(n_nodes, 1)
        bits = np.asarray(bits, dtype=bool)
        if bits.shape != rows.shape:
            raise InputError("edge indicator vector has the wrong length")
        return cls(n_nodes, tuple(zip(rows[bits].tolist(), cols[bits].tolist())))

    def key(self) -> frozenset:
        return frozenset(self.edges)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n_nodes))
        g.add_edges_from(self.edges)
        return g

    def is_decomposable(self) -> bool:
        """True when every cycle of length four or more has a chord."""
        return nx.is_chordal(self.to_networkx())


class GraphPrior(BaseModel):
    """
    Prior over graphs.

    Attributes:
        kind: "uniform" or "bernoulli"
        theta: Common edge probability, or a p x p matrix of per-edge
            probabilities (only used when kind is "bernoulli")
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["uniform", "bernoulli"] = "uniform"
    theta: Union[float, Tuple[Tuple[float, ...], ...]] = 0.5

    @field_validator("theta", mode="before")
    @classmethod
    def _coerce_theta(cls, value):
        if isinstance(value, np.ndarray):
            value = value.tolist()
        if isinstance(value, (list, tuple)):
            return tuple(tuple(float(x) for x in row) for row in value)
        return value

    @field_validator("theta")
    @classmethod
    def _check_theta(cls, value):
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 2:
            if arr.shape[0] != arr.shape[1] or not np.allclose(arr, arr.T):
                raise ValueError("theta matrix must be square and symmetric")
            off = arr[~np.eye(arr.shape[0], dtype=bool)]
        else:
            off = arr.ravel()
        if np.any(off <= 0.0) or np.any(off >= 1.0):
            raise ValueError("theta entries must lie strictly in (0, 1)")
        return value

    @classmethod
    def from_string(cls, text: str) -> "GraphPrior":
        """Parse "uniform" or "bernoulli=<theta>"."""
        text = text.strip().lower()
        if text == "uniform":
            return cls(kind="uniform")
        if text.startswith("bernoulli="):
            return cls(kind="bernoulli", theta=float(text.split("=", 1)[1]))
        raise ValueError(f"unknown graph prior '{text}'")

    def label(self) -> str:
        if self.kind == "uniform":
            return "uniform"
        if isinstance(self.theta, float):
            return f"bernoulli={self.theta:g}"
        return "bernoulli=matrix"

    def theta_matrix(self, p: int) -> np.ndarray:
        if isinstance(self.theta, tuple):
            mat = np.asarray(self.theta, dtype=float)
            if mat.shape != (p, p):
                raise InputError(
                    f"theta matrix is {mat.shape[0]}x{mat.shape[1]}, graph has {p} nodes"
                )
            return mat
        return np.full((p, p), float(self.theta))

    def edge_theta(self, p: int, edge: Edge) -> float:
        if isinstance(self.theta, tuple):
            return float(self.theta_matrix(p)[edge])
        return float(self.theta)


def log_prior(prior: GraphPrior, g: Graph) -> float:
    """
    Log prior density of a graph, up to an additive constant.

    Args:
        prior: Graph prior
        g: Graph

    Returns:
        0 for the uniform prior; sum over node pairs of the Bernoulli log
        probabilities otherwise

    Raises:
        InputError: If a per-edge theta matrix does not match g
    """
    if prior.kind == "uniform":
        return 0.0
    theta = prior.theta_matrix(g.n_nodes)
    iu = np.triu_indices(g.n_nodes, 1)
    present = g.adjacency[iu]
    t = theta[iu]
    return float(np.sum(np.where(present, np.log(t), np.log1p(-t))))


def prior_ratio_edge(prior: GraphPrior, e: Edge, present: bool, p: int) -> float:
    """
    Ratio pi(G -/+ e) / pi(G) for toggling one edge.

    Args:
        prior: Graph prior
        e: Edge being toggled
        present: True when e is currently in G (so it would be removed)
        p: Number of nodes

    Returns:
        Prior ratio of the toggled graph to the current one
    """
    if prior.kind == "uniform":
        return 1.0
    theta = prior.edge_theta(p, (min(e), max(e)))
    return (1.0 - theta) / theta if present else theta / (1.0 - theta)


def log_prior_ratio_add(prior: GraphPrior, e: Edge, p: int) -> float:
    return math.log(prior_ratio_edge(prior, e, present=False, p=p))


def graph_space_size(p: int) -> int:
    """Number of undirected graphs on p labelled nodes (exact integer)."""
    if p < 1:
        raise InputError("p must be at least 1")
    return 2 ** (p * (p - 1) // 2)


def shd(g1: Graph, g2: Graph, standardized: bool = False) -> float:
    """
    Structural Hamming distance between two undirected graphs.

    Args:
        g1: First graph
        g2: Second graph on the same nodes
        standardized: Divide by the maximum number of edges p(p-1)/2

    Returns:
        Number of edge insertions and deletions turning g1 into g2
    """
    if g1.n_nodes != g2.n_nodes:
        raise InputError(f"graphs have {g1.n_nodes} and {g2.n_nodes} nodes")
    diff = np.triu(g1.adjacency ^ g2.adjacency, 1)
    count = float(np.count_nonzero(diff))
    if standardized:
        return count / g1.max_edges if g1.max_edges else 0.0
    return count


def _check_probability(value: float, name: str) -> None:
    if not 0.0 <= value <= 1.0:
        raise InputError(f"{name} must lie in [0, 1], got {value}")


def sample_random_graph(p: int, sparsity: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi graph: every pair enters independently with prob. sparsity."""
    _check_probability(sparsity, "sparsity")
    n_pairs = p * (p - 1) // 2
    return Graph.from_upper_bits(p, rng.random(n_pairs) < sparsity)


def validate_partition(p: int, blocks: Sequence[Sequence[int]]) -> List[List[int]]:
    seen: List[int] = []
    for block in blocks:
        if len(block) == 0:
            raise InputError("blocks must not be empty")
        seen.extend(int(j) for j in block)
    if sorted(seen) != list(range(p)):
        raise InputError(f"blocks must cover nodes 0..{p - 1} exactly once")
    return [sorted(int(j) for j in block) for block in blocks]


def contiguous_blocks(p: int, sizes: Iterable[int]) -> List[List[int]]:
    """Split 0..p-1 into consecutive runs of the given sizes."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes) or sum(sizes) != p:
        raise InputError(f"block sizes {sizes} do not sum to p = {p}")
    bounds = np.cumsum([0] + sizes)
    return [list(range(bounds[i], bounds[i + 1])) for i in range(len(sizes))]


def sample_block_graph(
    p: int,
    blocks: Sequence[Sequence[int]],
    sparsity: float,
    rng: np.random.Generator,
) -> Graph:
    """
    Block-structured random graph.

    Edges appear only between nodes of the same block, each independently
    with probability sparsity.

    Args:
        p: Number of nodes
        blocks: Partition of 0..p-1
        sparsity: Within-block edge probability
        rng: Random generator

    Returns:
        Graph without cross-block edges

    Raises:
        InputError: If blocks is not a partition or sparsity is not in [0, 1]
    """
    _check_probability(sparsity, "sparsity")
    blocks = validate_partition(p, blocks)
    label = np.empty(p, dtype=int)
    for b, block in enumerate(blocks):
        label[block] = b
    rows, cols = np.triu_indices(p, 1)
    same = label[rows] == label[cols]
    bits = (rng.random(rows.size) < sparsity) & same
    return Graph.from_upper_bits(p, bits)


def write_edgelist(g: Graph, path: Path) -> None:
    """Write one "j,k" line per edge, 1-based."""
    with open(path, "w", encoding="utf-8") as fh:
        for j, k in g.edges:
            fh.write(f"{j + 1},{k + 1}\n")


def read_edgelist(path: Path, n_nodes: int) -> Graph:
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                j, k = (int(x) for x in parts)
            except ValueError:
                raise DataError(f"malformed edge '{line}' in {path}", row=lineno)
            edges.append((j - 1, k - 1))
    try:
        return Graph(n_nodes, tuple(edges))
    except InputError as e:
        raise DataError(f"invalid edge list {path}: {e}")


def write_adjacency_csv(g: Graph, path: Path) -> None:
    np.savetxt(path, g.adjacency.astype(int), fmt="%d", delimiter=",")


def read_adjacency_csv(path: Path) -> Graph:
    try:
        adj = np.loadtxt(path, delimiter=",", dtype=int, ndmin=2)
    except ValueError as e:
        raise DataError(f"cannot parse adjacency matrix {path}: {e}")
    try:
        return Graph.from_adjacency(adj)
    except InputError as e:
        raise DataError(f"invalid adjacency matrix {path}: {e}")


def edge_string(g: Graph) -> str:
    """Edges as 1-based "j-k" pairs joined by ';' (empty string if none)."""
    return ";".join(f"{j + 1}-{k + 1}" for j, k in g.edges)


def parse_edge_string(text: str, n_nodes: int) -> Graph:
    text = (text or "").strip()
    if not text:
        return Graph.empty(n_nodes)
    edges = []
    for token in text.split(";"):
        j, k = token.split("-")
        edges.append((int(j) - 1, int(k) - 1))
    return Graph(n_nodes, tuple(edges))


def structure_metrics(estimate: Graph, truth: Graph) -> dict:
    """
    Edge-recovery counts of an estimated graph against the truth.

    Returns:
        Dict with tp, fp, fn, precision, recall and standardized shd
    """
    if estimate.n_nodes != truth.n_nodes:
        raise InputError("graphs must have the same number of nodes")
    est = estimate.to_networkx()
    ref = truth.to_networkx()
    tp = sum(1 for u, v in est.edges if ref.has_edge(u, v))
    fp = est.number_of_edges() - tp
    fn = ref.number_of_edges() - tp
    precision: Optional[float] = tp / (tp + fp) if tp + fp else None
    recall: Optional[float] = tp / (tp + fn) if tp + fn else None
    return {
        "tp": tp,
        "fp": fp,
        "fn": fn,
        "precision": precision,
        "recall": recall,
        "shd": shd(estimate, truth, standardized=True),
    }
