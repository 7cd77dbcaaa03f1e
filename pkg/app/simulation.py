"""
Synthetic experiments and their scoring.

Three generators are provided:
    nonstructured: Erdos-Renyi graph, G-Wishart precision, Gaussian
        coefficients pushed through the basis plus white noise
    clustered: as nonstructured, with edges confined to blocks of nodes
    gp_matern: curves drawn from a Gaussian process with a sine mean and a
        Matern covariance

run_replicates fits every replicate (once per graph prior of a sweep),
scores it and writes per-replicate metrics and boxplot-ready quantiles.
Replicates run in a process pool; each draws from its own stream derived
from (seed, replicate index).
"""

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from app.bspline import BasisSpec, DesignMatrix, build_design
from app.data_io import FLOAT_FORMAT, SpectraDataset
from app.errors import DomainError, InputError, InvalidSpecError, NumericError
from app.gibbs_sampler import Hyperparameters, SamplerConfig, run_chain
from app.graph import (
    Graph,
    GraphPrior,
    contiguous_blocks,
    sample_block_graph,
    sample_random_graph,
    shd,
)
from app.gwishart import GWishartParams, PrecisionMatrix, sample_direct
from app.posterior import DEFAULT_ALPHA, omega_hat, smooth_estimates, summarize

GP_JITTER = 1e-10
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
METRIC_COLUMNS = ["shd_median_rule", "shd_bfdr_rule", "kl", "rmse", "runtime_s"]
# stream used for the shared truth when it is frozen across replicates
FROZEN_TRUTH_STREAM = 2**32 - 1


class ExperimentSpec(BaseModel):
    """
    Constants of one simulation campaign.

    Attributes:
        kind: "nonstructured", "clustered" or "gp_matern"
        p: Number of basis functions / graph nodes
        n: Number of curves per dataset
        r: Grid size (200 on [0, 1] for the graphical experiments, 100 on
            [0, pi/2] for the Gaussian process by default)
        sparsity: Edge probability of the true graph
        tau2_true: Noise variance added to the curves
        gw_d: Shape of the G-Wishart used to draw the true precision
        gw_D_scale: D = gw_D_scale * I for the true precision
        block_sizes: Sizes of the contiguous node blocks (clustered only)
        gp_mean_amplitude, gp_mean_frequency: Mean curve a * sin(f * t)
        gp_variance, matern_rho, matern_nu: Covariance v * Matern(|s - t|)
        domain_lo, domain_hi: Curve domain
        n_replicates: Number of datasets
        seed: Root seed of every replicate stream
        freeze_truth: Reuse one graph, precision and coefficient set across
            replicates and redraw only the noise
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["nonstructured", "clustered", "gp_matern"] = "nonstructured"
    p: int = Field(10, ge=4)
    n: int = Field(200, ge=1)
    r: Optional[int] = Field(None, ge=2)
    sparsity: float = Field(0.3, ge=0.0, le=1.0)
    tau2_true: float = Field(0.01, ge=0.0)
    gw_d: float = Field(3.0, gt=2.0)
    gw_D_scale: float = Field(1.0, gt=0.0)
    block_sizes: Optional[Tuple[int, ...]] = None
    gp_mean_amplitude: float = 3.0
    gp_mean_frequency: float = 4.0
    gp_variance: float = Field(5.0, gt=0.0)
    matern_rho: float = Field(0.5, gt=0.0)
    matern_nu: float = Field(0.5, gt=0.0)
    domain_lo: Optional[float] = None
    domain_hi: Optional[float] = None
    n_replicates: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    freeze_truth: bool = False

    @model_validator(mode="after")
    def _check(self) -> "ExperimentSpec":
        lo, hi = self.domain()
        if not lo < hi:
            raise ValueError("domain_lo must be smaller than domain_hi")
        if self.block_sizes is not None:
            if any(s < 1 for s in self.block_sizes) or sum(self.block_sizes) != self.p:
                raise ValueError(f"block_sizes must be positive and sum to p = {self.p}")
        return self

    def domain(self) -> Tuple[float, float]:
        default_hi = math.pi / 2 if self.kind == "gp_matern" else 1.0
        lo = 0.0 if self.domain_lo is None else self.domain_lo
        hi = default_hi if self.domain_hi is None else self.domain_hi
        return lo, hi

    def n_points(self) -> int:
        if self.r is not None:
            return self.r
        return 100 if self.kind == "gp_matern" else 200

    def grid(self) -> np.ndarray:
        lo, hi = self.domain()
        return np.linspace(lo, hi, self.n_points())

    def basis(self) -> BasisSpec:
        lo, hi = self.domain()
        return BasisSpec(domain_lo=lo, domain_hi=hi, n_basis=self.p)

    def blocks(self) -> List[List[int]]:
        if self.block_sizes is not None:
            return contiguous_blocks(self.p, self.block_sizes)
        # four near-equal contiguous blocks
        k = min(4, self.p)
        sizes = [self.p // k + (1 if i < self.p % k else 0) for i in range(k)]
        return contiguous_blocks(self.p, sizes)


@dataclass(frozen=True)
class SyntheticDataset:
    """
    Generated curves and the truth behind them.

    Attributes:
        data: Observed curves
        design: Design matrix of the spec's basis on the grid
        graph: True graph (graphical experiments)
        omega: True precision matrix (graphical experiments)
        betas: True coefficients (graphical experiments)
        sigma_true: Grid covariance (Gaussian process experiment)
        sigma_coef: Coefficient-space covariance used for KL scoring
    """

    data: SpectraDataset
    design: DesignMatrix
    graph: Optional[Graph] = None
    omega: Optional[PrecisionMatrix] = None
    betas: Optional[np.ndarray] = None
    sigma_true: Optional[np.ndarray] = None
    sigma_coef: Optional[np.ndarray] = None

    def __post_init__(self):
        n, r = self.data.curves.shape
        if self.design.n_points != r:
            raise InputError("design matrix and data grid differ")
        if self.betas is not None and self.betas.shape != (n, self.design.n_basis):
            raise InputError("true coefficients do not match the data")
        if self.sigma_true is not None and self.sigma_true.shape != (r, r):
            raise InputError("grid covariance does not match the grid")


def _check_kind(spec: ExperimentSpec, kind: str) -> None:
    if spec.kind != kind:
        raise InvalidSpecError(f"expected a '{kind}' experiment, got '{spec.kind}'")


def _graphical_dataset(
    spec: ExperimentSpec,
    graph: Graph,
    rng: np.random.Generator,
    truth: Optional[SyntheticDataset],
) -> SyntheticDataset:
    design = build_design(spec.basis(), spec.grid())
    if truth is not None:
        graph, omega, betas = truth.graph, truth.omega, truth.betas
    else:
        params = GWishartParams.identity(spec.p, spec.gw_d, spec.gw_D_scale)
        omega = sample_direct(params, graph, rng)
        # beta_i ~ N(0, Omega^-1) through the Cholesky factor of Omega
        chol = linalg.cholesky(omega.values, lower=True)
        z = rng.standard_normal((spec.n, spec.p))
        betas = linalg.solve_triangular(chol.T, z.T, lower=False).T
    mean = betas @ design.values.T
    noise = rng.standard_normal(mean.shape) * math.sqrt(spec.tau2_true)
    data = SpectraDataset(design.grid, mean + noise if spec.tau2_true > 0 else mean)
    return SyntheticDataset(
        data=data,
        design=design,
        graph=graph,
        omega=omega,
        betas=betas,
        sigma_coef=omega.covariance(),
    )


def gen_experiment1(
    spec: ExperimentSpec,
    rng: np.random.Generator,
    truth: Optional[SyntheticDataset] = None,
) -> SyntheticDataset:
    """
    Unstructured graph experiment.

    The graph has independent edges with probability spec.sparsity, Omega is
    a G-Wishart(gw_d, gw_D_scale I) draw on it, beta_i ~ N(0, Omega^-1) and
    Y_i ~ N(Phi beta_i, tau2_true I).

    Args:
        spec: Experiment constants
        rng: Random generator
        truth: Previous dataset whose graph, Omega and coefficients are reused

    Returns:
        SyntheticDataset with the full truth
    """
    _check_kind(spec, "nonstructured")
    graph = None if truth is not None else sample_random_graph(spec.p, spec.sparsity, rng)
    return _graphical_dataset(spec, graph, rng, truth)


def gen_experiment2(
    spec: ExperimentSpec,
    blocks: Optional[Sequence[Sequence[int]]] = None,
    rng: Optional[np.random.Generator] = None,
    truth: Optional[SyntheticDataset] = None,
) -> SyntheticDataset:
    """Block-structured graph experiment; blocks default to spec.blocks()."""
    _check_kind(spec, "clustered")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    blocks = blocks if blocks is not None else spec.blocks()
    graph = (
        None
        if truth is not None
        else sample_block_graph(spec.p, blocks, spec.sparsity, rng)
    )
    return _graphical_dataset(spec, graph, rng, truth)


def _matern_bessel(d: np.ndarray, rho: float, nu: float) -> np.ndarray:
    x = math.sqrt(2.0 * nu) * d / rho
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        value = (2.0 ** (1.0 - nu) / gamma_fn(nu)) * x**nu * kv(nu, x)
    value = np.where(x == 0, 1.0, value)
    return np.nan_to_num(value, nan=0.0)


def matern(dist, rho: float, nu: float):
    """
    Matern correlation at distance dist.

    Args:
        dist: Nonnegative scalar or array of distances
        rho: Range, > 0
        nu: Smoothness, > 0

    Returns:
        Correlation in (0, 1], equal to 1 at zero distance; closed form
        exp(-dist / rho) when nu = 0.5
    """
    if not (rho > 0 and nu > 0):
        raise InputError("rho and nu must be positive")
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0):
        raise InputError("distances must be nonnegative")
    value = np.exp(-d / rho) if nu == 0.5 else _matern_bessel(d, rho, nu)
    return float(value) if np.ndim(dist) == 0 else value


def projection_operator(design: DesignMatrix) -> np.ndarray:
    """Least-squares map (Phi^T Phi)^-1 Phi^T from grid to coefficients."""
    return linalg.solve(design.gram, design.values.T, assume_a="pos")


def gen_gp_dataset(spec: ExperimentSpec, rng: np.random.Generator) -> SyntheticDataset:
    """
    Gaussian process curves with mean a sin(f t) and covariance v Matern.

    The truth stores the grid covariance and its least-squares projection
    P Sigma P^T onto the coefficient space.

    Raises:
        NumericError: If the covariance is not positive definite after jitter
    """
    _check_kind(spec, "gp_matern")
    grid = spec.grid()
    design = build_design(spec.basis(), grid)
    mean = spec.gp_mean_amplitude * np.sin(spec.gp_mean_frequency * grid)
    dist = np.abs(grid[:, None] - grid[None, :])
    sigma = spec.gp_variance * matern(dist, spec.matern_rho, spec.matern_nu)
    try:
        chol = linalg.cholesky(sigma + GP_JITTER * np.eye(grid.size), lower=True)
    except linalg.LinAlgError:
        raise NumericError("Matern covariance is not positive definite")
    curves = mean + rng.standard_normal((spec.n, grid.size)) @ chol.T
    P = projection_operator(design)
    sigma_coef = P @ sigma @ P.T
    return SyntheticDataset(
        data=SpectraDataset(grid, curves),
        design=design,
        sigma_true=sigma,
        sigma_coef=(sigma_coef + sigma_coef.T) / 2.0,
    )


def generate(
    spec: ExperimentSpec,
    rng: np.random.Generator,
    truth: Optional[SyntheticDataset] = None,
) -> SyntheticDataset:
    if spec.kind == "nonstructured":
        return gen_experiment1(spec, rng, truth)
    if spec.kind == "clustered":
        return gen_experiment2(spec, spec.blocks(), rng, truth)
    return gen_gp_dataset(spec, rng)


def _spd_chol(matrix: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(matrix, lower=True)
    except linalg.LinAlgError:
        raise DomainError(f"{what} is not positive definite")


def kl_divergence(sigma_true: np.ndarray, sigma_hat: np.ndarray) -> float:
    """
    KL = [tr(Sigma_true^-1 Sigma_hat) - p - log(|Sigma_hat| / |Sigma_true|)] / 2.

    Raises:
        InputError: If the shapes differ
        DomainError: If either matrix is not positive definite
    """
    sigma_true = np.asarray(sigma_true, dtype=float)
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    if sigma_true.shape != sigma_hat.shape or sigma_true.ndim != 2:
        raise InputError("covariance matrices must be square and of equal size")
    p = sigma_true.shape[0]
    chol_true = _spd_chol(sigma_true, "true covariance")
    chol_hat = _spd_chol(sigma_hat, "estimated covariance")
    trace = np.trace(linalg.cho_solve((chol_true, True), sigma_hat))
    logdet_ratio = 2.0 * (
        np.sum(np.log(np.diag(chol_hat))) - np.sum(np.log(np.diag(chol_true)))
    )
    return max(0.0, float(0.5 * (trace - p - logdet_ratio)))


def rmse_curves(fitted: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared elementwise difference of two n x r curve sets."""
    fitted = np.asarray(fitted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if fitted.shape != truth.shape:
        raise InputError(f"shapes differ: {fitted.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((fitted - truth) ** 2)))


@dataclass(frozen=True)
class _ReplicateTask:
    spec: ExperimentSpec
    hp: Hyperparameters
    sampler: SamplerConfig
    prior: GraphPrior
    replicate: int
    prior_index: int
    alpha: float


@dataclass
class ReplicateReport:
    """Per-replicate metrics and their per-prior quantiles."""

    metrics: pd.DataFrame
    aggregate: pd.DataFrame


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _run_task(task: _ReplicateTask) -> Dict[str, object]:
    spec = task.spec
    row: Dict[str, object] = {
        "replicate": task.replicate + 1,
        "graph_prior": task.prior.label(),
        "shd_median_rule": np.nan,
        "shd_bfdr_rule": np.nan,
        "kl": np.nan,
        "rmse": np.nan,
        "runtime_s": np.nan,
        "n_edges_true": np.nan,
        "bfdr_threshold": np.nan,
        "error": "",
    }
    started = time.perf_counter()
    try:
        truth = None
        if spec.freeze_truth and spec.kind != "gp_matern":
            truth = generate(spec, _stream(spec.seed, FROZEN_TRUTH_STREAM))
        dataset = generate(spec, _stream(spec.seed, task.replicate, 0), truth)
        hp = replace(task.hp, graph_prior=task.prior)
        chain = run_chain(
            dataset.data,
            hp,
            task.sampler.n_iter,
            task.sampler.burn_in,
            task.sampler.thin,
            _stream(spec.seed, task.replicate, 1 + task.prior_index),
            options=task.sampler.bd_options(),
            design=dataset.design,
        )
        summary = summarize(chain, task.alpha)
        fitted = smooth_estimates(chain, dataset.design)
        row["rmse"] = rmse_curves(fitted, dataset.data.curves)
        row["bfdr_threshold"] = summary.bfdr_threshold
        if dataset.graph is not None:
            row["n_edges_true"] = dataset.graph.n_edges
            row["shd_median_rule"] = shd(
                summary.selected_graphs["median"], dataset.graph, standardized=True
            )
            row["shd_bfdr_rule"] = shd(
                summary.selected_graphs["bfdr"], dataset.graph, standardized=True
            )
        if dataset.sigma_coef is not None:
            sigma_hat = linalg.inv(omega_hat(chain))
            row["kl"] = kl_divergence(dataset.sigma_coef, (sigma_hat + sigma_hat.T) / 2)
    except Exception as e:
        row["error"] = f"{type(e).__name__}: {e}"
    row["runtime_s"] = time.perf_counter() - started
    return row


def aggregate_metrics(metrics: pd.DataFrame) -> pd.DataFrame:
    """Count, mean, sd and quantiles of every metric per graph prior."""
    columns = ["graph_prior", "metric", "count", "mean", "sd"] + [
        f"q{int(round(100 * q)):02d}" for q in QUANTILES
    ]
    ok = metrics[metrics["error"] == ""]
    rows = []
    for prior, group in ok.groupby("graph_prior", sort=False):
        for metric in METRIC_COLUMNS:
            values = group[metric].dropna().astype(float)
            if values.empty:
                continue
            quantiles = values.quantile(list(QUANTILES))
            rows.append(
                [prior, metric, len(values), values.mean(), values.std(ddof=1)]
                + [quantiles[q] for q in QUANTILES]
            )
    return pd.DataFrame(rows, columns=columns)


def run_replicates(
    spec: ExperimentSpec,
    hp: Hyperparameters,
    sampler: SamplerConfig,
    graph_priors: Optional[Sequence[GraphPrior]] = None,
    jobs: int = 1,
    out_dir: Optional[Path] = None,
    alpha: float = DEFAULT_ALPHA,
    verbose: bool = False,
) -> ReplicateReport:
    """
    Generate, fit, summarize and score every replicate.

    Every replicate dataset is fitted once per graph prior. A failing fit is
    recorded in the error column and the campaign continues.

    Args:
        spec: Experiment constants
        hp: Model hyperparameters (graph_prior is replaced by each sweep entry)
        sampler: Iteration counts and birth-death controls
        graph_priors: Priors to sweep, defaults to hp.graph_prior
        jobs: Number of worker processes
        out_dir: Directory for spec.json, metrics.csv and aggregate.csv
        alpha: BFDR budget of the BFDR selection rule
        verbose: Print one status line per finished fit

    Returns:
        ReplicateReport
    """
    if hp.p != spec.p:
        raise InvalidSpecError(f"hyperparameters have p = {hp.p}, spec has p = {spec.p}")
    priors = list(graph_priors) if graph_priors else [hp.graph_prior]
    tasks = [
        _ReplicateTask(spec, hp, sampler, prior, rep, k, alpha)
        for rep in range(spec.n_replicates)
        for k, prior in enumerate(priors)
    ]

    rows: List[Dict[str, object]] = []
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            for row in pool.map(_run_task, tasks):
                rows.append(row)
                if verbose:
                    _report(row, spec.n_replicates)
    else:
        for task in tasks:
            row = _run_task(task)
            rows.append(row)
            if verbose:
                _report(row, spec.n_replicates)

    metrics = pd.DataFrame(rows)
    report = ReplicateReport(metrics=metrics, aggregate=aggregate_metrics(metrics))
    if out_dir is not None:
        write_report(report, spec, hp, sampler, priors, Path(out_dir))
    return report


def _report(row: Dict[str, object], total: int) -> None:
    label = f"replicate {row['replicate']}/{total} [{row['graph_prior']}]"
    if row["error"]:
        print(f"❌ {label} failed: {row['error']}")
    else:
        print(f"✅ {label} done in {row['runtime_s']:.1f}s")


def write_report(
    report: ReplicateReport,
    spec: ExperimentSpec,
    hp: Hyperparameters,
    sampler: SamplerConfig,
    priors: Sequence[GraphPrior],
    out_dir: Path,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    description = {
        "experiment": spec.model_dump(mode="json"),
        "sampler": sampler.model_dump(mode="json"),
        "graph_priors": [prior.label() for prior in priors],
        "hyperparameters": {
            "gw_d": hp.gw_prior.shape,
            "gw_D": hp.gw_prior.inv_scale.tolist(),
            "sigma_mu2": hp.sigma_mu2,
            "a": hp.a,
            "b": hp.b,
        },
    }
    (out_dir / "spec.json").write_text(json.dumps(description, indent=2))
    report.metrics.to_csv(out_dir / "metrics.csv", index=False, float_format=FLOAT_FORMAT)
    report.aggregate.to_csv(
        out_dir / "aggregate.csv", index=False, float_format=FLOAT_FORMAT
    )
