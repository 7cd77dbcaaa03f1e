"""
Pytest configuration and fixtures for the spectragraph test suite.

This module provides shared fixtures (temporary directories, seeded
generators and small synthetic datasets) for all test
modules in the project.
"""

import shutil
import tempfile
from pathlib import Path
from typing import Generator

import numpy as np
import pytest

from app.bspline import BasisSpec, build_design
from app.data_io import SpectraDataset, write_spectra
from app.gibbs_sampler import Hyperparameters, WeightedChain, run_chain
from app.graph import GraphPrior
from app.gwishart import GWishartParams


@pytest.fixture(scope="function")
def temp_dir() -> Generator[Path, None, None]:
    """Provide a temporary directory for each test."""
    temp_dir = Path(tempfile.mkdtemp())
    yield temp_dir
    shutil.rmtree(temp_dir, ignore_errors=True)


@pytest.fixture(scope="function")
def rng() -> np.random.Generator:
    """Provide a seeded random generator."""
    return np.random.default_rng(20240501)


@pytest.fixture(scope="session")
def small_basis() -> BasisSpec:
    """Five cubic basis functions on [0, 1]."""
    return BasisSpec(domain_lo=0.0, domain_hi=1.0, n_basis=5)


@pytest.fixture(scope="session")
def small_dataset(small_basis) -> SpectraDataset:
    """Eight smooth curves on 25 points generated from the small basis."""
    gen = np.random.default_rng(7)
    grid = np.linspace(0.0, 1.0, 25)
    design = build_design(small_basis, grid)
    betas = gen.normal(loc=[1.0, 2.0, 0.5, -1.0, 0.0], scale=0.5, size=(8, 5))
    curves = betas @ design.values.T + gen.normal(scale=0.05, size=(8, 25))
    return SpectraDataset(grid, curves)


@pytest.fixture(scope="session")
def small_hyperparameters(small_basis) -> Hyperparameters:
    """Default hyperparameters on the small basis."""
    return Hyperparameters(
        basis=small_basis,
        gw_prior=GWishartParams.identity(5),
        graph_prior=GraphPrior(kind="bernoulli", theta=0.3),
    )


@pytest.fixture(scope="session")
def small_chain(small_dataset, small_hyperparameters) -> WeightedChain:
    """A short chain on the small dataset."""
    return run_chain(
        small_dataset,
        small_hyperparameters,
        n_iter=120,
        burn_in=20,
        thin=5,
        rng=np.random.default_rng(11),
    )


@pytest.fixture(scope="function")
def spectra_csv(temp_dir, small_dataset) -> Path:
    """The small dataset written as a wide CSV."""
    path = temp_dir / "spectra.csv"
    write_spectra(small_dataset, path)
    return path
