"""
Export of fit summaries and run manifests.

Every matrix is written as a headerless CSV with 17 significant digits.
Heatmaps are static SVGs rendered with the Agg backend; the SVG hash salt
and date are pinned so identical summaries give identical files.
"""

import json
import os
import platform
import subprocess
import time
from pathlib import Path
from typing import Dict, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import psutil  # noqa: E402

from app import __version__  # noqa: E402
from app.bspline import BasisSpec, DesignMatrix, node_bands  # noqa: E402
from app.data_io import FLOAT_FORMAT  # noqa: E402
from app.graph import Graph, write_edgelist  # noqa: E402
from app.posterior import EdgeProbMatrix, PosteriorSummary, bfdr  # noqa: E402

plt.rcParams["svg.hashsalt"] = "spectragraph"

SUMMARY_FILES = (
    "edge_probs.csv",
    "omega_hat.csv",
    "beta_hat.csv",
    "graph_median.edgelist",
    "graph_bfdr.edgelist",
    "graph_bfdr.json",
    "fitted_curves.csv",
    "node_bands.csv",
    "edge_probs.svg",
    "omega_hat.svg",
    "beta_hat.svg",
)


def _write_matrix(matrix: np.ndarray, path: Path) -> None:
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt=FLOAT_FORMAT)


def plot_heatmap(
    matrix: np.ndarray,
    path: Path,
    title: str,
    omit_diagonal: bool = False,
    cmap: str = "viridis",
    xlabel: str = "node",
    ylabel: str = "node",
) -> None:
    """
    Save a matrix as an SVG heatmap.

    Args:
        matrix: Values to draw
        path: Output file
        title: Figure title
        omit_diagonal: Mask the diagonal (square matrices only)
    """
    values = np.array(matrix, dtype=float)
    if omit_diagonal:
        np.fill_diagonal(values, np.nan)
    rows, cols = values.shape
    fig, ax = plt.subplots(figsize=(6, 5))
    image = ax.imshow(
        np.ma.masked_invalid(values),
        cmap=cmap,
        interpolation="nearest",
        aspect="auto",
        extent=(0.5, cols + 0.5, rows + 0.5, 0.5),
    )
    fig.colorbar(image, ax=ax)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_graph_selection(
    graph: Graph,
    probs: EdgeProbMatrix,
    rule: str,
    out_dir: Path,
    threshold: Optional[float] = None,
    alpha: Optional[float] = None,
) -> Path:
    """
    Write graph_<rule>.edgelist and, for the BFDR rule, graph_bfdr.json.

    Returns:
        Path of the edge list
    """
    out_dir = Path(out_dir)
    edgelist = out_dir / f"graph_{rule}.edgelist"
    write_edgelist(graph, edgelist)
    if rule == "bfdr":
        rate = bfdr(probs, threshold) if threshold is not None else float("nan")
        info = {
            "threshold": threshold,
            "alpha": alpha,
            "n_edges": graph.n_edges,
            "bfdr": None if np.isnan(rate) else rate,
        }
        (out_dir / "graph_bfdr.json").write_text(json.dumps(info, indent=2))
    return edgelist


def write_summary(
    summary: PosteriorSummary,
    basis: BasisSpec,
    design: DesignMatrix,
    out_dir: Path,
) -> None:
    """
    Write every summary artifact of a fit.

    Args:
        summary: Posterior summary
        basis: Basis of the fit, used for the node-band map
        design: Design matrix on the data grid, used for the fitted curves
        out_dir: Output directory (must exist)
    """
    out_dir = Path(out_dir)
    probs = summary.edge_probs

    _write_matrix(probs.values, out_dir / "edge_probs.csv")
    _write_matrix(summary.omega_hat, out_dir / "omega_hat.csv")
    _write_matrix(summary.beta_hat, out_dir / "beta_hat.csv")

    write_graph_selection(summary.selected_graphs["median"], probs, "median", out_dir)
    write_graph_selection(
        summary.selected_graphs["bfdr"],
        probs,
        "bfdr",
        out_dir,
        threshold=summary.bfdr_threshold,
        alpha=summary.alpha,
    )

    fitted = summary.beta_hat @ design.values.T
    _write_matrix(np.vstack([design.grid, fitted]), out_dir / "fitted_curves.csv")

    bands = node_bands(basis)
    pd.DataFrame(
        {
            "node": np.arange(1, len(bands) + 1),
            "lo": [lo for lo, _ in bands],
            "hi": [hi for _, hi in bands],
        }
    ).to_csv(out_dir / "node_bands.csv", index=False, float_format=FLOAT_FORMAT)

    plot_heatmap(probs.values, out_dir / "edge_probs.svg", "Edge inclusion probability", cmap="Greys")
    plot_heatmap(
        summary.omega_hat,
        out_dir / "omega_hat.svg",
        "Posterior mean precision (diagonal omitted)",
        omit_diagonal=True,
        cmap="RdBu_r",
    )
    plot_heatmap(
        summary.beta_hat,
        out_dir / "beta_hat.svg",
        "Posterior mean coefficients",
        xlabel="basis function",
        ylabel="curve",
    )


def git_version() -> str:
    """Version from git describe, or the package version outside a checkout."""
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = result.stdout.strip()
    return described if result.returncode == 0 and described else __version__


def write_manifest(
    out_dir: Path,
    command: str,
    config: Dict,
    seed: int,
    started: float,
    counts: Optional[Dict] = None,
    name: str = "manifest.json",
) -> Path:
    """
    Record how a run was produced.

    Args:
        out_dir: Output directory
        command: Subcommand name
        config: Validated configuration, JSON-serializable
        seed: Root seed
        started: time.perf_counter() at the start of the run
        counts: Iteration and sample counts
        name: File name inside out_dir

    Returns:
        Path to manifest.json
    """
    manifest = {
        "command": command,
        "version": git_version(),
        "seed": seed,
        "config": config,
        "counts": counts or {},
        "wall_time_s": time.perf_counter() - started,
        "rss_bytes": psutil.Process(os.getpid()).memory_info().rss,
        "cpu_count": psutil.cpu_count(logical=True),
        "python": platform.python_version(),
    }
    path = Path(out_dir) / name
    path.write_text(json.dumps(manifest, indent=2))
    return path
