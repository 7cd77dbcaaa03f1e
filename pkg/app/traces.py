"""
Persistence of chain traces.

One directory per chain:
    tau2.csv            iteration,tau2,log_lik
    edges.csv           iteration,weight,edge_hash
    graphs.csv          edge_hash,edges (1-based "j-k" pairs joined by ';')
    omega.npy           stacked thinned precision matrices
    omega_weights.csv   iteration,weight
    beta_mean.csv       n x p mean coefficients
    mu_mean.csv         p mean of mu
    chain.json          counts and dimensions

Floats are written with 17 significant digits and read back with
round-trip parsing, so reloaded chains reproduce every summary bit-exactly.
"""

import hashlib
import json
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from app.data_io import FLOAT_FORMAT
from app.errors import TraceError
from app.gibbs_sampler import WeightedChain
from app.graph import edge_string, parse_edge_string

CHAIN_FILES = (
    "tau2.csv",
    "edges.csv",
    "graphs.csv",
    "omega.npy",
    "omega_weights.csv",
    "beta_mean.csv",
    "mu_mean.csv",
    "chain.json",
)


def edge_hash(bits: np.ndarray) -> str:
    """Short stable hash of an upper-triangle indicator vector."""
    packed = np.packbits(np.asarray(bits, dtype=bool)).tobytes()
    return hashlib.sha1(packed).hexdigest()[:16]


def chain_dir(out_dir: Path, k: int) -> Path:
    return Path(out_dir) / "chains" / f"chain_{k}"


def write_chain(chain: WeightedChain, directory: Path, meta: Dict = None) -> None:
    """
    Write the traces of one chain.

    Args:
        chain: Chain to persist
        directory: Target directory, created if needed
        meta: Extra entries for chain.json (seed, iteration counts)
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    hashes: List[str] = []
    graphs: Dict[str, str] = {}
    for t in range(chain.n_saved):
        key = edge_hash(chain.graph_bits[t])
        hashes.append(key)
        if key not in graphs:
            graphs[key] = edge_string(chain.graph(t))

    pd.DataFrame(
        {"iteration": chain.iterations, "tau2": chain.tau2, "log_lik": chain.log_lik}
    ).to_csv(directory / "tau2.csv", index=False, float_format=FLOAT_FORMAT)
    pd.DataFrame(
        {"iteration": chain.iterations, "weight": chain.weights, "edge_hash": hashes}
    ).to_csv(directory / "edges.csv", index=False, float_format=FLOAT_FORMAT)
    pd.DataFrame(
        {"edge_hash": list(graphs.keys()), "edges": list(graphs.values())}
    ).to_csv(directory / "graphs.csv", index=False)
    np.save(directory / "omega.npy", chain.omegas)
    pd.DataFrame(
        {"iteration": chain.omega_iterations, "weight": chain.omega_weights}
    ).to_csv(directory / "omega_weights.csv", index=False, float_format=FLOAT_FORMAT)
    np.savetxt(directory / "beta_mean.csv", chain.beta_mean, delimiter=",", fmt=FLOAT_FORMAT)
    np.savetxt(directory / "mu_mean.csv", chain.mu_mean[None, :], delimiter=",", fmt=FLOAT_FORMAT)

    info = {"p": chain.p, "n": chain.n, "n_saved": chain.n_saved, "n_omega": int(chain.omegas.shape[0])}
    info.update(meta or {})
    (directory / "chain.json").write_text(json.dumps(info, indent=2))


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(
            path,
            float_precision="round_trip",
            keep_default_na=False,
            dtype={"edge_hash": str, "edges": str},
        )
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise TraceError(f"cannot read {path}: {e}")


def read_chain(directory: Path) -> WeightedChain:
    """
    Load a chain written by write_chain.

    Raises:
        TraceError: If a file is missing or inconsistent
    """
    directory = Path(directory)
    missing = [name for name in CHAIN_FILES if not (directory / name).is_file()]
    if missing:
        raise TraceError(f"chain directory {directory} lacks {', '.join(missing)}")
    try:
        info = json.loads((directory / "chain.json").read_text())
        p, n = int(info["p"]), int(info["n"])
    except (ValueError, KeyError) as e:
        raise TraceError(f"corrupt chain.json in {directory}: {e}")

    scalars = _read_csv(directory / "tau2.csv")
    edges = _read_csv(directory / "edges.csv")
    graphs = _read_csv(directory / "graphs.csv")
    omega_w = _read_csv(directory / "omega_weights.csv")

    try:
        lookup = {
            str(row.edge_hash): parse_edge_string(str(row.edges), p).upper_bits()
            for row in graphs.itertuples(index=False)
        }
        m = p * (p - 1) // 2
        bits = np.zeros((len(edges), m), dtype=bool)
        for t, key in enumerate(edges["edge_hash"].astype(str)):
            bits[t] = lookup[key]
        omegas = np.load(directory / "omega.npy")
        beta_mean = np.loadtxt(directory / "beta_mean.csv", delimiter=",", ndmin=2)
        mu_mean = np.loadtxt(directory / "mu_mean.csv", delimiter=",", ndmin=1)
        return WeightedChain(
            p=p,
            n=n,
            graph_bits=bits,
            weights=edges["weight"].to_numpy(dtype=float),
            tau2=scalars["tau2"].to_numpy(dtype=float),
            log_lik=scalars["log_lik"].to_numpy(dtype=float),
            omegas=omegas.reshape(-1, p, p),
            omega_weights=omega_w["weight"].to_numpy(dtype=float),
            beta_mean=beta_mean.reshape(n, p),
            mu_mean=mu_mean.reshape(p),
            iterations=edges["iteration"].to_numpy(dtype=int),
            omega_iterations=omega_w["iteration"].to_numpy(dtype=int),
        )
    except TraceError:
        raise
    except Exception as e:
        raise TraceError(f"corrupt traces in {directory}: {type(e).__name__}: {e}")


def find_chain_dirs(path: Path) -> List[Path]:
    """Chain directories under a fit output directory, or path itself."""
    path = Path(path)
    if (path / "chain.json").is_file():
        return [path]
    found = sorted(
        (d for d in (path / "chains").glob("chain_*") if d.is_dir()),
        key=lambda d: int(d.name.split("_")[1]),
    ) if (path / "chains").is_dir() else []
    if not found:
        raise TraceError(f"no chain traces under {path}")
    return found
