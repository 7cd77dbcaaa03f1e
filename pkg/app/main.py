"""
spectragraph command line.

Subcommands:
    fit       Smooth a CSV of spectra and learn the coefficient graph
    simulate  Run a replicate campaign on synthetic data
    select    Re-select a graph from persisted chain traces

Every command validates its whole configuration before computing or
writing anything. Failures print a JSON object on stderr and exit with
2 (configuration), 3 (data) or 4 (numeric failure).

Environment Variables:
    SPECTRAGRAPH_SEED: Root seed, overridden by --seed
"""

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.artifacts import write_graph_selection, write_manifest, write_summary
from app.bspline import BasisSpec, build_design
from app.config import RunConfig, build_config, read_toml
from app.data_io import SpectraDataset, load_spectra
from app.errors import ConfigError, SpectraGraphError
from app.gibbs_sampler import (
    Hyperparameters,
    SamplerConfig,
    WeightedChain,
    pool_chains,
    run_chain,
)
from app.posterior import (
    DEFAULT_ALPHA,
    edge_probs,
    select_bfdr_graph,
    select_median_graph,
    summarize,
)
from app.simulation import run_replicates
from app.traces import chain_dir, find_chain_dirs, read_chain, write_chain

# flags shared by every subcommand, mapped onto RunConfig fields
COMMON_FLAGS = (
    "p_basis",
    "iters",
    "burnin",
    "thin",
    "seed",
    "graph_prior",
    "gw_d",
    "gw_D_scale",
    "sigma_mu2",
    "a",
    "b",
    "select",
    "out",
    "jobs",
    "proposal",
    "sigma_prop",
    "max_rate",
    "normalizer",
    "mc_samples",
    "verbose",
)
FIT_FLAGS = ("data", "label_column", "label_value", "normalize", "chains")
SIMULATION_FLAGS = {
    "experiment": "kind",
    "replicates": "n_replicates",
    "n_curves": "n",
    "sparsity": "sparsity",
    "tau2_true": "tau2_true",
    "freeze_truth": "freeze_truth",
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--out", type=Path, help="Output directory")
    parser.add_argument("--p-basis", type=int, help="Number of B-spline basis functions")
    parser.add_argument("--iters", type=int, help="Total sweeps")
    parser.add_argument("--burnin", type=int, help="Discarded sweeps")
    parser.add_argument("--thin", type=int, help="Store Omega every k-th sweep")
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument(
        "--graph-prior",
        action="append",
        help="uniform or bernoulli=theta; repeat to sweep priors in simulate",
    )
    parser.add_argument("--gw-d", type=float, help="G-Wishart shape d")
    parser.add_argument("--gw-D-scale", type=float, help="G-Wishart scale, D = c * I")
    parser.add_argument("--sigma-mu2", type=float, help="Prior variance of mu")
    parser.add_argument("--a", type=float, help="Noise shape hyperparameter")
    parser.add_argument("--b", type=float, help="Noise rate hyperparameter")
    parser.add_argument("--select", help="median or bfdr=alpha")
    parser.add_argument("--jobs", type=int, help="Worker processes, 0 for one per CPU")
    parser.add_argument("--proposal", choices=["conditional", "gaussian"])
    parser.add_argument("--sigma-prop", type=float, help="Scale of the gaussian proposal")
    parser.add_argument("--max-rate", type=float, help="Cap on birth/death rates")
    parser.add_argument("--normalizer", choices=["approx", "mc"])
    parser.add_argument("--mc-samples", type=int, help="Draws per normalizing constant")
    parser.add_argument(
        "--quiet", dest="verbose", action="store_const", const=False, help="No progress"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spectragraph",
        description="Joint B-spline smoothing and graph learning for bundles of curves",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="Fit a CSV of spectra")
    _add_common(fit)
    fit.add_argument("--data", type=Path, help="Spectra CSV")
    fit.add_argument("--label-column", help="Label column to filter on")
    fit.add_argument("--label-value", help="Label value to keep")
    fit.add_argument(
        "--normalize", action="store_const", const=True, help="Unit area per curve"
    )
    fit.add_argument("--chains", type=int, help="Independent chains")

    simulate = commands.add_parser("simulate", help="Run a simulation campaign")
    _add_common(simulate)
    simulate.add_argument(
        "--experiment", choices=["nonstructured", "clustered", "gp_matern"]
    )
    simulate.add_argument("--replicates", type=int, help="Number of datasets")
    simulate.add_argument("--n-curves", type=int, help="Curves per dataset")
    simulate.add_argument("--sparsity", type=float, help="Edge probability of the truth")
    simulate.add_argument("--tau2-true", type=float, help="Noise variance of the data")
    simulate.add_argument(
        "--freeze-truth",
        action="store_const",
        const=True,
        help="Share one true graph and precision across replicates",
    )

    select = commands.add_parser("select", help="Re-select a graph from saved traces")
    _add_common(select)
    select.add_argument("chain_dir", type=Path, help="Fit output or chain directory")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """
    Merge the config file and the parsed flags.

    Raises:
        ConfigError: If the merged configuration is invalid
    """
    file_values = read_toml(args.config) if args.config else {}
    names = list(COMMON_FLAGS)
    if args.command == "fit":
        names += FIT_FLAGS
    overrides: Dict[str, Any] = {name: getattr(args, name, None) for name in names}
    if args.command == "select":
        overrides["chain_dir"] = args.chain_dir
    simulation: Dict[str, Any] = {}
    if args.command == "simulate":
        simulation = {
            field: getattr(args, flag) for flag, field in SIMULATION_FLAGS.items()
        }
        # the basis size of a synthetic campaign is the experiment's p
        simulation["p"] = args.p_basis
        if simulation["p"] is None and "p_basis" in file_values:
            simulation["p"] = file_values["p_basis"]
    return build_config(file_values, overrides, simulation)


def _fit_chain(
    job: Tuple[SpectraDataset, Hyperparameters, SamplerConfig, np.random.SeedSequence, bool]
) -> WeightedChain:
    data, hp, sampler, seed_seq, verbose = job
    return run_chain(
        data,
        hp,
        sampler.n_iter,
        sampler.burn_in,
        sampler.thin,
        np.random.default_rng(seed_seq),
        options=sampler.bd_options(),
        verbose=verbose,
    )


def _require_out(config: RunConfig) -> Path:
    if config.out is None:
        raise ConfigError("an output directory is required (--out)")
    return config.out


def cmd_fit(config: RunConfig) -> int:
    """
    Fit one dataset and write traces, summaries and a manifest.

    Args:
        config: Validated run configuration

    Returns:
        Exit status
    """
    started = time.perf_counter()
    out = _require_out(config)
    if config.data is None:
        raise ConfigError("fit needs a dataset (--data)")
    data = load_spectra(
        config.data,
        normalize=config.normalize,
        label_column=config.label_column,
        label_value=config.label_value,
    )
    try:
        basis = BasisSpec(
            domain_lo=float(data.grid[0]),
            domain_hi=float(data.grid[-1]),
            n_basis=config.p_basis,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid basis: {e.errors()[0]['msg']}")
    hp = config.hyperparameters(basis)
    sampler = config.sampler()
    _, alpha = config.selection()
    print(
        f"Fitting {data.n_curves} curves x {data.n_points} points, p = {basis.n_basis}, "
        f"{config.chains} chain(s) of {sampler.n_iter} sweeps"
    )

    streams = np.random.SeedSequence(config.seed).spawn(config.chains)
    if config.chains == 1:
        chains = [_fit_chain((data, hp, sampler, streams[0], config.verbose))]
    else:
        workers = min(config.chains, config.workers())
        jobs = [(data, hp, sampler, s, False) for s in streams]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chains = list(pool.map(_fit_chain, jobs))

    out.mkdir(parents=True, exist_ok=True)
    for k, chain in enumerate(chains, start=1):
        write_chain(
            chain,
            chain_dir(out, k),
            meta={
                "chain": k,
                "seed": config.seed,
                "n_iter": sampler.n_iter,
                "burn_in": sampler.burn_in,
            },
        )
    pooled = pool_chains(chains)
    summary = summarize(pooled, alpha if alpha is not None else DEFAULT_ALPHA)
    write_summary(summary, basis, build_design(basis, data.grid), out)
    write_manifest(
        out,
        "fit",
        config.model_dump(mode="json"),
        config.seed,
        started,
        counts={
            "n_curves": data.n_curves,
            "n_points": data.n_points,
            "chains": config.chains,
            "n_saved": pooled.n_saved,
            "n_omega": int(pooled.omegas.shape[0]),
        },
    )
    rule, _ = config.selection()
    graph = summary.selected_graphs[rule]
    print(f"✅ Fit written to {out}: {rule} graph with {graph.n_edges} edges")
    return 0


def cmd_simulate(config: RunConfig) -> int:
    """
    Run a simulation campaign and write its replicate report.

    Returns:
        0 when at least one fit succeeded, 4 otherwise
    """
    started = time.perf_counter()
    out = _require_out(config)
    spec = config.experiment()
    hp = config.hyperparameters(spec.basis())
    sampler = config.sampler()
    priors = config.graph_priors()
    _, alpha = config.selection()
    print(
        f"Simulating {spec.kind}: {spec.n_replicates} replicate(s) x {len(priors)} "
        f"prior(s), p = {spec.p}, n = {spec.n}"
    )
    report = run_replicates(
        spec,
        hp,
        sampler,
        graph_priors=priors,
        jobs=config.workers(),
        out_dir=out,
        alpha=alpha if alpha is not None else DEFAULT_ALPHA,
        verbose=config.verbose,
    )
    failed = int((report.metrics["error"] != "").sum())
    write_manifest(
        out,
        "simulate",
        config.model_dump(mode="json"),
        config.seed,
        started,
        counts={"fits": len(report.metrics), "failed": failed},
    )
    if failed == len(report.metrics):
        print(f"❌ Every fit failed, see {out / 'metrics.csv'}")
        return 4
    print(f"✅ Report written to {out} ({failed} failed fit(s))")
    return 0


def cmd_select(config: RunConfig) -> int:
    """
    Recompute edge probabilities from saved traces and apply a rule.

    Returns:
        Exit status
    """
    started = time.perf_counter()
    directories = find_chain_dirs(config.chain_dir)
    out = config.out or config.chain_dir / "select"
    rule, alpha = config.selection()
    pooled = pool_chains([read_chain(d) for d in directories])
    probs = edge_probs(pooled)
    threshold: Optional[float] = None
    if rule == "median":
        graph = select_median_graph(probs)
    else:
        graph, threshold = select_bfdr_graph(probs, alpha)

    out.mkdir(parents=True, exist_ok=True)
    path = write_graph_selection(graph, probs, rule, out, threshold=threshold, alpha=alpha)
    write_manifest(
        out,
        "select",
        config.model_dump(mode="json"),
        config.seed,
        started,
        counts={"chains": len(directories), "n_saved": pooled.n_saved},
        name="manifest_select.json",
    )
    print(f"✅ {rule} graph with {graph.n_edges} edges written to {path}")
    return 0


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "select": cmd_select}


def _fail(error: BaseException, exit_code: int) -> int:
    payload = {
        "error": type(error).__name__,
        "message": str(error),
        "exit_code": exit_code,
    }
    print(f"❌ {type(error).__name__}: {error}")
    print(json.dumps(payload), file=sys.stderr)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments and run one subcommand.

    Args:
        argv: Arguments without the program name, defaults to sys.argv[1:]

    Returns:
        Exit status
    """
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
        return COMMANDS[args.command](config)
    except SpectraGraphError as e:
        return _fail(e, e.exit_code)
    except ValidationError as e:
        return _fail(e, ConfigError.exit_code)


if __name__ == "__main__":
    sys.exit(main())
