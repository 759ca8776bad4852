import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .core.experiments import (
    ExperimentConfig,
    load_spec,
    micro_report,
    read_json_argument,
    run_subsample_experiment,
    run_symtree_reml_study,
)
from .core.inference import fit_batch, fits_frame, gls_mean, tree_mu_var_lower_bound
from .core.newick import read_newick
from .core.ou_covariance import OUParams, RootMode, simulate_tips, simulation_frame
from .core.symmetric_tree import DenseTipFamily, SymmetricTreeSpec, build_symmetric_tree
from .core.tool_functions import LOGGER, worker_count, write_frame
from .core.tree_objects import Tree
from .utils.exceptions import ConfigError, InputError, ModelError, NumericalError, OuPhyloError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


class DetailsFormatter(logging.Formatter):
    """Appends the details passed through log_warning, when there are any."""

    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        details = getattr(record, "details", "")
        return f"{message} ({details})" if details else message


def setup_logger(verbose: bool = False) -> logging.Logger:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(DetailsFormatter("%(levelname)s %(name)s: %(message)s"))
    LOGGER.handlers = [handler]
    LOGGER.setLevel(logging.DEBUG if verbose else logging.INFO)
    LOGGER.propagate = False
    return LOGGER


def _tree_source(args: argparse.Namespace) -> Tuple[Tree, Optional[SymmetricTreeSpec]]:
    if args.tree and args.spec:
        raise InputError("Give either --tree or --spec, not both")
    if args.tree:
        return read_newick(args.tree), None
    if args.spec:
        spec, _ = load_spec(args.spec)
        return build_symmetric_tree(spec), spec
    raise InputError("A tree is needed: use --tree or --spec")


def _params(args: argparse.Namespace) -> OUParams:
    return OUParams(mu=args.mu, alpha=args.alpha, gamma=args.gamma)


def _config(args: argparse.Namespace, **extra) -> ExperimentConfig:
    if args.config:
        return ExperimentConfig.from_file(args.config)
    if args.seed is None:
        raise ConfigError(["seed: required"])
    spec = None
    if args.spec:
        spec = read_json_argument(args.spec, "Spec")
    record = {
        "seed": args.seed,
        "out_dir": args.out,
        "tree_path": args.tree,
        "spec": spec,
        "mu": args.mu,
        "alpha": args.alpha,
        "gamma": args.gamma,
        "reps": args.reps,
        "mode": args.mode,
    }
    record.update({key: value for key, value in extra.items() if value is not None})
    return ExperimentConfig.from_dict(record)


def run_simulate(args: argparse.Namespace) -> int:
    if args.seed is None:
        raise ConfigError(["seed: required"])
    tree, _ = _tree_source(args)
    draws = simulate_tips(
        tree,
        _params(args),
        mode=args.root,
        y0=args.y0,
        reps=args.reps,
        seed=args.seed,
        workers=worker_count(),
    )
    path = write_frame(simulation_frame(tree, draws), Path(args.out) / "simulated.csv")
    LOGGER.info("Wrote %d replicates to %s", args.reps, path)
    return EXIT_OK


def run_fit(args: argparse.Namespace) -> int:
    tree, spec = _tree_source(args)
    try:
        data = pd.read_csv(args.data)
    except (OSError, pd.errors.ParserError) as error:
        raise InputError(f"Cannot read data file {args.data}: {error}") from None
    draws = np.vstack(_rows(tree, data))
    results = fit_batch(draws, tree, args.mode, spec, worker_count())
    frame = fits_frame(results)
    frame.insert(0, "replicate", range(len(results)))
    path = write_frame(frame, Path(args.out) / "fits.csv")
    LOGGER.info("Wrote %d fits to %s", len(results), path)
    return EXIT_OK


def _rows(tree: Tree, data: pd.DataFrame) -> List[np.ndarray]:
    missing = [label for label in tree.tip_labels if label not in data.columns]
    if missing:
        raise InputError(f"Data lacks columns for tips {missing[:5]}")
    return list(data.loc[:, list(tree.tip_labels)].to_numpy(dtype=float))


def run_bound(args: argparse.Namespace) -> int:
    tree, _ = _tree_source(args)
    params = _params(args)
    bound = tree_mu_var_lower_bound(tree, params.alpha, params.sigma2)
    _, exact = gls_mean(np.zeros(tree.n_tips), tree, params.alpha, params.gamma)
    print(f"bound\t{bound:.10g}")
    print(f"gls_variance\t{exact:.10g}")
    return EXIT_OK


def run_subsample(args: argparse.Namespace) -> int:
    config = _config(
        args,
        sizes=args.sizes,
        sequences=args.sequences,
    )
    tables = run_subsample_experiment(config)
    print(tables["summary"].to_string(index=False))
    return EXIT_OK


def run_study(args: argparse.Namespace) -> int:
    config = _config(args, dm_grid=args.dm_grid, diverging_levels=args.diverging)
    tables = run_symtree_reml_study(config)
    print(tables["summary"].to_string(index=False))
    return EXIT_OK


def _read_pairs(args: argparse.Namespace, family: Optional[DenseTipFamily]):
    if args.pairs:
        raw = read_json_argument(args.pairs, "Pairs")
        try:
            return [(OUParams(*first), OUParams(*second)) for first, second in raw]
        except (TypeError, ValueError):
            raise InputError(
                "Pairs must be [[mu, alpha, gamma], [mu, alpha, gamma]] lists"
            ) from None
    base = _params(args)
    # second model doubles alpha and keeps f_t0 (gamma alpha when t0 = 0)
    t0 = 0.0 if family is None else family.t0
    alpha = 2.0 * base.alpha
    if t0 == 0:
        gamma = base.gamma / 2.0
    else:
        gamma = base.gamma * np.expm1(-2.0 * base.alpha * t0) / np.expm1(-2.0 * alpha * t0)
    return [(base, base), (base, OUParams(mu=base.mu, alpha=alpha, gamma=float(gamma)))]


def run_micro_report(args: argparse.Namespace) -> int:
    family = None
    if args.spec and not args.tree:
        _, family = load_spec(args.spec)
    tree, _ = _tree_source(args)
    tables = micro_report(
        tree,
        _read_pairs(args, family),
        args.out,
        family=family,
        m_max=args.m_max,
        bins=args.bins,
    )
    print(tables["distances"].to_string(index=False))
    return EXIT_OK


def _add_tree_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--tree", help="Newick file")
    parser.add_argument("--spec", help="symmetric or dense-tip spec: JSON text or file")


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mu", type=float, default=0.0)
    parser.add_argument("--alpha", type=float, default=0.1)
    parser.add_argument("--gamma", type=float, default=1.0)


def _add_run_options(parser: argparse.ArgumentParser, reps: int) -> None:
    parser.add_argument("--reps", type=int, default=reps)
    parser.add_argument("--seed", type=int, help="master seed (required)")
    parser.add_argument("--out", default="results", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ouphylo", description="Ornstein-Uhlenbeck models on phylogenetic trees"
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="simulate tip data")
    _add_tree_options(simulate)
    _add_model_options(simulate)
    _add_run_options(simulate, reps=1)
    simulate.add_argument("--root", choices=[m.value for m in RootMode], default="random")
    simulate.add_argument("--y0", type=float, help="root value for --root fixed")
    simulate.set_defaults(handler=run_simulate)

    fit_command = commands.add_parser("fit", help="fit every row of a data CSV")
    _add_tree_options(fit_command)
    fit_command.add_argument("--data", required=True, help="CSV with one column per tip")
    fit_command.add_argument("--mode", choices=["ml", "reml"], default="ml")
    fit_command.add_argument("--out", default="results")
    fit_command.set_defaults(handler=run_fit)

    bound = commands.add_parser("bound", help="lower bound on var(mu_hat)")
    _add_tree_options(bound)
    _add_model_options(bound)
    bound.set_defaults(handler=run_bound)

    subsample = commands.add_parser("subsample-experiment", help="fits on nested subtrees")
    _add_tree_options(subsample)
    _add_model_options(subsample)
    _add_run_options(subsample, reps=50)
    subsample.add_argument("--config", help="JSON experiment config; replaces the flags")
    subsample.add_argument("--sizes", type=int, nargs="+")
    subsample.add_argument("--sequences", type=int, default=10)
    subsample.add_argument("--mode", choices=["ml", "reml"], default="ml")
    subsample.set_defaults(handler=run_subsample)

    study = commands.add_parser("symtree-study", help="REML study on symmetric trees")
    _add_tree_options(study)
    _add_model_options(study)
    _add_run_options(study, reps=100)
    study.add_argument("--config", help="JSON experiment config; replaces the flags")
    study.add_argument("--dm-grid", dest="dm_grid", type=int, nargs="+")
    study.add_argument("--diverging", type=int, nargs="+", help="levels taken to infinity")
    study.add_argument("--mode", choices=["reml"], default="reml")
    study.set_defaults(handler=run_study)

    micro = commands.add_parser("micro-report", help="entropy distances and age profiles")
    _add_tree_options(micro)
    _add_model_options(micro)
    micro.add_argument("--pairs", help="JSON list of [[mu, alpha, gamma], [mu, alpha, gamma]]")
    micro.add_argument("--m-max", dest="m_max", type=int)
    micro.add_argument("--bins", type=int, default=20)
    micro.add_argument("--out", default="results")
    micro.set_defaults(handler=run_micro_report)
    return parser


HANDLED: Dict[type, int] = {
    InputError: EXIT_INPUT,
    ModelError: EXIT_INPUT,
    NumericalError: EXIT_NUMERICAL,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logger(args.verbose)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except OuPhyloError as error:
        LOGGER.error("%s", error)
        for kind, code in HANDLED.items():
            if isinstance(error, kind):
                return code
        return EXIT_INPUT
