"""
Command-line interface for ddibp.
Subcommands: simulate, fit, impute, verify, sharing.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from .config import load_config, load_run_config
from .errors import EXIT_USAGE, DdibpError, exit_code_for, exit_status_help
from .outputs import LOG_NAME
from .service import ExperimentService
from .storage import RunStorage


logger = logging.getLogger(__name__)

# argparse dest -> dotted run-config key
FLAG_KEYS = {
    "output_dir": "output_dir",
    "data": "data_path",
    "distances": "distances_path",
    "covariate": "covariate_path",
    "distance_kind": "distance_kind",
    "truth": "truth_path",
    "decay": "decay.kind",
    "beta": "decay.beta",
    "nu": "decay.nu",
    "iterations": "mcmc.iterations",
    "burn_in": "mcmc.burn_in",
    "seed": "mcmc.seed",
    "sigma_x": "mcmc.sigma_x",
    "sigma_w": "mcmc.sigma_w",
    "noise_scale": "mcmc.noise_proposal_scale",
    "impute": "mcmc.update_missing",
    "record_z": "mcmc.record_z",
    "debug": "mcmc.debug",
    "model": "model",
    "zscore": "zscore",
    "alpha": "alpha",
    "gamma": "gamma",
    "c0": "c0",
    "c1": "c1",
    "k_trunc": "k_trunc",
    "samples": "n_samples",
    "customers": "n_customers",
    "chains": "chains",
    "n_jobs": "n_jobs",
    "quick": "quick",
    "draws": "draws",
    "inject_failure": "inject_failure",
    "betas": "betas",
    "checkpoint": "checkpoint_path",
}


class UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser that exits with status 1; status 2 means a failed verification."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Dotted-key run configuration file")
    common.add_argument("--output-dir", type=Path, help="Output directory (default: $DDIBP_OUTPUT_DIR)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")
    common.add_argument("--no-registry", action="store_true", help="Do not record the run in the run registry")
    common.add_argument("--seed", type=int, help="Random seed")

    geometry = common.add_argument_group("geometry")
    geometry.add_argument("--distances", type=Path, help="Header-less N x N distance matrix CSV")
    geometry.add_argument("--covariate", type=Path, help="Covariate CSV (one value per customer)")
    geometry.add_argument("--distance-kind", choices=["absolute", "sequential"])
    geometry.add_argument("--decay", choices=["constant", "exponential", "logistic", "window"])
    geometry.add_argument("--beta", type=float, help="Decay rate")
    geometry.add_argument("--nu", type=float, help="Logistic offset or window width")
    geometry.add_argument("--customers", type=int, help="N when no distances are given")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = UsageErrorParser(
        prog="ddibp",
        description="Distance dependent Indian buffet process: prior simulation, inference and verification",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Prior draws on a sequential geometry with window decay:
  python -m ddibp simulate --customers 30 --decay window --nu 1

  # Fit a data table with covariate-based distances:
  python -m ddibp fit --data x.csv --covariate age.csv --iterations 1500

  # Quick invariant suite:
  python -m ddibp verify --quick

""" + exit_status_help() + "\n",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=UsageErrorParser)

    simulate = sub.add_parser("simulate", parents=[common], help="Draw feature matrices from the prior")
    simulate.add_argument("--model", choices=["ddibp", "ibp", "dhbp"])
    simulate.add_argument("--samples", type=int, help="Number of prior draws")
    _mass_options(simulate)

    for name, help_text in (("fit", "Run MCMC on a data table"),
                            ("impute", "Impute missing entries")):
        cmd = sub.add_parser(name, parents=[common], help=help_text)
        cmd.add_argument("--data", type=Path, required=True, help="Data CSV with header row")
        cmd.add_argument("--zscore", action="store_true", default=None, help="Standardise columns first")
        cmd.add_argument("--iterations", type=int)
        cmd.add_argument("--burn-in", type=int)
        cmd.add_argument("--fix-alpha", type=float, help="Hold alpha fixed at this value")
        cmd.add_argument("--sigma-x", type=float)
        cmd.add_argument("--sigma-w", type=float)
        cmd.add_argument("--noise-scale", type=float, help="Random-walk scale for log sigma (0 fixes them)")
        cmd.add_argument("--chains", type=int, help="Independent restarts")
        cmd.add_argument("--n-jobs", type=int)
        cmd.add_argument("--record-z", action="store_true", default=None)
        cmd.add_argument("--debug", action="store_true", default=None, help="Recheck the log joint every sweep")
        if name == "fit":
            cmd.add_argument("--impute", action="store_true", default=None, help="Also resample missing entries")
            cmd.add_argument("--checkpoint", type=Path, help="Resume from this .npz chain state if present, save to it at the end")
        else:
            cmd.add_argument("--truth", type=Path, help="Fully observed ground-truth CSV")
            cmd.add_argument("--betas", type=str, help="Comma-separated exponential decay rates to sweep")

    verify = sub.add_parser("verify", parents=[common], help="Run the invariant suite")
    verify.add_argument("--quick", action="store_true", default=None, help="Small enumeration checks only")
    verify.add_argument("--draws", type=int, help="Monte-Carlo size (default: $DDIBP_VERIFY_DRAWS)")
    verify.add_argument("--inject-failure", type=float, help="Multiply analytic rates (e.g. 1.1)")
    verify.add_argument("--n-jobs", type=int)

    sharing = sub.add_parser("sharing", parents=[common], help="Sharing rates, limits and PMF tables")
    sharing.add_argument("--samples", type=int, help="Fraction heatmaps per model")
    sharing.add_argument("--draws", type=int, help="Monte-Carlo size")
    _mass_options(sharing)
    return parser


def _mass_options(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--alpha", type=float, help="dd-IBP / IBP mass")
    cmd.add_argument("--gamma", type=float, help="dHBP mass")
    cmd.add_argument("--c0", type=float)
    cmd.add_argument("--c1", type=float)
    cmd.add_argument("--k-trunc", type=int, help="dHBP truncation level")


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted-key overrides for every flag given on the command line."""
    overrides: Dict[str, Any] = {"subcommand": args.subcommand}
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if args.subcommand == "impute":
        overrides["mcmc.update_missing"] = True
    fixed = getattr(args, "fix_alpha", None)
    if fixed is not None:
        overrides["mcmc.alpha_init"] = fixed
        overrides["mcmc.update_alpha"] = False
    return overrides


def setup_logging(level: str, output_dir: Path) -> None:
    """Log to stdout and to ddibp.log inside the output directory."""
    output_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(output_dir / LOG_NAME, encoding="utf-8")
        ],
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    if hasattr(sys.stdout, "reconfigure"):
        sys.stdout.reconfigure(encoding="utf-8")

    args = build_parser().parse_args(argv)

    try:
        settings = load_config()
        defaults = {"output_dir": settings.output_dir, "n_jobs": settings.n_jobs, "draws": settings.verify_draws}
        config = load_run_config(args.config, collect_overrides(args), defaults=defaults)
    except DdibpError as e:
        print(f"ddibp: error: {e}", file=sys.stderr)
        return exit_code_for(e)

    setup_logging(args.log_level or settings.log_level, config.output_dir)

    storage = None
    if not args.no_registry:
        try:
            storage = RunStorage(settings.database_url)
        except Exception as e:
            logger.warning(f"Run registry unavailable ({e}); continuing without it")

    try:
        result = ExperimentService(config, storage).run()
    except (DdibpError, FileNotFoundError, ValueError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"ddibp: error: {e}", file=sys.stderr)
        return exit_code_for(e)

    logger.info(f"Finished with exit code {result.exit_code}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
