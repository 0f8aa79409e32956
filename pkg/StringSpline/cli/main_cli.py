# cli/main_cli.py

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Ensure the StringSpline package is importable when run as a script
current_dir = os.path.dirname(os.path.abspath(__file__))
repo_root = os.path.dirname(os.path.dirname(current_dir))
if repo_root not in sys.path:
    sys.path.append(repo_root)

from StringSpline.core.artifact_writer import (
    ArtifactWriter,
    ArtifactWriterError,
    DataFormatError,
    RunManifest,
)
from StringSpline.core.benchmark import BenchmarkError, StudySpec, STUDIES
from StringSpline.core.bspline import BSplineError
from StringSpline.core.datagen import DataGenError, LJConfig
from StringSpline.core.diagnostics import DiagnosticsError
from StringSpline.core.fit_runner import ESTIMATORS, FitRunner, FitRunnerError, RunConfig, SelfCheckError
from StringSpline.core.logger import logger
from StringSpline.core.model import ModelError, OutOfDomainError
from StringSpline.core.penalty import PenaltyError
from StringSpline.core.sampler import PriorConfig, SamplerError
from StringSpline.core.settings import SettingsError, load_settings

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_SELF_CHECK = 5


def parse_alpha_grid(text: str):
    """Parse ``lo:hi:n`` into a logarithmic grid of n alpha values."""
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha grid must look like lo:hi:n, got {text!r}") from None
    if lo <= 0 or hi <= lo or n < 2:
        raise argparse.ArgumentTypeError(f"alpha grid needs 0 < lo < hi and n >= 2, got {text!r}")
    return np.logspace(np.log10(lo), np.log10(hi), n)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="64-bit seed for every random stream")
    parser.add_argument("--out", help="output directory")


def _add_fit_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("data", help="CSV samples (r,y or frame,id,type,x,y,z,fx,fy,fz)")
    parser.add_argument("--prior", choices=["X", "Y", "Z"], help="lambda prior family")
    parser.add_argument(
        "--prior-param",
        type=float,
        action="append",
        help="family parameter: Y takes delta shape then rate, Z takes the prior mean b",
    )
    parser.add_argument("--e0", type=float, help="string zero-point energy E0")
    parser.add_argument("--v0", type=float, help="minimum residual variance V0")


def _add_schedule(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--burn-in", type=int, dest="burn_in")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--thin", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stringspline", description="Penalized spline fits with the string-energy prior."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model to samples")
    _add_common(fit)
    _add_fit_options(fit)
    _add_schedule(fit)
    fit.add_argument("--estimator", choices=list(ESTIMATORS))
    fit.add_argument("--write-penalty", action="store_true", help="also write penalty.csv")

    diagnose = sub.add_parser("diagnose", help="alpha profile with marginal posterior, GCV and AIC")
    _add_common(diagnose)
    _add_fit_options(diagnose)
    diagnose.add_argument("--alpha-grid", type=parse_alpha_grid, dest="alpha_grid", help="lo:hi:n")

    simulate = sub.add_parser("simulate", help="Langevin simulation and noisy force samples")
    _add_common(simulate)
    simulate.add_argument("--full-scale", action="store_true", help="256 particles, 500 configurations")

    bench = sub.add_parser("bench", help="run a benchmark study")
    _add_common(bench)
    _add_schedule(bench)
    bench.add_argument("--study", choices=list(STUDIES))
    bench.add_argument("--replicates", type=int)
    bench.add_argument("--workers", type=int)
    return parser


def _apply_fit_flags(config: RunConfig, args) -> RunConfig:
    prior = config.prior.to_dict()
    if args.prior:
        prior["family"] = args.prior
        prior["label"] = None
    params = args.prior_param or []
    family = prior["family"]
    if params:
        if family == "Y":
            prior["delta_shape"] = params[0]
            prior["delta_rate"] = params[1] if len(params) > 1 else params[0]
        elif family == "Z":
            prior["lambda_scale"] = params[0]
        else:
            raise FitRunnerError("Family X takes no --prior-param; use --e0 and --v0.")
    if args.e0 is not None:
        prior["e0"] = args.e0
    if args.v0 is not None:
        prior["v0"] = args.v0
    updates = {"prior": PriorConfig.from_dict(prior)}
    for name in ("estimator", "burn_in", "steps", "thin"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "write_penalty", False):
        updates["write_penalty"] = True
    return replace(config, **updates)


def cmd_fit(runner: FitRunner, args, settings) -> None:
    config = _apply_fit_flags(RunConfig.load(args.config, settings), args)
    samples = runner.load_samples(config, args.data)
    runner.fit(config, samples)


def cmd_diagnose(runner: FitRunner, args, settings) -> None:
    config = _apply_fit_flags(RunConfig.load(args.config, settings), args)
    samples = runner.load_samples(config, args.data)
    runner.diagnose(config, samples, args.alpha_grid)


def cmd_simulate(runner: FitRunner, args, settings) -> None:
    config = LJConfig.load(args.config) if args.config else LJConfig()
    if args.full_scale:
        spec = config.to_dict()
        spec.update(n_particles=256, n_type_a=None, cell_length=None, n_configs=500)
        config = LJConfig.from_dict(spec)
    runner.simulate(config)


def cmd_bench(runner: FitRunner, args, settings) -> None:
    if args.config:
        spec = StudySpec.load(args.config)
    elif args.study:
        spec = StudySpec.preset(args.study)
    else:
        raise BenchmarkError("bench needs --config or --study.")
    updates = {"workers": args.workers or settings.workers}
    for name in ("replicates", "burn_in", "steps", "thin"):
        value = getattr(args, name)
        if value is not None:
            updates[name] = value
    runner.bench(replace(spec, **updates))


COMMANDS = {"fit": cmd_fit, "diagnose": cmd_diagnose, "simulate": cmd_simulate, "bench": cmd_bench}


def exit_code(error: Exception) -> int:
    """Map an exception to the documented exit code."""
    if isinstance(error, SelfCheckError):
        return EXIT_SELF_CHECK
    if isinstance(error, (DataFormatError, OutOfDomainError)):
        return EXIT_DATA
    if isinstance(error, (SamplerError, DiagnosticsError, DataGenError)):
        return EXIT_NUMERICAL
    if isinstance(error, (SettingsError, ModelError, FitRunnerError, BenchmarkError, PenaltyError, BSplineError)):
        return EXIT_CONFIG
    return EXIT_UNEXPECTED


def main(argv=None) -> int:
    """
    The main entry point for the StringSpline command line.

    Returns
    -------
    int
        Process exit code.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("fit", "diagnose") and not args.config:
        parser.error(f"{args.command} needs --config")
    try:
        settings = load_settings()
        seed = settings.seed if args.seed is None else args.seed
        out_dir = args.out or settings.out_dir
        writer = ArtifactWriter(out_dir)
        arguments = {k: (v.tolist() if hasattr(v, "tolist") else v) for k, v in vars(args).items()}
        writer.write_manifest(RunManifest.create(args.command, args.config, seed, out_dir, arguments))
        COMMANDS[args.command](FitRunner(writer, settings, seed), args, settings)
    except (
        SettingsError, ModelError, FitRunnerError, BenchmarkError, PenaltyError, BSplineError,
        SamplerError, DiagnosticsError, DataGenError, ArtifactWriterError,
    ) as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(f"error: {e.message}", file=sys.stderr)
        return exit_code(e)
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {e}")
        print(f"unexpected error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
    logger.info(f"{args.command} finished; outputs in {out_dir}.")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
