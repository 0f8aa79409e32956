# core/fit_runner.py

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .artifact_writer import ArtifactWriter, read_particle_csv, read_scalar_csv
from .benchmark import StudySpec, compare_estimators, run_study
from .datagen import LJConfig, simulate_force_samples
from .diagnostics import AlphaSystem, DiagnosticsError, alpha_profile, autocorr_time
from .logger import logger
from .model import AdditiveModel, PairDistanceArgument, SampleSet, model_from_dict
from .sampler import (
    FitProblem,
    GibbsSchedule,
    PriorConfig,
    gls_fit,
    mle_fit,
    run_gibbs,
)
from .settings import Settings
from .streams import FIT_CHAIN

ESTIMATORS = ("posterior-mean", "mle", "gls")


class FitRunnerError(Exception):
    """
    Custom exception for FitRunner-related errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the FitRunnerError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


class SelfCheckError(FitRunnerError):
    """Raised after writing outputs when a post-run invariant check fails."""


@dataclass
class RunConfig:
    """
    Fit configuration merged from JSON, flags and environment defaults.

    Attributes
    ----------
    model : AdditiveModel
    prior : PriorConfig
    estimator : str
        ``posterior-mean``, ``mle`` or ``gls``.
    burn_in, steps, thin : int
    box : float, optional
        Cell length for particle data.
    write_penalty : bool
        Also export the assembled penalty matrices.
    """

    model: AdditiveModel
    prior: PriorConfig = field(default_factory=PriorConfig)
    estimator: str = "posterior-mean"
    burn_in: int = 2500
    steps: int = 25000
    thin: int = 5
    box: Optional[float] = None
    write_penalty: bool = False

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise FitRunnerError(f"Unknown estimator {self.estimator!r}; expected one of {list(ESTIMATORS)}.")

    @classmethod
    def from_dict(cls, spec: dict, settings: Settings) -> "RunConfig":
        """Build from a config dict; missing schedule fields fall back to ``settings``."""
        if "model" not in spec:
            raise FitRunnerError("Run config needs a 'model' section.")
        schedule = spec.get("schedule", {})
        return cls(
            model=model_from_dict(spec["model"]),
            prior=PriorConfig.from_dict(spec.get("prior", {})),
            estimator=spec.get("estimator", "posterior-mean"),
            burn_in=int(schedule.get("burn_in", settings.burn_in)),
            steps=int(schedule.get("steps", settings.steps)),
            thin=int(schedule.get("thin", settings.thin)),
            box=spec.get("box"),
            write_penalty=bool(spec.get("write_penalty", False)),
        )

    @classmethod
    def load(cls, path: str, settings: Settings) -> "RunConfig":
        try:
            with open(path, "r") as file:
                spec = json.load(file)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to read run config {path}: {e}")
            raise FitRunnerError(f"Failed to read run config {path}.") from e
        return cls.from_dict(spec, settings)

    @property
    def is_particle(self) -> bool:
        return any(isinstance(c.argument, PairDistanceArgument) for c in self.model.components)

    def schedule(self, seed: int) -> GibbsSchedule:
        return GibbsSchedule(
            burn_in=self.burn_in, steps=self.steps, thin=self.thin, seed=seed, stream_key=(FIT_CHAIN,)
        )

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "prior": self.prior.to_dict(),
            "estimator": self.estimator,
            "schedule": {"burn_in": self.burn_in, "steps": self.steps, "thin": self.thin},
            "box": self.box,
            "write_penalty": self.write_penalty,
        }


@dataclass
class FitReport:
    """Outcome of one fit: coefficients, summary statistics and self-check results."""

    theta: np.ndarray
    summary: dict
    checks: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


class FitRunner:
    """
    Orchestrates fits, diagnostics, simulations and studies into artifacts.

    Parameters
    ----------
    writer : ArtifactWriter
        Destination of every artifact.
    settings : Settings
        Environment defaults.
    seed : int
        Manifest seed feeding every random stream.

    Attributes
    ----------
    writer : ArtifactWriter
    settings : Settings
    seed : int
    """

    def __init__(self, writer: ArtifactWriter, settings: Settings, seed: int):
        self.writer = writer
        self.settings = settings
        self.seed = seed

    def load_samples(self, config: RunConfig, data_path: str) -> SampleSet:
        """Read ``data_path`` with the schema the model's arguments need."""
        if config.is_particle:
            if config.box is None:
                raise FitRunnerError("Particle data needs the cell length 'box' in the run config.")
            return read_particle_csv(data_path, float(config.box))
        return read_scalar_csv(data_path)

    def fit(self, config: RunConfig, samples: SampleSet) -> FitReport:
        """
        Run the configured estimator and write its artifacts.

        Writes theta.csv, trace.csv, chain.json, summary.json (and penalty.csv
        when requested) with the same schemas for every estimator.

        Returns
        -------
        FitReport

        Raises
        ------
        SamplerError
            Numerical failures of the estimator.
        SelfCheckError
            If a self-check fails; all artifacts are still written.
        """
        problem = FitProblem.from_model(config.model, samples)
        logger.info(f"Fitting {problem.num_params} parameters to {problem.num_samples} samples with {config.estimator}.")
        taus = {}
        if config.estimator == "posterior-mean":
            chain = run_gibbs(problem, config.prior, config.schedule(self.seed))
            theta = chain.theta_mean
            lam, z = chain.lambda_mean, (1.0 / chain.sigma2_hat)
            trace = chain.trace_frame()
            header = chain.header()
            if chain.num_draws >= 100:
                for k, name in enumerate(problem.group_names):
                    try:
                        taus[name] = autocorr_time(chain.lambdas[:, k], spacing=config.thin).tau
                    except DiagnosticsError as e:
                        logger.warning(f"No decorrelation time for group {name}: {e.message}")
            sigma2 = chain.sigma2_hat
        else:
            result = mle_fit(problem, config.prior) if config.estimator == "mle" else gls_fit(problem)
            theta, lam, z = result.theta, result.lam, result.z
            trace = pd.DataFrame(
                {
                    "iter": np.arange(1, len(result.history) + 1),
                    **{f"lambda_{n}": [h[0][k] for h in result.history] for k, n in enumerate(problem.group_names)},
                    **{f"z_{n}": [h[1][i] for h in result.history] for i, n in enumerate(problem.variance_labels)},
                }
            )
            header = {
                "estimator": config.estimator,
                "iterations": result.iterations,
                "converged": result.converged,
                "prior": config.prior.to_dict(),
                "groups": list(problem.group_names),
                "variance_groups": list(problem.variance_labels),
                "constraints": problem.constraints.to_dict(),
            }
            sigma2 = 1.0 / z

        eps_f = problem.residual_sq(theta)
        eps_q = problem.roughness(theta)
        checks = self._self_checks(problem, theta, lam, z, config.estimator)
        summary = {
            "estimator": config.estimator,
            "seed": self.seed,
            "num_samples": problem.num_samples,
            "num_params": problem.num_params,
            "eps_f": dict(zip(problem.variance_labels, eps_f.tolist())),
            "eps_q": dict(zip(problem.group_names, eps_q.tolist())),
            "sigma2_hat": dict(zip(problem.variance_labels, np.asarray(sigma2).tolist())),
            "lambda": dict(zip(problem.group_names, np.asarray(lam).tolist())),
            "tau_lambda": {k: (None if math.isinf(v) else v) for k, v in taus.items()},
            "constraints": problem.constraints.to_dict(),
            "self_checks": checks,
        }
        rows = [
            {"group": name, "index": i, "theta": float(value)}
            for name, sl in zip(problem.group_names, problem.group_slices)
            for i, value in enumerate(theta[sl])
        ]
        self.writer.write_csv("theta.csv", pd.DataFrame(rows, columns=["group", "index", "theta"]))
        self.writer.write_csv("trace.csv", trace)
        self.writer.write_json("chain.json", header)
        self.writer.write_json("summary.json", summary)
        if config.write_penalty:
            frames = []
            for name, pen in zip(problem.group_names, problem.penalties):
                frame = pen.to_frame()
                frame.insert(0, "group", name)
                frames.append(frame)
            self.writer.write_csv("penalty.csv", pd.concat(frames, ignore_index=True))
        report = FitReport(theta=theta, summary=summary, checks=checks)
        if not report.passed:
            failed = [k for k, ok in checks.items() if not ok]
            logger.error(f"Self-checks failed: {failed}")
            raise SelfCheckError(f"Self-checks failed: {failed}")
        return report

    @staticmethod
    def _self_checks(problem: FitProblem, theta, lam, z, estimator: str) -> dict:
        scale = 1.0 + float(np.max(np.abs(theta))) if np.all(np.isfinite(theta)) else 1.0
        centered = all(
            abs(float(theta[problem.group_slices[k]].mean())) <= 1e-8 * scale
            for k in problem.constraints.constrained
        )
        lam = np.asarray(lam, dtype=float)
        return {
            "theta_finite": bool(np.all(np.isfinite(theta))),
            "constraints_centered": bool(centered),
            "lambda_positive": bool(np.all(lam >= 0) if estimator == "gls" else np.all(lam > 0)),
            "z_positive": bool(np.all(np.asarray(z) > 0) and np.all(np.isfinite(z))),
        }

    def diagnose(self, config: RunConfig, samples: SampleSet, alphas: Optional[Sequence[float]] = None):
        """Write the alpha profile of a one-group fit to alpha_profile.csv."""
        problem = FitProblem.from_model(config.model, samples, constraints="none")
        system = AlphaSystem.from_problem(problem, e0=config.prior.e0, v0=config.prior.v0)
        profile = alpha_profile(system, alphas)
        self.writer.write_csv("alpha_profile.csv", profile.to_frame())
        self.writer.write_json(
            "alpha_summary.json",
            {
                "argmax_marginal": float(profile.alpha[profile.argmax_marginal]),
                "argmin_gcv": float(profile.alpha[profile.argmin_gcv]) if np.any(np.isfinite(profile.gcv)) else None,
                "argmin_aic": float(profile.alpha[profile.argmin_aic]),
                "grid": [float(profile.alpha[0]), float(profile.alpha[-1]), int(profile.alpha.size)],
            },
        )
        return profile

    def simulate(self, config: LJConfig):
        """Run the Langevin simulation and write forces.csv, energies.csv and theta_true.csv."""
        config = replace(config, seed=self.seed)
        self.writer.write_json("lj_config.json", config.to_dict())
        trajectory, force_set = simulate_force_samples(config)
        self.writer.write_csv("forces.csv", force_set.to_frame())
        self.writer.write_csv("energies.csv", trajectory.energies)
        rows = [
            {"group": name, "index": i, "theta": float(v)}
            for name, values in force_set.theta_true.items()
            for i, v in enumerate(values)
        ]
        self.writer.write_csv("theta_true.csv", pd.DataFrame(rows, columns=["group", "index", "theta"]))
        self.writer.write_json(
            "model.json",
            {"model": force_set.model.to_dict(), "box": trajectory.box, "prior": PriorConfig().to_dict()},
        )
        self.writer.write_json(
            "simulation_summary.json",
            {"velocity_variance": trajectory.velocity_variance, "temperature": config.temperature,
             "num_frames": int(trajectory.frames.shape[0])},
        )
        return trajectory, force_set

    def bench(self, spec: StudySpec):
        """Run a study and write its tidy table and summary."""
        spec = replace(spec, seed=self.seed, lj=None if spec.lj is None else replace(spec.lj, seed=self.seed))
        self.writer.write_json("study_spec.json", spec.to_dict())
        if spec.study == "fig-sample-lj":
            table = compare_estimators(spec)
            self.writer.write_csv("estimators.csv", table)
            return table
        result = run_study(spec)
        self.writer.write_csv("study.csv", result.frame)
        self.writer.write_csv("study_summary.csv", result.summary())
        return result
