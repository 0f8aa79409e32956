# core/benchmark.py

"""
benchmark.py
============

Method-comparison studies over prior families, noise levels, data scales and
sample sizes.

Every cell (family x setting x replicate) regenerates its data from the
study seed and runs one Gibbs chain on its own stream, so results do not
depend on execution order or on the number of worker processes.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .bspline import SplineBasis, aperiodic_basis, basis_matrix, periodic_basis
from .datagen import (
    DataGenError,
    LJConfig,
    ScalarBenchmark,
    gen_force_samples,
    gen_scalar,
    langevin_simulate,
    lj_pair_model,
    lj_potential_splines,
)
from .diagnostics import DiagnosticsError, autocorr_time
from .logger import logger
from .model import PairDistanceArgument, scalar_model
from .penalty import PenaltyConfig
from .sampler import (
    FitProblem,
    GibbsSchedule,
    NonConvergenceError,
    PriorConfig,
    PriorFamily,
    SamplerError,
    gls_fit,
    mle_fit,
    run_gibbs,
)
from .streams import CHAIN

STUDIES = ("fig1-linear", "fig3-sinusoid", "figS-scale", "fig-sample-lj")
RESULT_COLUMNS = [
    "study",
    "family",
    "scale",
    "sigma",
    "M",
    "replicate",
    "rmse_norm",
    "sigma2_hat",
    "lambda_mean",
    "tau_lambda",
    "error",
]


class BenchmarkError(Exception):
    """
    Custom exception for study configuration errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the BenchmarkError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


def family_presets() -> Dict[str, PriorConfig]:
    """The four lambda priors compared in the studies."""
    return {
        "X": PriorConfig(e0=1e-10, v0=1e-10, family=PriorFamily.X, label="X"),
        "Y": PriorConfig(family=PriorFamily.Y, delta_shape=1e-4, delta_rate=1e-4, label="Y"),
        "Z2": PriorConfig(family=PriorFamily.Z, lambda_scale=1e-2, label="Z2"),
        "Z6": PriorConfig(family=PriorFamily.Z, lambda_scale=1e-6, label="Z6"),
    }


@dataclass(frozen=True)
class StudySpec:
    """
    One study: data settings, prior families, schedule and seed base.

    Attributes
    ----------
    study : str
        One of ``fig1-linear``, ``fig3-sinusoid``, ``figS-scale``, ``fig-sample-lj``.
    function : str
        Scalar test function (ignored by the force-matching study).
    replicates : int
    sigmas, scales : tuple of float
    sample_sizes : tuple of int
    families : tuple of str
        Keys of ``family_presets()``.
    seed : int
    burn_in, steps, thin : int
    basis : dict
        Scalar fit basis description: ``kind`` (periodic/aperiodic),
        ``num_params`` or ``intervals``, ``order``.
    workers : int
        Processes used for scalar cells; 1 runs inline.
    lj : LJConfig, optional
    """

    study: str
    function: str = "f3"
    replicates: int = 20
    sigmas: Tuple[float, ...] = (0.1,)
    scales: Tuple[float, ...] = (1.0,)
    sample_sizes: Tuple[int, ...] = (20,)
    families: Tuple[str, ...] = ("X",)
    seed: int = 0
    burn_in: int = 2500
    steps: int = 25000
    thin: int = 5
    basis: Dict = field(default_factory=lambda: {"kind": "periodic", "num_params": 20, "order": 4})
    workers: int = 1
    lj: Optional[LJConfig] = None

    def __post_init__(self):
        if self.study not in STUDIES:
            raise BenchmarkError(f"Unknown study {self.study!r}; expected one of {list(STUDIES)}.")
        for name in ("sigmas", "scales", "sample_sizes", "families"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = set(self.families) - set(family_presets())
        if unknown:
            raise BenchmarkError(f"Unknown prior families {sorted(unknown)}.")
        if self.replicates < 1 or self.workers < 1:
            raise BenchmarkError("replicates and workers must be >= 1.")
        if self.study == "fig-sample-lj" and self.lj is None:
            object.__setattr__(self, "lj", LJConfig(seed=self.seed))

    @classmethod
    def preset(cls, study: str, **overrides) -> "StudySpec":
        """Default settings of a named study."""
        presets = {
            "fig1-linear": dict(
                function="f1",
                sigmas=(0.1, 1.0),
                families=("X",),
                basis={"kind": "aperiodic", "intervals": 17, "order": 4},
            ),
            "fig3-sinusoid": dict(
                function="f3",
                sigmas=(0.1, 0.5, 1.0),
                families=("X", "Y", "Z2", "Z6"),
            ),
            "figS-scale": dict(
                function="f3",
                sigmas=(0.5,),
                scales=(1.0, 1e2, 1e4, 1e6),
                sample_sizes=(50,),
                families=("X", "Z2", "Z6"),
            ),
            "fig-sample-lj": dict(
                sample_sizes=(25, 50, 100, 200),
                families=("X",),
                replicates=1,
                burn_in=500,
                steps=5000,
                thin=5,
            ),
        }
        if study not in presets:
            raise BenchmarkError(f"Unknown study {study!r}; expected one of {list(STUDIES)}.")
        values = dict(presets[study])
        values.update(overrides)
        return cls(study=study, **values)

    def fit_basis(self) -> SplineBasis:
        kind = self.basis.get("kind", "periodic")
        order = int(self.basis.get("order", 4))
        lo, hi = float(self.basis.get("lo", -3.0)), float(self.basis.get("hi", 3.0))
        if kind == "periodic":
            return periodic_basis(lo, hi, int(self.basis.get("num_params", 20)), order)
        return aperiodic_basis(lo, hi, order, intervals=int(self.basis.get("intervals", 17)))

    def to_dict(self) -> dict:
        return {
            "study": self.study,
            "function": self.function,
            "replicates": self.replicates,
            "sigmas": list(self.sigmas),
            "scales": list(self.scales),
            "sample_sizes": list(self.sample_sizes),
            "families": list(self.families),
            "seed": self.seed,
            "burn_in": self.burn_in,
            "steps": self.steps,
            "thin": self.thin,
            "basis": dict(self.basis),
            "workers": self.workers,
            "lj": None if self.lj is None else self.lj.to_dict(),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "StudySpec":
        """Preset of ``spec["study"]`` overridden by the remaining fields."""
        values = dict(spec)
        try:
            study = values.pop("study")
        except KeyError as e:
            raise BenchmarkError("Study description is missing field 'study'.") from e
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise BenchmarkError(f"Unknown study fields {sorted(unknown)}.")
        if values.get("lj") is not None:
            values["lj"] = LJConfig.from_dict(values["lj"])
        return cls.preset(study, **values)

    @classmethod
    def load(cls, path: str) -> "StudySpec":
        try:
            with open(path, "r") as file:
                spec = json.load(file)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to read study spec {path}: {e}")
            raise BenchmarkError(f"Failed to read study spec {path}.") from e
        return cls.from_dict(spec.get("study_spec", spec))


@dataclass
class StudyResult:
    """
    Tidy per-cell results of a study.

    ``rmse_norm`` and ``sigma2_hat`` are divided by the overall scale (and its
    square) so cells at different scales compare directly.
    """

    spec: StudySpec
    frame: pd.DataFrame

    @property
    def failures(self) -> pd.DataFrame:
        return self.frame[self.frame["error"] != ""]

    def summary(self) -> pd.DataFrame:
        """Quartiles and outlier counts of rmse_norm plus tau_lambda mean and sd per cell."""
        rows = []
        keys = ["study", "family", "scale", "sigma", "M"]
        for key, group in self.frame.groupby(keys, sort=False):
            values = group["rmse_norm"].dropna().to_numpy()
            taus = group["tau_lambda"].replace([np.inf, -np.inf], np.nan).dropna().to_numpy()
            if values.size:
                q1, median, q3 = np.percentile(values, [25, 50, 75])
                spread = q3 - q1
                outliers = int(np.sum((values < q1 - 1.5 * spread) | (values > q3 + 1.5 * spread)))
            else:
                q1 = median = q3 = math.nan
                outliers = 0
            rows.append(
                dict(
                    zip(keys, key),
                    q1=q1,
                    median=median,
                    q3=q3,
                    outliers=outliers,
                    lambda_mean=float(group["lambda_mean"].mean()),
                    sigma2_hat=float(group["sigma2_hat"].mean()),
                    tau_mean=float(taus.mean()) if taus.size else math.nan,
                    tau_sd=float(taus.std(ddof=1)) if taus.size > 1 else math.nan,
                    failures=int((group["error"] != "").sum()),
                )
            )
        return pd.DataFrame(rows)

    def medians(self, family: str) -> pd.Series:
        table = self.summary()
        return table[table["family"] == family].set_index(["scale", "sigma", "M"])["median"]


# --- scalar cells ------------------------------------------------------------------


@dataclass(frozen=True)
class _Cell:
    family_index: int
    family: str
    cell_index: int
    scale: float
    sigma: float
    num_samples: int
    replicate: int


def _cells(spec: StudySpec) -> List[_Cell]:
    cells = []
    settings = [
        (scale, sigma, m) for scale in spec.scales for sigma in spec.sigmas for m in spec.sample_sizes
    ]
    for fi, family in enumerate(spec.families):
        for ci, (scale, sigma, m) in enumerate(settings):
            for rep in range(spec.replicates):
                cells.append(_Cell(fi, family, ci, float(scale), float(sigma), int(m), rep))
    return cells


def _run_cell(spec: StudySpec, cell: _Cell) -> dict:
    """Generate one replicate's data, run its chain and score the posterior mean."""
    row = {
        "study": spec.study,
        "family": cell.family,
        "scale": cell.scale,
        "sigma": cell.sigma,
        "M": cell.num_samples,
        "replicate": cell.replicate,
        "rmse_norm": math.nan,
        "sigma2_hat": math.nan,
        "lambda_mean": math.nan,
        "tau_lambda": math.nan,
        "error": "",
    }
    bench = ScalarBenchmark(
        function=spec.function,
        num_samples=cell.num_samples,
        sigma=cell.sigma,
        scale=cell.scale,
        seed=spec.seed,
        replicate=cell.replicate,
    )
    try:
        samples = gen_scalar(bench)
        problem = FitProblem.from_model(scalar_model(spec.fit_basis()), samples, constraints="none")
        schedule = GibbsSchedule(
            burn_in=spec.burn_in,
            steps=spec.steps,
            thin=spec.thin,
            seed=spec.seed,
            stream_key=(CHAIN, cell.family_index, cell.cell_index, cell.replicate),
        )
        chain = run_gibbs(problem, family_presets()[cell.family], schedule)
    except SamplerError as e:
        logger.warning(f"Cell {cell} failed: {e.message}")
        row["error"] = f"{type(e).__name__}: {e.message}"
        return row
    fitted = problem.design.predict(chain.theta_mean)[:, 0]
    truth = cell.scale * bench.truth(bench.points())
    row["rmse_norm"] = float(np.sqrt(np.mean((fitted - truth) ** 2))) / cell.scale
    row["sigma2_hat"] = float(chain.sigma2_hat[0]) / cell.scale**2
    row["lambda_mean"] = float(chain.lambda_mean[0])
    if chain.num_draws >= 100:
        try:
            row["tau_lambda"] = autocorr_time(chain.lambdas[:, 0], spacing=spec.thin).tau
        except DiagnosticsError as e:
            logger.warning(f"Cell {cell}: {e.message}")
    return row


def _run_cell_args(args) -> dict:
    return _run_cell(*args)


def run_study(spec: StudySpec) -> StudyResult:
    """
    Run every (family, setting, replicate) cell of a scalar study.

    Cell failures are recorded in the ``error`` column and the study goes on.

    Parameters
    ----------
    spec : StudySpec

    Returns
    -------
    StudyResult
        One row per cell in family, setting, replicate order.

    Raises
    ------
    BenchmarkError
        For the force-matching study, which runs through ``compare_estimators``.
    """
    if spec.study == "fig-sample-lj":
        raise BenchmarkError("The force-matching study runs through compare_estimators.")
    cells = _cells(spec)
    logger.info(f"Running study {spec.study}: {len(cells)} cells on {spec.workers} worker(s).")
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as executor:
            rows = list(executor.map(_run_cell_args, [(spec, cell) for cell in cells]))
    else:
        rows = [_run_cell(spec, cell) for cell in cells]
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    failed = int((frame["error"] != "").sum())
    if failed:
        logger.warning(f"Study {spec.study}: {failed} of {len(cells)} cells failed.")
    logger.info(f"Study {spec.study} finished.")
    return StudyResult(spec=spec, frame=frame)


# --- force matching ------------------------------------------------------------------


ESTIMATOR_COLUMNS = ["M", "estimator", "pair", "mse", "converged", "error"]


def _observed_distances(samples, types, window) -> np.ndarray:
    terms = PairDistanceArgument(types=tuple(types)).terms(samples, np.arange(samples.num_samples))
    values = terms.values
    return values[(values >= window[0]) & (values < window[1])]


def compare_estimators(spec: StudySpec, sample_sizes: Optional[Sequence[int]] = None) -> pd.DataFrame:
    """
    Posterior mean, conditional-mode and GLS fits of the pair functions per sample size.

    The error of a pair function is the mean squared difference to the
    true spline over the pair distances observed in the fitted samples.

    Parameters
    ----------
    spec : StudySpec
        A ``fig-sample-lj`` study.
    sample_sizes : sequence of int, optional
        Overrides ``spec.sample_sizes``.

    Returns
    -------
    pandas.DataFrame
        Columns M, estimator, pair, mse, converged, error.
    """
    if spec.study != "fig-sample-lj":
        raise BenchmarkError(f"compare_estimators needs the fig-sample-lj study, got {spec.study}.")
    sizes = sorted(int(m) for m in (sample_sizes or spec.sample_sizes))
    config = replace(spec.lj, n_configs=max(sizes))
    try:
        trajectory = langevin_simulate(config)
        basis = config.fit_basis()
        projections = lj_potential_splines(config, basis)
        model = lj_pair_model(config, basis)
        forces = gen_force_samples(
            trajectory,
            {name: proj.theta for name, proj in projections.items()},
            config.force_noise,
            config.seed,
            model,
            config.window[0],
        )
    except DataGenError as e:
        logger.error(f"Force-matching data generation failed: {e.message}")
        raise BenchmarkError(f"Force-matching data generation failed: {e.message}") from e

    prior = family_presets()[spec.families[0]]
    rows = []
    for ci, m in enumerate(sizes):
        samples = forces.samples.subset(np.arange(m))
        problem = FitProblem.from_model(model, samples)
        fits = {}
        schedule = GibbsSchedule(
            burn_in=spec.burn_in, steps=spec.steps, thin=spec.thin, seed=spec.seed, stream_key=(CHAIN, 0, ci, 0)
        )
        for estimator in ("posterior-mean", "mle", "gls"):
            try:
                if estimator == "posterior-mean":
                    fits[estimator] = (run_gibbs(problem, prior, schedule).theta_mean, True, "")
                elif estimator == "mle":
                    fits[estimator] = (mle_fit(problem, prior).theta, True, "")
                else:
                    fits[estimator] = (gls_fit(problem).theta, True, "")
            except NonConvergenceError as e:
                fits[estimator] = (e.last_iterate.theta, False, f"{type(e).__name__}: {e.message}")
            except SamplerError as e:
                logger.warning(f"{estimator} fit at M={m} failed: {e.message}")
                fits[estimator] = (None, False, f"{type(e).__name__}: {e.message}")
        for k, group in enumerate(model.groups):
            component = next(c for c in model.components if c.group == group.name)
            distances = _observed_distances(samples, component.argument.types, config.window)
            rows_b = basis_matrix(basis, distances)
            truth = rows_b @ forces.theta_true[group.name]
            for estimator, (theta, converged, error) in fits.items():
                if theta is None:
                    mse = math.nan
                else:
                    estimate = rows_b @ theta[problem.group_slices[k]]
                    mse = float(np.mean((estimate - truth) ** 2)) if distances.size else math.nan
                rows.append(
                    {"M": m, "estimator": estimator, "pair": group.name, "mse": mse,
                     "converged": converged, "error": error}
                )
        logger.info(f"Compared estimators at M={m}.")
    return pd.DataFrame(rows, columns=ESTIMATOR_COLUMNS)
