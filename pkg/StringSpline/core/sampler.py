# core/sampler.py

"""
sampler.py
==========

Gibbs sampling and conditional-mode iteration over (theta, lambda, z).

The joint posterior of the coefficients theta, the per-group string tensions
lambda_K and the per-group noise precisions z_I has exact conditionals:

    theta | ...  ~ N(mean, Sigma),  Sigma^-1 = diag(lambda) Q + sum_I z_I D_I^T D_I
    z_I   | ...  ~ Gamma(N_I M / 2, (V0 + |D_I theta - Y_I|^2) / 2)
    lambda_K | ... ~ Gamma((p_K - n_K) / 2, (theta_K^T Q_K theta_K + E0) / 2)

for the zero-point prior (family X). Families Y and Z replace the lambda
conditional with the conjugate update of their own priors.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import cho_solve, lstsq, solve_triangular

from .logger import logger
from .model import (
    AdditiveModel,
    ConstraintSet,
    DesignMatrix,
    SampleSet,
    build_design,
    detect_constraints,
)
from .penalty import PenaltyMatrix, assemble_penalty, combined_penalty, string_energy
from .streams import stream


class SamplerError(Exception):
    """
    Custom exception for sampler and estimator failures.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the SamplerError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


class SingularityError(SamplerError):
    """
    Raised when the conditional precision of theta is not positive definite.

    Attributes
    ----------
    message : str
        Explanation of the error.
    iteration : int or None
        Sweep index at which the failure surfaced.
    direction : ndarray or None
        Unit coefficient vector of the least-determined mode.
    group : str or None
        Parameter group carrying most of that mode.
    """

    def __init__(self, message, iteration=None, direction=None, group=None):
        """
        Initialize the SingularityError with a message and the failing mode.

        Parameters
        ----------
        message : str
            Explanation of the error.
        iteration : int, optional
            Sweep index at which the failure surfaced.
        direction : ndarray, optional
            Unit coefficient vector of the least-determined mode.
        group : str, optional
            Parameter group carrying most of that mode.
        """
        super().__init__(message)
        self.iteration = iteration
        self.direction = direction
        self.group = group


class DegenerateChainError(SingularityError):
    """Raised when a chain runs off to a non-finite or numerically unresolvable tension."""


class NonConvergenceError(SamplerError):
    """
    Raised when the conditional-mode iteration exceeds its iteration budget.

    Attributes
    ----------
    message : str
        Explanation of the error.
    last_iterate : MLEResult
        State after the final iteration.
    iterations : int
        Iterations performed.
    """

    def __init__(self, message, last_iterate, iterations):
        """
        Initialize the NonConvergenceError with a message and the last state.

        Parameters
        ----------
        message : str
            Explanation of the error.
        last_iterate : MLEResult
            State after the final iteration.
        iterations : int
            Iterations performed.
        """
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


# --- priors ---------------------------------------------------------------------


class PriorFamily(str, Enum):
    """Prior on the string tension lambda."""

    X = "X"  # zero-point: Gamma(0, E0/2)
    Y = "Y"  # hierarchical: lambda | delta ~ Gamma(1, delta), delta ~ Gamma(a, b)
    Z = "Z"  # fixed: lambda ~ Gamma(1, scale b)


@dataclass(frozen=True)
class PriorConfig:
    """
    Zero-point constants and the lambda prior family.

    Attributes
    ----------
    e0 : float
        String zero-point energy E0 (>= 0).
    v0 : float
        Minimum residual variance V0 (>= 0).
    family : PriorFamily
    delta_shape, delta_rate : float
        Family Y hyperprior ``delta ~ Gamma(delta_shape, rate=delta_rate)``.
    lambda_scale : float
        Family Z prior mean b, ``lambda ~ Gamma(1, scale=b)``.
    label : str, optional
        Display name, e.g. ``"Z2"``.
    """

    e0: float = 1e-10
    v0: float = 1e-10
    family: PriorFamily = PriorFamily.X
    delta_shape: float = 1e-4
    delta_rate: float = 1e-4
    lambda_scale: float = 1e-2
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "family", PriorFamily(self.family))
        for name in ("e0", "v0"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise SamplerError(f"{name} must be finite and >= 0, got {value}.")
        for name in ("delta_shape", "delta_rate", "lambda_scale"):
            if getattr(self, name) <= 0:
                raise SamplerError(f"{name} must be positive, got {getattr(self, name)}.")

    @property
    def name(self) -> str:
        return self.label or self.family.value

    def lambda_conditional(self, eps_q: float, dof: int, delta: Optional[float] = None) -> Tuple[float, float]:
        """(shape, rate) of the lambda conditional for roughness ``eps_q``."""
        if self.family is PriorFamily.X:
            return dof / 2.0, (eps_q + self.e0) / 2.0
        if self.family is PriorFamily.Y:
            return dof / 2.0 + 1.0, eps_q / 2.0 + delta
        return dof / 2.0 + 1.0, eps_q / 2.0 + 1.0 / self.lambda_scale

    def to_dict(self) -> dict:
        return {
            "e0": self.e0,
            "v0": self.v0,
            "family": self.family.value,
            "delta_shape": self.delta_shape,
            "delta_rate": self.delta_rate,
            "lambda_scale": self.lambda_scale,
            "label": self.name,
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "PriorConfig":
        return cls(
            e0=float(spec.get("e0", 1e-10)),
            v0=float(spec.get("v0", 1e-10)),
            family=PriorFamily(spec.get("family", "X")),
            delta_shape=float(spec.get("delta_shape", 1e-4)),
            delta_rate=float(spec.get("delta_rate", 1e-4)),
            lambda_scale=float(spec.get("lambda_scale", 1e-2)),
            label=spec.get("label"),
        )


def zero_point_prior(log_lambda, e0: float):
    """Unnormalized family-X prior density on ln(lambda): exp(-lambda E0 / 2)."""
    return np.exp(-np.exp(log_lambda) * e0 / 2.0)


def zero_point_prior_slope(log_lambda, e0: float):
    return -np.exp(log_lambda) * e0 / 2.0 * zero_point_prior(log_lambda, e0)


def zero_point_half_point(e0: float) -> float:
    """ln(lambda) at which the zero-point prior density drops to 1/2."""
    return math.log(2.0 * math.log(2.0)) - math.log(e0)


def compound_prior_density(lam, a: float, b: float):
    """Family-Y marginal prior density of lambda after integrating out delta."""
    lam = np.asarray(lam, dtype=float)
    return a * b**a * (lam + b) ** (-a - 1.0)


def compound_prior_survival(lam, a: float, b: float):
    """P(Lambda > lam) = (b / (lam + b))^a under the family-Y prior."""
    lam = np.asarray(lam, dtype=float)
    return (b / (lam + b)) ** a


# --- problem --------------------------------------------------------------------


@dataclass
class FitProblem:
    """
    Design, targets, penalties, constraints and noise layout of one fit.

    Gram matrices ``D_I^T D_I`` and right-hand sides ``D_I^T Y_I`` are cached
    per variance group on construction.

    Attributes
    ----------
    design : DesignMatrix
    targets : ndarray
        Shape (M, N), rows aligned with ``design.kept``.
    penalties : tuple of PenaltyMatrix
        One per parameter group, in design order.
    constraints : ConstraintSet
    variance_groups : tuple of (str, ndarray)
        Label and output coordinates of each noise-precision group.
    """

    design: DesignMatrix
    targets: np.ndarray
    penalties: Tuple[PenaltyMatrix, ...]
    constraints: ConstraintSet
    variance_groups: Tuple[Tuple[str, np.ndarray], ...]
    grams: List[np.ndarray] = field(init=False, repr=False)
    rhs_parts: List[np.ndarray] = field(init=False, repr=False)
    target_norms: np.ndarray = field(init=False, repr=False)
    counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=float)
        self.penalties = tuple(self.penalties)
        self.variance_groups = tuple(self.variance_groups)
        if self.targets.shape != self.design.blocks.shape[:2]:
            raise SamplerError(
                f"Targets {self.targets.shape} do not match design blocks {self.design.blocks.shape[:2]}."
            )
        sizes = [pen.num_params for pen in self.penalties]
        expected = [sl.stop - sl.start for sl in self.design.group_slices]
        if sizes != expected:
            raise SamplerError(f"Penalty sizes {sizes} do not match parameter groups {expected}.")
        p = self.num_params
        self.grams, self.rhs_parts, norms, counts = [], [], [], []
        for _, coords in self.variance_groups:
            x = self.design.blocks[:, coords, :].reshape(-1, p)
            y = self.targets[:, coords].ravel()
            self.grams.append(x.T @ x)
            self.rhs_parts.append(x.T @ y)
            norms.append(float(y @ y))
            counts.append(y.size)
        self.target_norms = np.array(norms)
        self.counts = np.array(counts)
        self.dofs = np.array([pen.posterior_dof for pen in self.penalties])

    @classmethod
    def from_model(
        cls,
        model: AdditiveModel,
        samples: SampleSet,
        constraints: Union[str, ConstraintSet] = "detect",
        on_out_of_range: str = "raise",
    ) -> "FitProblem":
        """
        Build the design, penalties and constraints for ``model`` on ``samples``.

        Parameters
        ----------
        constraints : {"detect", "none"} or ConstraintSet
        on_out_of_range : {"raise", "drop"}
        """
        design = build_design(model, samples, on_out_of_range=on_out_of_range)
        penalties = tuple(assemble_penalty(g.basis, g.penalty) for g in model.groups)
        if isinstance(constraints, ConstraintSet):
            constraint_set = constraints
        elif constraints == "detect":
            constraint_set = detect_constraints(model, samples, design=design)
        elif constraints == "none":
            constraint_set = ConstraintSet.none(model, design.num_samples)
        else:
            raise SamplerError(f"Unknown constraint mode {constraints!r}.")
        return cls(
            design=design,
            targets=samples.targets[design.kept],
            penalties=penalties,
            constraints=constraint_set,
            variance_groups=tuple(model.variance_layout(samples)),
        )

    @property
    def num_params(self) -> int:
        return self.design.num_params

    @property
    def num_samples(self) -> int:
        return self.design.num_samples

    @property
    def group_slices(self) -> Tuple[slice, ...]:
        return self.design.group_slices

    @property
    def group_names(self) -> Tuple[str, ...]:
        return self.design.group_names

    @property
    def variance_labels(self) -> Tuple[str, ...]:
        return tuple(label for label, _ in self.variance_groups)

    def precision(self, lam: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = combined_penalty(self.penalties, lam)
        for zi, gram in zip(z, self.grams):
            out = out + zi * gram
        return out

    def rhs(self, z: np.ndarray) -> np.ndarray:
        return sum(zi * part for zi, part in zip(z, self.rhs_parts))

    def residual_sq(self, theta: np.ndarray) -> np.ndarray:
        """Squared residual norm per variance group."""
        out = np.empty(len(self.variance_groups))
        for i, (gram, part, yy) in enumerate(zip(self.grams, self.rhs_parts, self.target_norms)):
            value = theta @ gram @ theta - 2.0 * part @ theta + yy
            if value < 1e-8 * max(yy, 1e-300):
                coords = self.variance_groups[i][1]
                diff = self.design.blocks[:, coords, :] @ theta - self.targets[:, coords]
                value = float(np.sum(diff * diff))
            out[i] = max(value, 0.0)
        return out

    def roughness(self, theta: np.ndarray) -> np.ndarray:
        """theta_K^T Q_K theta_K per parameter group."""
        return np.array(
            [string_energy(pen, theta[sl]) for pen, sl in zip(self.penalties, self.group_slices)]
        )

    def initial_state(self, prior: PriorConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Scale-equivariant starting (lambda, z, delta)."""
        z0 = np.empty(len(self.variance_groups))
        for i, (_, coords) in enumerate(self.variance_groups):
            y = self.targets[:, coords]
            spread = float(np.sum((y - y.mean()) ** 2))
            z0[i] = y.size / (prior.v0 + spread) if prior.v0 + spread > 0 else 1.0
        data_trace = sum(np.trace(g) for g in self.grams)
        lam0 = np.empty(len(self.penalties))
        for k, (pen, sl) in enumerate(zip(self.penalties, self.group_slices)):
            q_trace = np.trace(pen.matrix)
            lam0[k] = z0.mean() * data_trace / q_trace if q_trace > 0 else z0.mean()
        return lam0, z0, 1.0 / lam0


# --- conditional draws ---------------------------------------------------------


@dataclass(frozen=True)
class ConditionalTheta:
    """Mean of theta | (lambda, z) and the lower Cholesky factor of its precision."""

    mean: np.ndarray
    factor: np.ndarray
    projector: Optional[np.ndarray] = None

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(self.mean.shape[0])
        theta = self.mean + solve_triangular(self.factor.T, noise, lower=False)
        if self.projector is not None:
            theta = self.projector @ theta
        return theta


def _weakest_direction(problem: FitProblem, matrix: np.ndarray) -> Tuple[np.ndarray, str, float]:
    values, vectors = np.linalg.eigh(matrix)
    direction = vectors[:, 0]
    index = int(np.argmax(np.abs(direction)))
    group = next(
        name for name, sl in zip(problem.group_names, problem.group_slices) if sl.start <= index < sl.stop
    )
    return direction, group, float(values[0])


def conditional_theta(
    problem: FitProblem, lam: np.ndarray, z: np.ndarray, iteration: Optional[int] = None
) -> ConditionalTheta:
    """
    Solve ``Sigma^-1 mean = sum_I z_I D_I^T Y_I`` and factor Sigma^-1.

    Constrained groups are handled by working in the subspace of centered
    coefficients: the precision is compressed with the constraint projector
    P as ``P A P + (I - P)``.

    Parameters
    ----------
    problem : FitProblem
    lam : ndarray
        Tension per parameter group (>= 0; zero switches the penalty off).
    z : ndarray
        Precision per variance group.
    iteration : int, optional
        Sweep index reported on failure.

    Returns
    -------
    ConditionalTheta

    Raises
    ------
    SingularityError
        If the precision is not positive definite on the constrained subspace.
    """
    lam = np.asarray(lam, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(z))):
        raise DegenerateChainError(
            f"Non-finite lambda={lam} or z={z} at iteration {iteration}.", iteration=iteration
        )
    matrix = problem.precision(lam, z)
    rhs = problem.rhs(z)
    projector = problem.constraints.projector()
    if projector is not None:
        matrix = projector @ matrix @ projector + (np.eye(problem.num_params) - projector)
        rhs = projector @ rhs
    try:
        factor = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as e:
        direction, group, value = _weakest_direction(problem, matrix)
        logger.error(
            f"Conditional precision not positive definite at iteration {iteration}; "
            f"weakest mode (eigenvalue {value:.3e}) lies in group '{group}'."
        )
        raise SingularityError(
            f"Conditional precision is singular at iteration {iteration}: the least-determined "
            f"mode (eigenvalue {value:.3e}) is concentrated in group '{group}' at coefficient "
            f"{int(np.argmax(np.abs(direction)))}.",
            iteration=iteration,
            direction=direction,
            group=group,
        ) from e
    mean = cho_solve((factor, True), rhs)
    return ConditionalTheta(mean=mean, factor=factor, projector=projector)


def draw_z(problem: FitProblem, theta: np.ndarray, v0: float, rng: np.random.Generator) -> np.ndarray:
    """One Gamma draw per variance group: shape N_I M / 2, rate (V0 + residual^2) / 2."""
    rates = (v0 + problem.residual_sq(theta)) / 2.0
    if np.any(rates <= 0):
        raise SamplerError("Exact fit with V0 = 0 leaves the noise precision unbounded.")
    return rng.gamma(problem.counts / 2.0, 1.0 / rates)


def draw_lambda(
    problem: FitProblem,
    theta: np.ndarray,
    prior: PriorConfig,
    rng: np.random.Generator,
    delta: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Draw lambda per parameter group (and delta for family Y).

    Returns
    -------
    lam : ndarray
    delta : ndarray or None
        Updated hyperparameters for family Y, otherwise passed through.
    """
    eps_q = problem.roughness(theta)
    if np.any(problem.dofs <= 0):
        raise SamplerError(f"Every group needs p_K > n_K, got degrees of freedom {problem.dofs}.")
    if prior.family is PriorFamily.Y and delta is None:
        raise SamplerError("Family Y needs a current delta.")
    lam = np.empty(eps_q.size)
    for k in range(eps_q.size):
        shape, rate = prior.lambda_conditional(
            eps_q[k], int(problem.dofs[k]), None if delta is None else delta[k]
        )
        if rate <= 0:
            raise DegenerateChainError(
                f"Roughness of group '{problem.group_names[k]}' is exactly zero with E0 = 0."
            )
        lam[k] = rng.gamma(shape, 1.0 / rate)
    if prior.family is PriorFamily.Y:
        delta = rng.gamma(prior.delta_shape + 1.0, 1.0 / (prior.delta_rate + lam))
    return lam, delta


# --- chains -----------------------------------------------------------------------


@dataclass(frozen=True)
class GibbsSchedule:
    """
    Sweep counts and seeding of one chain.

    ``burn_in + steps`` sweeps are run; after burn-in every ``thin``-th sweep
    is recorded, giving ``ceil(steps / thin)`` stored draws.
    """

    burn_in: int = 2500
    steps: int = 25000
    thin: int = 5
    seed: int = 0
    stream_key: Tuple[int, ...] = ()
    store_draws: bool = False
    max_condition: float = 1e15
    log_every: int = 5000

    def __post_init__(self):
        if self.burn_in < 0 or self.steps < 1 or self.thin < 1:
            raise SamplerError(
                f"Invalid schedule burn_in={self.burn_in}, steps={self.steps}, thin={self.thin}."
            )
        object.__setattr__(self, "stream_key", tuple(int(k) for k in self.stream_key))

    @property
    def num_draws(self) -> int:
        return len(range(0, self.steps, self.thin))

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.steps

    def to_dict(self) -> dict:
        return {
            "burn_in": self.burn_in,
            "steps": self.steps,
            "thin": self.thin,
            "seed": self.seed,
            "stream_key": list(self.stream_key),
            "store_draws": self.store_draws,
        }


@dataclass
class GibbsState:
    """Current (theta, lambda, z) with the generator driving the chain."""

    theta: np.ndarray
    lam: np.ndarray
    z: np.ndarray
    rng: np.random.Generator
    delta: Optional[np.ndarray] = None

    @property
    def alpha(self) -> np.ndarray:
        return self.lam / self.z.mean()


@dataclass
class Chain:
    """
    Thinned record of one Gibbs run.

    Attributes
    ----------
    lambdas : ndarray, shape (S, N_F)
    zs : ndarray, shape (S, N_z)
    conditional_means : ndarray, shape (S, p)
        ``E[theta | lambda, z]`` at each stored draw.
    eps_f : ndarray, shape (S, N_z)
        Squared residual of the conditional mean per variance group.
    eps_q : ndarray, shape (S, N_F)
        Roughness of the conditional mean per parameter group.
    theta_mean : ndarray
        Average of the stored conditional means.
    theta_cov : ndarray
        Posterior covariance estimate.
    schedule : GibbsSchedule
    prior : PriorConfig
    group_names, variance_labels : tuple of str
    constraints : dict
        Constraint report.
    iterations : ndarray
        Sweep index of each stored draw.
    thetas : ndarray, optional
        Raw theta draws when the schedule stores them.
    final_state : GibbsState
    """

    lambdas: np.ndarray
    zs: np.ndarray
    conditional_means: np.ndarray
    eps_f: np.ndarray
    eps_q: np.ndarray
    theta_mean: np.ndarray
    theta_cov: np.ndarray
    schedule: GibbsSchedule
    prior: PriorConfig
    group_names: Tuple[str, ...]
    variance_labels: Tuple[str, ...]
    constraints: dict
    iterations: np.ndarray
    thetas: Optional[np.ndarray] = None
    final_state: Optional[GibbsState] = None

    @property
    def num_draws(self) -> int:
        return self.lambdas.shape[0]

    @property
    def lambda_mean(self) -> np.ndarray:
        return self.lambdas.mean(axis=0)

    @property
    def sigma2_hat(self) -> np.ndarray:
        """Posterior mean of 1/z per variance group."""
        return (1.0 / self.zs).mean(axis=0)

    def degeneracy_indicators(self, ratio: float = 10.0) -> dict:
        """Fraction of draws with eps_Q/E0 or eps_f/V0 below ``ratio``."""
        out = {}
        if self.prior.e0 > 0:
            out["polynomial_fraction"] = float(np.mean(self.eps_q / self.prior.e0 < ratio))
        if self.prior.v0 > 0:
            out["interpolation_fraction"] = float(np.mean(self.eps_f / self.prior.v0 < ratio))
        return out

    def trace_frame(self) -> pd.DataFrame:
        frame = {"iter": self.iterations}
        for k, name in enumerate(self.group_names):
            frame[f"lambda_{name}"] = self.lambdas[:, k]
        for i, label in enumerate(self.variance_labels):
            frame[f"z_{label}"] = self.zs[:, i]
        return pd.DataFrame(frame)

    def header(self) -> dict:
        return {
            "estimator": "posterior-mean",
            "schedule": self.schedule.to_dict(),
            "prior": self.prior.to_dict(),
            "num_draws": self.num_draws,
            "groups": list(self.group_names),
            "variance_groups": list(self.variance_labels),
            "constraints": self.constraints,
            "degeneracy": self.degeneracy_indicators(),
        }


def run_gibbs(
    problem: FitProblem,
    prior: PriorConfig,
    schedule: GibbsSchedule = GibbsSchedule(),
    initial: Optional[GibbsState] = None,
) -> Chain:
    """
    Run one Gibbs chain sweeping theta -> z -> lambda.

    Parameters
    ----------
    problem : FitProblem
    prior : PriorConfig
    schedule : GibbsSchedule, optional
        Defaults to 2500 burn-in sweeps, 25000 sampling sweeps, thinning 5.
    initial : GibbsState, optional
        Starting state; overrides the schedule's seed when given.

    Returns
    -------
    Chain

    Raises
    ------
    SingularityError
        If the theta conditional is singular at some sweep.
    DegenerateChainError
        If lambda becomes non-finite or the penalty swamps the data beyond
        ``schedule.max_condition``.
    """
    if initial is None:
        lam, z, delta = problem.initial_state(prior)
        rng = stream(schedule.seed, *schedule.stream_key)
    else:
        lam, z, delta, rng = initial.lam.copy(), initial.z.copy(), initial.delta, initial.rng
        if delta is None:
            delta = 1.0 / lam
    if prior.family is not PriorFamily.Y:
        delta = None

    n_draws, p = schedule.num_draws, problem.num_params
    lambdas = np.empty((n_draws, lam.size))
    zs = np.empty((n_draws, z.size))
    means = np.empty((n_draws, p))
    eps_f = np.empty((n_draws, z.size))
    eps_q = np.empty((n_draws, lam.size))
    iterations = np.empty(n_draws, dtype=int)
    thetas = np.empty((n_draws, p)) if schedule.store_draws else None
    penalty_norms = np.array([max(float(pen.eigenvalues[-1]), 0.0) for pen in problem.penalties])
    data_norms = np.array([float(np.linalg.eigvalsh(g)[-1]) for g in problem.grams])

    logger.info(
        f"Starting Gibbs chain: {schedule.total_sweeps} sweeps, {n_draws} stored draws, "
        f"p={p}, prior {prior.name}, seed {schedule.seed}."
    )
    theta = np.zeros(p)
    slot = 0
    for it in range(schedule.total_sweeps):
        cond = conditional_theta(problem, lam, z, iteration=it)
        theta = cond.draw(rng)
        if it >= schedule.burn_in and (it - schedule.burn_in) % schedule.thin == 0:
            lambdas[slot], zs[slot], means[slot] = lam, z, cond.mean
            eps_f[slot] = problem.residual_sq(cond.mean)
            eps_q[slot] = problem.roughness(cond.mean)
            iterations[slot] = it
            if thetas is not None:
                thetas[slot] = theta
            slot += 1
        z = draw_z(problem, theta, prior.v0, rng)
        lam, delta = draw_lambda(problem, theta, prior, rng, delta)

        scale = float(np.sum(z * data_norms))
        ratio = float(np.max(lam * penalty_norms)) / scale if scale > 0 else math.inf
        if not np.all(np.isfinite(lam)) or ratio > schedule.max_condition:
            logger.error(f"Chain degenerated at sweep {it}: lambda={lam}, penalty/data ratio {ratio:.3e}.")
            raise DegenerateChainError(
                f"Chain degenerated at sweep {it}: lambda={lam.tolist()} drives the penalty/data "
                f"ratio to {ratio:.3e} (limit {schedule.max_condition:.1e}).",
                iteration=it,
            )
        if schedule.log_every and (it + 1) % schedule.log_every == 0:
            logger.debug(f"Sweep {it + 1}/{schedule.total_sweeps}: lambda={lam}, z={z}.")

    theta_mean = means.mean(axis=0)
    if thetas is not None and n_draws > 1:
        theta_cov = np.atleast_2d(np.cov(thetas, rowvar=False))
    else:
        spread = np.atleast_2d(np.cov(means, rowvar=False)) if n_draws > 1 else np.zeros((p, p))
        cond = conditional_theta(problem, lambdas.mean(axis=0), zs.mean(axis=0))
        within = cho_solve((cond.factor, True), np.eye(p))
        if cond.projector is not None:
            within = cond.projector @ within @ cond.projector
        theta_cov = spread + within
    logger.info(
        f"Gibbs chain finished: mean lambda {lambdas.mean(axis=0)}, mean z {zs.mean(axis=0)}."
    )
    return Chain(
        lambdas=lambdas,
        zs=zs,
        conditional_means=means,
        eps_f=eps_f,
        eps_q=eps_q,
        theta_mean=theta_mean,
        theta_cov=theta_cov,
        schedule=schedule,
        prior=prior,
        group_names=problem.group_names,
        variance_labels=problem.variance_labels,
        constraints=problem.constraints.to_dict(),
        iterations=iterations,
        thetas=thetas,
        final_state=GibbsState(theta=theta, lam=lam, z=z, rng=rng, delta=delta),
    )


# --- point estimators -------------------------------------------------------------


@dataclass
class MLEResult:
    """Fixed point of the conditional-mode iteration (or a GLS fit)."""

    theta: np.ndarray
    lam: np.ndarray
    z: np.ndarray
    iterations: int
    converged: bool
    history: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)
    delta: Optional[np.ndarray] = None


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(old)), 1e-300)
    return float(np.linalg.norm(new - old)) / scale


def mle_fit(problem: FitProblem, prior: PriorConfig, tol: float = 1e-8, max_iter: int = 500) -> MLEResult:
    """
    Iterate each conditional to its mode until all parameters settle.

    theta takes the conditional mean, ``z_I <- (N_I M - 2) / (V0 + eps_f^2)``
    and lambda the mode of its family's conditional, which for family X is
    ``(p_K - n_K - 2) / (eps_Q^2 + E0)``.

    Returns
    -------
    MLEResult

    Raises
    ------
    NonConvergenceError
        If the relative change is still above ``tol`` after ``max_iter``.
    SamplerError
        If a conditional mode does not exist.
    """
    if np.any(problem.counts <= 2):
        raise SamplerError("Conditional z modes need more than two observations per group.")
    lam, z, delta = problem.initial_state(prior)
    if prior.family is not PriorFamily.Y:
        delta = None
    theta = conditional_theta(problem, lam, z).mean
    history = []
    for it in range(1, max_iter + 1):
        z_new = (problem.counts - 2.0) / (prior.v0 + problem.residual_sq(theta))
        eps_q = problem.roughness(theta)
        lam_new = np.empty_like(lam)
        for k in range(lam.size):
            shape, rate = prior.lambda_conditional(
                eps_q[k], int(problem.dofs[k]), None if delta is None else delta[k]
            )
            if shape <= 1.0:
                raise SamplerError(
                    f"Group '{problem.group_names[k]}' needs p_K > n_K + 2 for a lambda mode."
                )
            lam_new[k] = (shape - 1.0) / rate
        if not (np.all(np.isfinite(lam_new)) and np.all(np.isfinite(z_new))):
            raise SamplerError(f"Conditional modes diverged at iteration {it}: lambda={lam_new}, z={z_new}.")
        delta_new = None if delta is None else prior.delta_shape / (prior.delta_rate + lam_new)
        theta_new = conditional_theta(problem, lam_new, z_new, iteration=it).mean
        change = max(
            _relative_change(theta_new, theta),
            _relative_change(lam_new, lam),
            _relative_change(z_new, z),
        )
        theta, lam, z, delta = theta_new, lam_new, z_new, delta_new
        history.append((lam.copy(), z.copy()))
        if change < tol:
            logger.info(f"Conditional-mode iteration converged after {it} iterations: lambda={lam}, z={z}.")
            return MLEResult(theta=theta, lam=lam, z=z, iterations=it, converged=True, history=history, delta=delta)
    last = MLEResult(theta=theta, lam=lam, z=z, iterations=max_iter, converged=False, history=history, delta=delta)
    logger.error(f"Conditional-mode iteration did not converge in {max_iter} iterations.")
    raise NonConvergenceError(
        f"No convergence to relative tolerance {tol} within {max_iter} iterations.", last, max_iter
    )


def gls_fit(problem: FitProblem) -> MLEResult:
    """Unpenalized (lambda = 0) minimum-norm least-squares fit respecting the constraints."""
    stacked = problem.design.stacked
    y = problem.targets.ravel()
    projector = problem.constraints.projector()
    design = stacked if projector is None else stacked @ projector
    theta = lstsq(design, y)[0]
    if projector is not None:
        theta = projector @ theta
    z = problem.counts / np.maximum(problem.residual_sq(theta), 1e-300)
    logger.info(f"GLS fit: residual per group {problem.residual_sq(theta)}.")
    return MLEResult(
        theta=theta,
        lam=np.zeros(len(problem.penalties)),
        z=z,
        iterations=1,
        converged=True,
        history=[(np.zeros(len(problem.penalties)), z.copy())],
    )
