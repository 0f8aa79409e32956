# core/datagen.py

"""
datagen.py
==========

Synthetic data for the benchmarks.

Scalar benchmarks sample ``c * (f(r) + sigma * eps)`` at equidistant points on
[-3, 3]. The force-matching benchmark runs a binary Lennard-Jones fluid under
a Langevin thermostat, replaces the pair forces by their spline
representations and adds Gaussian noise to every force component.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import pandas as pd

from .bspline import BSplineError, Projection, SplineBasis, aperiodic_basis, project
from .logger import logger
from .model import (
    AdditiveModel,
    ComponentFunction,
    PairDistanceArgument,
    PairForceDirection,
    ParameterGroup,
    SampleSet,
    build_design,
    minimum_image,
)
from .penalty import PenaltyConfig
from .streams import DYNAMICS, FORCE_NOISE, REPLICATE_NOISE, SCALAR_NOISE, stream

FORCE_LIMIT = 1e12
PAIR_TYPES = (("A", "A"), ("A", "B"), ("B", "B"))


class DataGenError(Exception):
    """
    Custom exception for data generation errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    step : int or None
        Integration step at which a simulation failed.
    """

    def __init__(self, message, step=None):
        """
        Initialize the DataGenError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        step : int, optional
            Integration step at which the failure occurred.
        """
        super().__init__(message)
        self.message = message
        self.step = step


# --- scalar benchmarks ----------------------------------------------------------


def f1(r):
    return np.asarray(r, dtype=float) / 1.758


def f3(r):
    return np.sin(np.pi * np.asarray(r, dtype=float) / 3.0) / 0.72


TEST_FUNCTIONS = {"f1": f1, "f3": f3}


@dataclass(frozen=True)
class ScalarBenchmark:
    """
    One noisy sampling of a test function.

    Attributes
    ----------
    function : str
        ``"f1"`` (linear) or ``"f3"`` (sinusoid).
    num_samples : int
        M equidistant points on ``[lo, hi]`` (both ends included).
    sigma : float
        Noise standard deviation before scaling.
    scale : float
        Overall scale c applied to function and noise alike.
    seed : int
    replicate : int, optional
        Selects the replicate noise stream; the scalar stream is used when None.
    """

    function: str = "f3"
    num_samples: int = 20
    sigma: float = 0.1
    scale: float = 1.0
    seed: int = 0
    replicate: Optional[int] = None
    lo: float = -3.0
    hi: float = 3.0

    def __post_init__(self):
        if self.function not in TEST_FUNCTIONS:
            raise DataGenError(f"Unknown test function {self.function!r}; expected one of {sorted(TEST_FUNCTIONS)}.")
        if self.num_samples < 2:
            raise DataGenError(f"Need at least two samples, got {self.num_samples}.")
        if self.sigma < 0 or self.scale <= 0:
            raise DataGenError(f"Need sigma >= 0 and scale > 0, got sigma={self.sigma}, scale={self.scale}.")

    def truth(self, r) -> np.ndarray:
        """Unscaled test function values."""
        return TEST_FUNCTIONS[self.function](r)

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.num_samples)


def gen_scalar(bench: ScalarBenchmark) -> SampleSet:
    """
    Sample ``y = c * (f(r) + sigma * eps)`` at equidistant r.

    The standard normal vector eps depends only on the seed, the replicate
    and M, so benchmarks differing in scale or sigma share one noise
    realization.
    """
    r = bench.points()
    if bench.replicate is None:
        rng = stream(bench.seed, SCALAR_NOISE)
    else:
        rng = stream(bench.seed, REPLICATE_NOISE, bench.replicate)
    eps = rng.standard_normal(bench.num_samples)
    y = bench.scale * (bench.truth(r) + bench.sigma * eps)
    return SampleSet(inputs=r, targets=y, seed=bench.seed, noise_scale=bench.scale * bench.sigma)


# --- Lennard-Jones system ---------------------------------------------------------


@dataclass(frozen=True)
class LJConfig:
    """
    Binary Lennard-Jones fluid, thermostat and sampling settings.

    Lengths are in units of the LJ diameter and energies in units of the
    well depth; the cross-type coupling scales the A:B potential.

    Attributes
    ----------
    n_particles : int
        Total particle count; the first ``n_type_a`` are type A.
    n_type_a : int, optional
        Defaults to half the particles.
    cell_length : float, optional
        Cubic cell length; defaults to ``7.49 * (n / 256)^(1/3)`` so the
        256-particle density is kept.
    coupling_cross : float
        Coupling c for A:B pairs (1 for like pairs).
    temperature : float
        Target velocity variance (1 / beta).
    time_step : float
    friction : float
        Dimensionless friction gamma * dt per step.
    equilibration : int
        Steps discarded before sampling.
    stride : int
        Steps between recorded configurations.
    n_configs : int
    force_noise : float
        Standard deviation sigma_F of the noise on every force component.
    window : tuple of float
        Distance range over which the pair functions are represented.
    basis_order, basis_intervals : int
        Fit basis on ``[0, window[1]]`` vanishing at the cutoff.
    seed : int
    """

    n_particles: int = 32
    n_type_a: Optional[int] = None
    cell_length: Optional[float] = None
    coupling_cross: float = 0.5
    temperature: float = 0.7917
    time_step: float = 1.461e-3
    friction: float = 1e-2
    equilibration: int = 100_000
    stride: int = 500
    n_configs: int = 100
    force_noise: float = 60.91
    window: Tuple[float, float] = (4.0 / 7.0, 17.0 / 7.0)
    basis_order: int = 6
    basis_intervals: int = 170
    seed: int = 0
    mass: float = 1.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise DataGenError(f"Need at least two particles, got {self.n_particles}.")
        if self.n_type_a is None:
            object.__setattr__(self, "n_type_a", self.n_particles // 2)
        if not 0 <= self.n_type_a <= self.n_particles:
            raise DataGenError(f"n_type_a={self.n_type_a} outside [0, {self.n_particles}].")
        if self.cell_length is None:
            object.__setattr__(self, "cell_length", 7.49 * (self.n_particles / 256.0) ** (1.0 / 3.0))
        object.__setattr__(self, "window", tuple(float(w) for w in self.window))
        if not 0 < self.window[0] < self.window[1]:
            raise DataGenError(f"Invalid distance window {self.window}.")
        if self.window[1] > self.cell_length / 2.0:
            # only the nearest image of each pair interacts, in dynamics and fits alike
            logger.warning(
                f"Cutoff {self.window[1]:.4f} exceeds half the cell length {self.cell_length / 2.0:.4f}."
            )
        for name in ("temperature", "time_step", "mass"):
            if getattr(self, name) <= 0:
                raise DataGenError(f"{name} must be positive, got {getattr(self, name)}.")
        if self.friction < 0 or self.force_noise < 0 or self.coupling_cross < 0:
            raise DataGenError("friction, force_noise and coupling_cross must be >= 0.")
        if self.stride < 1 or self.n_configs < 1 or self.equilibration < 0:
            raise DataGenError("stride and n_configs must be >= 1 and equilibration >= 0.")

    @classmethod
    def full_scale(cls, **overrides) -> "LJConfig":
        """The 256-particle, 500-configuration system."""
        values = {"n_particles": 256, "n_configs": 500}
        values.update(overrides)
        return cls(**values)

    @property
    def cutoff(self) -> float:
        return self.window[1]

    @property
    def particle_types(self) -> np.ndarray:
        return np.array(["A"] * self.n_type_a + ["B"] * (self.n_particles - self.n_type_a))

    def coupling(self, a: str, b: str) -> float:
        return 1.0 if a == b else self.coupling_cross

    def fit_basis(self) -> SplineBasis:
        """Order-r basis on ``[0, cutoff]`` vanishing with all derivatives at the cutoff."""
        return aperiodic_basis(
            0.0, self.cutoff, self.basis_order, intervals=self.basis_intervals, vanishing_end=True
        )

    def to_dict(self) -> dict:
        spec = asdict(self)
        spec["window"] = list(self.window)
        return spec

    @classmethod
    def from_dict(cls, spec: dict) -> "LJConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(spec) - known
        if unknown:
            raise DataGenError(f"Unknown LJ config fields {sorted(unknown)}.")
        values = dict(spec)
        if "window" in values:
            values["window"] = tuple(values["window"])
        return cls(**values)

    @classmethod
    def load(cls, path: str) -> "LJConfig":
        try:
            with open(path, "r") as file:
                spec = json.load(file)
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to read LJ config {path}: {e}")
            raise DataGenError(f"Failed to read LJ config {path}.") from e
        return cls.from_dict(spec.get("lj", spec))


def lj_energy(t, coupling: float):
    """4c (t^-12 - t^-6)."""
    t = np.asarray(t, dtype=float)
    inv6 = t**-6
    return 4.0 * coupling * (inv6 * inv6 - inv6)


def lj_derivative(t, coupling: float):
    """dE/dt = 4c (-12 t^-13 + 6 t^-7)."""
    t = np.asarray(t, dtype=float)
    inv6 = t**-6
    return 4.0 * coupling * (-12.0 * inv6 * inv6 + 6.0 * inv6) / t


def shifted_force_derivative(t, coupling: float, cutoff: float):
    """Pair-energy derivative shifted to vanish at the cutoff, zero beyond it."""
    t = np.asarray(t, dtype=float)
    inside = t < cutoff
    safe = np.where(inside, t, cutoff)
    return np.where(inside, lj_derivative(safe, coupling) - lj_derivative(cutoff, coupling), 0.0)


def shifted_force_energy(t, coupling: float, cutoff: float):
    """Shifted-force pair energy, continuous with its derivative at the cutoff."""
    t = np.asarray(t, dtype=float)
    inside = t < cutoff
    safe = np.where(inside, t, cutoff)
    value = (
        lj_energy(safe, coupling)
        - lj_energy(cutoff, coupling)
        - (safe - cutoff) * lj_derivative(cutoff, coupling)
    )
    return np.where(inside, value, 0.0)


@dataclass
class Trajectory:
    """
    Recorded configurations of a Langevin run.

    Attributes
    ----------
    frames : ndarray
        Positions, shape (n_configs, n, 3), wrapped into the cell.
    particle_types : ndarray
    box : float
    energies : pandas.DataFrame
        Columns step, kinetic, potential, total at every recorded frame.
    velocity_variance : float
        Per-component velocity variance over the production run.
    """

    frames: np.ndarray
    particle_types: np.ndarray
    box: float
    energies: pd.DataFrame
    velocity_variance: float

    def samples(self, seed: Optional[int] = None) -> SampleSet:
        """Frames as particle samples with zero force targets."""
        n = self.frames.shape[1]
        return SampleSet(
            inputs=self.frames,
            targets=np.zeros((self.frames.shape[0], 3 * n)),
            particle_types=self.particle_types,
            box=self.box,
            seed=seed,
        )


class LangevinSimulator:
    """
    BAOAB Langevin integrator for the binary Lennard-Jones fluid.

    Pairs interact through the shifted-force truncation at the configuration
    cutoff, so forces and energy are continuous there.

    Attributes
    ----------
    config : LJConfig
    rng : numpy.random.Generator
    positions, velocities : ndarray
        Current state, shape (n, 3).
    """

    def __init__(self, config: LJConfig, rng: Optional[np.random.Generator] = None):
        """
        Place particles on a simple cubic lattice and draw Maxwell velocities.

        Parameters
        ----------
        config : LJConfig
        rng : numpy.random.Generator, optional
            Defaults to the dynamics stream of ``config.seed``.
        """
        self.config = config
        self.rng = rng if rng is not None else stream(config.seed, DYNAMICS)
        self.types = config.particle_types
        self._pairs = np.triu_indices(config.n_particles, k=1)
        ti, tj = self.types[self._pairs[0]], self.types[self._pairs[1]]
        self._coupling = np.where(ti == tj, 1.0, config.coupling_cross)
        self.positions = self._lattice()
        velocities = self.rng.standard_normal((config.n_particles, 3)) * math.sqrt(
            config.temperature / config.mass
        )
        self.velocities = velocities - velocities.mean(axis=0)
        self.forces, self.potential = self.compute_forces(self.positions)
        self.step_count = 0

    def _lattice(self) -> np.ndarray:
        """Simple cubic sites ordered by z, so type A fills the lower layers."""
        n, box = self.config.n_particles, self.config.cell_length
        side = math.ceil(round(n ** (1.0 / 3.0), 9))
        spacing = box / side
        z, y, x = np.meshgrid(np.arange(side), np.arange(side), np.arange(side), indexing="ij")
        sites = (np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1) + 0.5) * spacing
        pick = np.round(np.linspace(0, sites.shape[0] - 1, n)).astype(int)
        return sites[pick]

    def compute_forces(self, positions: np.ndarray) -> Tuple[np.ndarray, float]:
        """
        Forces on every particle and the total potential energy.

        Raises
        ------
        DataGenError
            If any force component exceeds the blow-up limit.
        """
        cfg = self.config
        i, j = self._pairs
        delta = minimum_image(positions[i] - positions[j], cfg.cell_length)
        dist = np.linalg.norm(delta, axis=1)
        near = dist < cfg.cutoff
        deriv = shifted_force_derivative(dist[near], self._coupling[near], cfg.cutoff)
        pair_force = -deriv[:, None] * delta[near] / dist[near][:, None]
        forces = np.zeros_like(positions)
        np.add.at(forces, i[near], pair_force)
        np.add.at(forces, j[near], -pair_force)
        potential = float(np.sum(shifted_force_energy(dist[near], self._coupling[near], cfg.cutoff)))
        if not np.all(np.isfinite(forces)) or np.max(np.abs(forces)) > FORCE_LIMIT:
            logger.error(f"Force blow-up at step {getattr(self, 'step_count', 0)}.")
            raise DataGenError(
                f"Force exceeded {FORCE_LIMIT:.0e} at step {getattr(self, 'step_count', 0)}.",
                step=getattr(self, "step_count", 0),
            )
        return forces, potential

    @property
    def kinetic(self) -> float:
        return 0.5 * self.config.mass * float(np.sum(self.velocities**2))

    def step(self) -> None:
        """One B-A-O-A-B update with an exact Ornstein-Uhlenbeck velocity step."""
        cfg = self.config
        dt, m = cfg.time_step, cfg.mass
        decay = math.exp(-cfg.friction)
        kick = math.sqrt((1.0 - decay * decay) * cfg.temperature / m)
        self.velocities += 0.5 * dt * self.forces / m
        self.positions += 0.5 * dt * self.velocities
        if cfg.friction > 0:
            self.velocities = decay * self.velocities + kick * self.rng.standard_normal(self.velocities.shape)
        self.positions += 0.5 * dt * self.velocities
        self.positions %= cfg.cell_length
        self.step_count += 1
        self.forces, self.potential = self.compute_forces(self.positions)
        self.velocities += 0.5 * dt * self.forces / m

    def run(self, n_configs: Optional[int] = None, equilibration: Optional[int] = None) -> Trajectory:
        """
        Equilibrate, then record a configuration every ``stride`` steps.

        Returns
        -------
        Trajectory
        """
        cfg = self.config
        n_configs = cfg.n_configs if n_configs is None else n_configs
        equilibration = cfg.equilibration if equilibration is None else equilibration
        logger.info(
            f"Langevin run: {cfg.n_particles} particles, {equilibration} equilibration steps, "
            f"{n_configs} configurations every {cfg.stride} steps."
        )
        for _ in range(equilibration):
            self.step()
        frames = np.empty((n_configs, cfg.n_particles, 3))
        records = []
        square_sum, count = 0.0, 0
        for k in range(n_configs):
            for _ in range(cfg.stride):
                self.step()
                square_sum += float(np.sum(self.velocities**2))
                count += self.velocities.size
            frames[k] = self.positions
            kinetic = self.kinetic
            records.append(
                {
                    "step": self.step_count,
                    "kinetic": kinetic,
                    "potential": self.potential,
                    "total": kinetic + self.potential,
                }
            )
        variance = square_sum / count if count else math.nan
        logger.info(f"Langevin run finished: velocity variance {variance:.4f} (target {cfg.temperature}).")
        return Trajectory(
            frames=frames,
            particle_types=self.types.copy(),
            box=cfg.cell_length,
            energies=pd.DataFrame(records, columns=["step", "kinetic", "potential", "total"]),
            velocity_variance=variance,
        )


def langevin_simulate(config: LJConfig) -> Trajectory:
    """Run the configured Langevin simulation from the dynamics stream."""
    return LangevinSimulator(config).run()


# --- pair splines and force samples ------------------------------------------------


def pair_name(types: Tuple[str, str]) -> str:
    return f"{types[0]}:{types[1]}"


def lj_potential_splines(config: LJConfig, basis: Optional[SplineBasis] = None) -> Dict[str, Projection]:
    """
    Project each pair's shifted-force derivative E'(t) onto ``basis``.

    Returns
    -------
    dict
        Pair name (``"A:A"``, ``"A:B"``, ``"B:B"``) to its Projection; the
        residual is the max error over the distance window.

    Raises
    ------
    DataGenError
        If the projection is ill-conditioned or the window leaves the basis.
    """
    basis = config.fit_basis() if basis is None else basis
    out = {}
    for types in PAIR_TYPES:
        coupling = config.coupling(*types)
        if coupling == 0.0:
            out[pair_name(types)] = Projection(
                theta=np.zeros(basis.num_params), residual=0.0, condition=1.0,
                active=np.zeros(basis.num_params, dtype=bool),
            )
            continue
        try:
            out[pair_name(types)] = project(
                basis,
                lambda t, c=coupling: shifted_force_derivative(t, c, config.cutoff),
                window=config.window,
            )
        except BSplineError as e:
            logger.error(f"Projection of the {pair_name(types)} pair function failed: {e.message}")
            raise DataGenError(f"Projection of the {pair_name(types)} pair function failed: {e.message}") from e
        logger.info(f"Projected {pair_name(types)} pair function, residual {out[pair_name(types)].residual:.3e}.")
    return out


def lj_pair_model(
    config: LJConfig,
    basis: Optional[SplineBasis] = None,
    penalty: PenaltyConfig = PenaltyConfig(deriv_order=2, density_exponent=2),
) -> AdditiveModel:
    """Three pair-force groups (A:A, A:B, B:B) with per-type noise precisions."""
    basis = config.fit_basis() if basis is None else basis
    groups, components = [], []
    for types in PAIR_TYPES:
        name = pair_name(types)
        groups.append(ParameterGroup(name=name, basis=basis, penalty=penalty))
        components.append(
            ComponentFunction(name, name, PairDistanceArgument(types=types), PairForceDirection())
        )
    return AdditiveModel(
        groups=tuple(groups),
        components=tuple(components),
        output_dim=3 * config.n_particles,
        variance_groups="by-type",
    )


def min_pair_distance(frames: np.ndarray, box: float) -> float:
    i, j = np.triu_indices(frames.shape[1], k=1)
    delta = minimum_image(frames[:, i] - frames[:, j], box)
    return float(np.min(np.linalg.norm(delta, axis=2)))


@dataclass
class ForceSampleSet:
    """
    Noisy force samples with the spline parameters that generated them.

    Attributes
    ----------
    samples : SampleSet
        Particle frames with targets ``D theta_true + noise``.
    theta_true : dict
        Pair name to coefficient vector.
    model : AdditiveModel
    noise_scale : float
    """

    samples: SampleSet
    theta_true: Dict[str, np.ndarray]
    model: AdditiveModel
    noise_scale: float
    mean_forces: np.ndarray = field(repr=False, default=None)

    @property
    def theta_vector(self) -> np.ndarray:
        return np.concatenate([self.theta_true[name] for name in self.model.group_names])

    def to_frame(self) -> pd.DataFrame:
        """One row per particle per frame: frame, id, type, x, y, z, fx, fy, fz."""
        frames = self.samples.inputs
        m, n, _ = frames.shape
        forces = self.samples.targets.reshape(m, n, 3)
        return pd.DataFrame(
            {
                "frame": np.repeat(np.arange(m), n),
                "id": np.tile(np.arange(n), m),
                "type": np.tile(self.samples.particle_types, m),
                "x": frames[:, :, 0].ravel(),
                "y": frames[:, :, 1].ravel(),
                "z": frames[:, :, 2].ravel(),
                "fx": forces[:, :, 0].ravel(),
                "fy": forces[:, :, 1].ravel(),
                "fz": forces[:, :, 2].ravel(),
            }
        )


def gen_force_samples(
    trajectory: Trajectory,
    theta_true: Dict[str, np.ndarray],
    sigma_f: float,
    seed: int,
    model: AdditiveModel,
    min_distance: float,
) -> ForceSampleSet:
    """
    Spline mean forces ``D theta_true`` plus N(0, sigma_F^2) noise per component.

    Parameters
    ----------
    trajectory : Trajectory
    theta_true : dict
        Pair name to coefficients, one entry per model group.
    sigma_f : float
    seed : int
        Seeds the force-noise stream.
    model : AdditiveModel
        Pair-force model whose groups name the pair types.
    min_distance : float
        Lower end of the represented distance window.

    Raises
    ------
    DataGenError
        If a pair comes closer than ``min_distance``.
    """
    closest = min_pair_distance(trajectory.frames, trajectory.box)
    if closest < min_distance:
        logger.error(f"Pair distance {closest:.4f} is below the represented window starting at {min_distance:.4f}.")
        raise DataGenError(
            f"Pair distance {closest:.4f} is below the represented window starting at {min_distance:.4f}."
        )
    missing = set(model.group_names) - set(theta_true)
    if missing:
        raise DataGenError(f"No true parameters for groups {sorted(missing)}.")
    samples = trajectory.samples(seed=seed)
    design = build_design(model, samples)
    theta = np.concatenate([theta_true[name] for name in model.group_names])
    mean = design.predict(theta)
    noise = stream(seed, FORCE_NOISE).standard_normal(mean.shape) * sigma_f
    logger.info(f"Generated {mean.shape[0]} force samples with noise {sigma_f}.")
    return ForceSampleSet(
        samples=SampleSet(
            inputs=samples.inputs,
            targets=mean + noise,
            particle_types=samples.particle_types,
            box=samples.box,
            seed=seed,
            noise_scale=sigma_f,
        ),
        theta_true={name: np.asarray(theta_true[name]) for name in model.group_names},
        model=model,
        noise_scale=sigma_f,
        mean_forces=mean,
    )


def simulate_force_samples(config: LJConfig) -> Tuple[Trajectory, ForceSampleSet]:
    """Simulation, projection and noisy force generation for one config."""
    trajectory = langevin_simulate(config)
    basis = config.fit_basis()
    projections = lj_potential_splines(config, basis)
    model = lj_pair_model(config, basis)
    force_set = gen_force_samples(
        trajectory,
        {name: proj.theta for name, proj in projections.items()},
        config.force_noise,
        config.seed,
        model,
        config.window[0],
    )
    return trajectory, force_set
