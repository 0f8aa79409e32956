# core/model.py

"""
model.py
========

Additive scalar and vector-valued spline models.

A model is a set of component functions ``f_k(r) = g_k(r) (x) B_k(t_k(r)) . theta_K``:
an argument map t_k reduces a sample to one or more scalar arguments, a
direction map g_k spreads each term over the N output coordinates, and
components in the same parameter group K share coefficients. The design
matrix stacks, per sample l, the N x p block ``sum_k g_k (x) B_k``.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bspline import BSplineError, SplineBasis, basis_entries, basis_from_dict
from .logger import logger
from .penalty import PenaltyConfig, PenaltyError

RANK_TOL = 1e-10
_CHUNK_ENTRIES = 4_000_000


class ModelError(Exception):
    """
    Custom exception for model specification and design assembly errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the ModelError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


class OutOfDomainError(ModelError):
    """
    Raised when component arguments fall outside their basis domain.

    Attributes
    ----------
    message : str
        Explanation of the error.
    offending : list of tuple
        ``(sample index, component name)`` pairs, one per offending sample.
    """

    def __init__(self, message, offending):
        """
        Initialize the OutOfDomainError with a message and the offending samples.

        Parameters
        ----------
        message : str
            Explanation of the error.
        offending : list of tuple
            ``(sample index, component name)`` pairs.
        """
        super().__init__(message)
        self.offending = offending


@dataclass(frozen=True)
class SampleSet:
    """
    M observations ``(r^l, y^l)`` with provenance.

    Attributes
    ----------
    inputs : ndarray
        Tabular inputs of shape (M, d), or particle frames of shape (M, n, 3).
    targets : ndarray
        Observations, shape (M, N).
    particle_types : ndarray, optional
        Type label per particle for particle frames.
    box : float, optional
        Cubic periodic cell length for particle frames.
    seed : int, optional
        Seed the samples were generated from.
    noise_scale : float
        Standard deviation of the added noise.
    """

    inputs: np.ndarray
    targets: np.ndarray
    particle_types: Optional[np.ndarray] = None
    box: Optional[float] = None
    seed: Optional[int] = None
    noise_scale: float = 0.0

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        targets = np.asarray(self.targets, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if targets.ndim == 1:
            targets = targets[:, None]
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        if inputs.shape[0] != targets.shape[0]:
            raise ModelError(
                f"{inputs.shape[0]} input rows but {targets.shape[0]} target rows."
            )
        if inputs.ndim == 3:
            if self.particle_types is None or self.box is None:
                raise ModelError("Particle frames need particle_types and a box length.")
            types = np.asarray(self.particle_types).astype(str)
            object.__setattr__(self, "particle_types", types)
            if types.shape != (inputs.shape[1],) or inputs.shape[2] != 3:
                raise ModelError("Particle frames must be (M, n, 3) with one type per particle.")

    @property
    def num_samples(self) -> int:
        return self.targets.shape[0]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    @property
    def is_particle(self) -> bool:
        return self.inputs.ndim == 3

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices)
        return SampleSet(
            inputs=self.inputs[indices],
            targets=self.targets[indices],
            particle_types=self.particle_types,
            box=self.box,
            seed=self.seed,
            noise_scale=self.noise_scale,
        )

    def with_targets(self, targets: np.ndarray, noise_scale: Optional[float] = None) -> "SampleSet":
        return SampleSet(
            inputs=self.inputs,
            targets=targets,
            particle_types=self.particle_types,
            box=self.box,
            seed=self.seed,
            noise_scale=self.noise_scale if noise_scale is None else noise_scale,
        )


# --- argument and direction maps ------------------------------------------------


@dataclass(frozen=True)
class Terms:
    """Flattened argument terms: owning sample, scalar argument, pair geometry."""

    sample: np.ndarray
    values: np.ndarray
    pairs: Optional[np.ndarray] = None
    units: Optional[np.ndarray] = None

    def select(self, keep: np.ndarray) -> "Terms":
        return Terms(
            sample=self.sample[keep],
            values=self.values[keep],
            pairs=None if self.pairs is None else self.pairs[keep],
            units=None if self.units is None else self.units[keep],
        )


@dataclass(frozen=True)
class IdentityArgument:
    """t(r) = r[column] for tabular samples."""

    column: int = 0
    kind: str = field(default="identity", init=False)

    def terms(self, samples: SampleSet, rows: np.ndarray) -> Terms:
        if samples.is_particle:
            raise ModelError("Identity arguments need tabular samples.")
        if self.column >= samples.inputs.shape[1]:
            raise ModelError(
                f"Input column {self.column} requested but samples have {samples.inputs.shape[1]}."
            )
        return Terms(sample=rows, values=samples.inputs[rows, self.column])

    def to_dict(self) -> dict:
        return {"type": self.kind, "column": self.column}


def minimum_image(delta: np.ndarray, box: float) -> np.ndarray:
    """Nearest periodic copy of each displacement in a cubic cell."""
    return delta - box * np.round(delta / box)


def type_pairs(particle_types: np.ndarray, types: Tuple[str, str]) -> np.ndarray:
    """Index pairs (i < j) whose unordered types match ``types``."""
    i, j = np.triu_indices(len(particle_types), k=1)
    ti, tj = particle_types[i], particle_types[j]
    a, b = types
    match = ((ti == a) & (tj == b)) | ((ti == b) & (tj == a))
    return np.stack([i[match], j[match]], axis=1)


@dataclass(frozen=True)
class PairDistanceArgument:
    """t(r) = |r_i - r_j| under the minimum-image convention, one term per typed pair."""

    types: Tuple[str, str]
    kind: str = field(default="pair-distance", init=False)

    def terms(self, samples: SampleSet, rows: np.ndarray) -> Terms:
        if not samples.is_particle:
            raise ModelError("Pair-distance arguments need particle frames.")
        pairs = type_pairs(samples.particle_types, tuple(self.types))
        frames = samples.inputs[rows]
        delta = minimum_image(frames[:, pairs[:, 0]] - frames[:, pairs[:, 1]], samples.box)
        dist = np.linalg.norm(delta, axis=2)
        units = delta / np.where(dist > 0, dist, 1.0)[..., None]
        count = pairs.shape[0]
        return Terms(
            sample=np.repeat(rows, count),
            values=dist.ravel(),
            pairs=np.tile(pairs, (len(rows), 1)),
            units=units.reshape(-1, 3),
        )

    def to_dict(self) -> dict:
        return {"type": self.kind, "types": list(self.types)}


@dataclass(frozen=True)
class ScalarDirection:
    """g(r) = [1]: each term adds to output coordinate 0."""

    kind: str = field(default="scalar", init=False)

    def scatter(self, terms: Terms, output_dim: int) -> Tuple[np.ndarray, np.ndarray]:
        count = terms.values.shape[0]
        return np.zeros((count, 1), dtype=int), np.ones((count, 1))

    def to_dict(self) -> dict:
        return {"type": self.kind}


@dataclass(frozen=True)
class PairForceDirection:
    """g = -dt/dr: ``-u_ij`` on particle i and ``+u_ij`` on particle j."""

    kind: str = field(default="pair-force", init=False)

    def scatter(self, terms: Terms, output_dim: int) -> Tuple[np.ndarray, np.ndarray]:
        if terms.pairs is None:
            raise ModelError("Pair-force directions need a pair-distance argument.")
        xyz = np.arange(3)
        coords = np.concatenate(
            [3 * terms.pairs[:, :1] + xyz, 3 * terms.pairs[:, 1:] + xyz], axis=1
        )
        weights = np.concatenate([-terms.units, terms.units], axis=1)
        if coords.size and coords.max() >= output_dim:
            raise ModelError(f"Pair-force direction needs N >= {coords.max() + 1}, got {output_dim}.")
        return coords, weights

    def to_dict(self) -> dict:
        return {"type": self.kind}


ArgumentMap = Union[IdentityArgument, PairDistanceArgument]
DirectionMap = Union[ScalarDirection, PairForceDirection]


# --- model ----------------------------------------------------------------------


@dataclass(frozen=True)
class ParameterGroup:
    """Coefficients theta_K shared by every component in group K."""

    name: str
    basis: SplineBasis
    penalty: PenaltyConfig = PenaltyConfig()


@dataclass(frozen=True)
class ComponentFunction:
    """
    One additive term ``g_k(r) (x) B_k(t_k(r)) . theta_K``.

    Attributes
    ----------
    name : str
    group : str
        Name of the parameter group supplying theta_K and the basis.
    argument : ArgumentMap
    direction : DirectionMap
    basis_deriv : int
        Derivative order of the basis rows used (0 fits the function itself;
        1 fits a potential from its derivative observations).
    """

    name: str
    group: str
    argument: ArgumentMap
    direction: DirectionMap
    basis_deriv: int = 0


@dataclass(frozen=True)
class AdditiveModel:
    """
    Parameter groups, the components that use them, and the noise layout.

    Attributes
    ----------
    groups : tuple of ParameterGroup
        Ordered; coefficients are concatenated in this order.
    components : tuple of ComponentFunction
    output_dim : int, optional
        N; taken from the samples when None.
    variance_groups : str
        ``"single"`` (one precision z) or ``"by-type"`` (one z per particle type).
    """

    groups: Tuple[ParameterGroup, ...]
    components: Tuple[ComponentFunction, ...]
    output_dim: Optional[int] = None
    variance_groups: str = "single"

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "components", tuple(self.components))
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ModelError(f"Duplicate parameter group names in {names}.")
        used = {c.group for c in self.components}
        unknown = used - set(names)
        if unknown:
            raise ModelError(f"Components refer to unknown groups {sorted(unknown)}.")
        unused = set(names) - used
        if unused:
            raise ModelError(f"Parameter groups {sorted(unused)} have no components.")
        if self.variance_groups not in ("single", "by-type"):
            raise ModelError(f"Unknown variance grouping {self.variance_groups!r}.")

    @property
    def group_names(self) -> Tuple[str, ...]:
        return tuple(g.name for g in self.groups)

    @property
    def group_slices(self) -> Tuple[slice, ...]:
        slices, start = [], 0
        for group in self.groups:
            slices.append(slice(start, start + group.basis.num_params))
            start += group.basis.num_params
        return tuple(slices)

    @property
    def num_params(self) -> int:
        return sum(g.basis.num_params for g in self.groups)

    def group(self, name: str) -> ParameterGroup:
        for group in self.groups:
            if group.name == name:
                return group
        raise ModelError(f"No parameter group named {name!r}.")

    def group_index(self, name: str) -> int:
        return self.group_names.index(name)

    def variance_layout(self, samples: SampleSet) -> List[Tuple[str, np.ndarray]]:
        """(label, output coordinates) for each noise-precision group."""
        n_out = samples.output_dim
        if self.variance_groups == "single":
            return [("all", np.arange(n_out))]
        if not samples.is_particle:
            raise ModelError("Per-type variance groups need particle frames.")
        layout = []
        for label in sorted(set(samples.particle_types.tolist())):
            particles = np.flatnonzero(samples.particle_types == label)
            layout.append((label, (3 * particles[:, None] + np.arange(3)).ravel()))
        return layout

    def to_dict(self) -> dict:
        return {
            "output_dim": self.output_dim,
            "variance_groups": self.variance_groups,
            "groups": [
                {"name": g.name, "basis": g.basis.to_dict(), "penalty": g.penalty.to_dict()}
                for g in self.groups
            ],
            "components": [
                {
                    "name": c.name,
                    "group": c.group,
                    "argument": c.argument.to_dict(),
                    "direction": c.direction.to_dict(),
                    "basis_deriv": c.basis_deriv,
                }
                for c in self.components
            ],
        }


def scalar_model(basis: SplineBasis, penalty: PenaltyConfig = PenaltyConfig(), name: str = "f") -> AdditiveModel:
    """The classic one-function model y = B(r) . theta."""
    return AdditiveModel(
        groups=(ParameterGroup(name=name, basis=basis, penalty=penalty),),
        components=(ComponentFunction(name, name, IdentityArgument(0), ScalarDirection()),),
        output_dim=1,
    )


# --- JSON model specs -------------------------------------------------------------


def _argument_from_dict(spec: dict) -> ArgumentMap:
    kind = spec.get("type", "identity")
    if kind == "identity":
        return IdentityArgument(column=int(spec.get("column", 0)))
    if kind == "pair-distance":
        types = spec.get("types")
        if not types or len(types) != 2:
            raise ModelError("A pair-distance argument needs two particle types.")
        return PairDistanceArgument(types=(str(types[0]), str(types[1])))
    raise ModelError(f"Unknown argument type {kind!r}.")


def _direction_from_dict(spec: dict) -> DirectionMap:
    kind = spec.get("type", "scalar")
    if kind == "scalar":
        return ScalarDirection()
    if kind == "pair-force":
        return PairForceDirection()
    raise ModelError(f"Unknown direction type {kind!r}.")


def model_from_dict(spec: dict) -> AdditiveModel:
    """
    Build an AdditiveModel from its JSON description.

    Raises
    ------
    ModelError
        If a field is missing or a basis or penalty description is invalid.
    """
    try:
        groups = tuple(
            ParameterGroup(
                name=str(g["name"]),
                basis=basis_from_dict(g["basis"]),
                penalty=PenaltyConfig.from_dict(g.get("penalty", {})),
            )
            for g in spec["groups"]
        )
        components = tuple(
            ComponentFunction(
                name=str(c.get("name", c["group"])),
                group=str(c["group"]),
                argument=_argument_from_dict(c.get("argument", {})),
                direction=_direction_from_dict(c.get("direction", {})),
                basis_deriv=int(c.get("basis_deriv", 0)),
            )
            for c in spec["components"]
        )
    except KeyError as e:
        raise ModelError(f"Model description is missing field {e}.") from e
    except (BSplineError, PenaltyError) as e:
        raise ModelError(f"Invalid model description: {e.message}") from e
    output_dim = spec.get("output_dim")
    return AdditiveModel(
        groups=groups,
        components=components,
        output_dim=None if output_dim is None else int(output_dim),
        variance_groups=spec.get("variance_groups", "single"),
    )


def load_model(path: str) -> AdditiveModel:
    """Read a model description from a JSON file (or the ``model`` key of a run config)."""
    try:
        with open(path, "r") as file:
            spec = json.load(file)
    except (OSError, json.JSONDecodeError) as e:
        logger.error(f"Failed to read model config {path}: {e}")
        raise ModelError(f"Failed to read model config {path}.") from e
    return model_from_dict(spec.get("model", spec))


# --- design ---------------------------------------------------------------------


@dataclass(frozen=True)
class DesignMatrix:
    """
    Stacked design blocks D_l (N x p) for the kept samples.

    Attributes
    ----------
    blocks : ndarray
        Shape (M, N, p).
    group_slices : tuple of slice
        Coefficient range of each parameter group.
    group_names : tuple of str
    kept : ndarray of int
        Indices of the samples the blocks belong to.
    """

    blocks: np.ndarray
    group_slices: Tuple[slice, ...]
    group_names: Tuple[str, ...]
    kept: np.ndarray

    @property
    def num_samples(self) -> int:
        return self.blocks.shape[0]

    @property
    def output_dim(self) -> int:
        return self.blocks.shape[1]

    @property
    def num_params(self) -> int:
        return self.blocks.shape[2]

    @property
    def stacked(self) -> np.ndarray:
        return self.blocks.reshape(-1, self.num_params)

    def predict(self, theta: np.ndarray) -> np.ndarray:
        return self.blocks @ theta


def build_design(
    model: AdditiveModel, samples: SampleSet, on_out_of_range: str = "raise"
) -> DesignMatrix:
    """
    Assemble ``D_{l,K} = sum_{k in K} g_k(r^l) (x) B_k(t_k(r^l))``.

    Terms beyond the right end of a basis whose spline vanishes there add
    nothing and are skipped; any other argument outside the basis domain is
    out of range.

    Parameters
    ----------
    model : AdditiveModel
    samples : SampleSet
    on_out_of_range : {"raise", "drop"}
        Raise OutOfDomainError, or drop the affected samples.

    Returns
    -------
    DesignMatrix

    Raises
    ------
    OutOfDomainError
        Out-of-range arguments in ``"raise"`` mode, listing (l, component).
    ModelError
        Incompatible model and samples.
    """
    if on_out_of_range not in ("raise", "drop"):
        raise ModelError(f"on_out_of_range must be 'raise' or 'drop', got {on_out_of_range!r}.")
    n_out = samples.output_dim
    if model.output_dim is not None and model.output_dim != n_out:
        raise ModelError(f"Model expects N={model.output_dim} outputs, samples have {n_out}.")
    m_all, p_total = samples.num_samples, model.num_params
    slices = dict(zip(model.group_names, model.group_slices))
    blocks = np.zeros((m_all, n_out, p_total))
    bad = np.zeros(m_all, dtype=bool)
    offending = []

    chunk = max(1, _CHUNK_ENTRIES // max(1, n_out * p_total))
    for start in range(0, m_all, chunk):
        rows = np.arange(start, min(start + chunk, m_all))
        flat_index, flat_value = [], []
        for comp in model.components:
            basis = model.group(comp.group).basis
            terms = comp.argument.terms(samples, rows)
            inside = basis.contains(terms.values)
            beyond = ~inside & basis.vanishes_at_end & (terms.values > basis.upper)
            outside = ~inside & ~beyond
            if np.any(outside):
                for l in np.unique(terms.sample[outside]):
                    offending.append((int(l), comp.name))
                bad[terms.sample[outside]] = True
            terms = terms.select(inside)
            if terms.values.size == 0:
                continue
            indices, weights = basis_entries(basis, terms.values, comp.basis_deriv)
            coords, gains = comp.direction.scatter(terms, n_out)
            local = terms.sample - start
            position = (
                (local[:, None, None] * n_out + coords[:, :, None]) * p_total
                + slices[comp.group].start
                + indices[:, None, :]
            )
            flat_index.append(position.ravel())
            flat_value.append((gains[:, :, None] * weights[:, None, :]).ravel())
        if flat_index:
            size = rows.size * n_out * p_total
            chunk_blocks = np.bincount(
                np.concatenate(flat_index), weights=np.concatenate(flat_value), minlength=size
            )
            blocks[rows] = chunk_blocks.reshape(rows.size, n_out, p_total)

    if offending:
        if on_out_of_range == "raise":
            logger.error(f"{len(offending)} out-of-domain (sample, component) argument(s).")
            raise OutOfDomainError(
                f"Arguments outside the basis domain for (sample, component) {offending[:10]}"
                + (" ..." if len(offending) > 10 else ""),
                offending,
            )
        logger.warning(f"Dropping {int(bad.sum())} sample(s) with out-of-domain arguments.")
    kept = np.flatnonzero(~bad)
    logger.debug(f"Built design with {kept.size} samples, N={n_out}, p={p_total}.")
    return DesignMatrix(
        blocks=blocks[kept],
        group_slices=model.group_slices,
        group_names=model.group_names,
        kept=kept,
    )


# --- identifiability -----------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSet:
    """
    Centering constraints on parameter groups.

    Attributes
    ----------
    constrained : tuple of int
        Indices of groups whose coefficient mean is pinned to zero.
    group_slices : tuple of slice
    group_names : tuple of str
    rank : int
        Numerical rank of R.
    num_samples : int
        Samples R was built from; small counts can understate dependencies.
    singular_values : ndarray
    null_space : ndarray
        Shape (N_F, count); each column v gives a degenerate direction
        ``sum_K v_K 1_K`` in coefficient space.
    """

    constrained: Tuple[int, ...]
    group_slices: Tuple[slice, ...]
    group_names: Tuple[str, ...]
    rank: int
    num_samples: int
    singular_values: np.ndarray
    null_space: np.ndarray

    @property
    def count(self) -> int:
        return len(self.constrained)

    @property
    def num_groups(self) -> int:
        return len(self.group_slices)

    @classmethod
    def none(cls, model: AdditiveModel, num_samples: int = 0) -> "ConstraintSet":
        n_groups = len(model.groups)
        return cls(
            constrained=(),
            group_slices=model.group_slices,
            group_names=model.group_names,
            rank=n_groups,
            num_samples=num_samples,
            singular_values=np.zeros(0),
            null_space=np.zeros((n_groups, 0)),
        )

    def directions(self) -> np.ndarray:
        """Degenerate directions in coefficient space, shape (count, p)."""
        p = self.group_slices[-1].stop
        out = np.zeros((self.null_space.shape[1], p))
        for k, sl in enumerate(self.group_slices):
            out[:, sl] = self.null_space[k][:, None]
        return out

    def projector(self) -> Optional[np.ndarray]:
        """Orthogonal projector onto coefficient vectors meeting the constraints."""
        if not self.constrained:
            return None
        p = self.group_slices[-1].stop
        proj = np.eye(p)
        for k in self.constrained:
            sl = self.group_slices[k]
            size = sl.stop - sl.start
            proj[sl, sl] -= 1.0 / size
        return proj

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "rank": self.rank,
            "num_samples": self.num_samples,
            "constrained_groups": [self.group_names[k] for k in self.constrained],
            "singular_values": [float(s) for s in self.singular_values],
        }


def _rank(matrix: np.ndarray) -> int:
    if matrix.size == 0:
        return 0
    s = np.linalg.svd(matrix, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > RANK_TOL * s[0]))


def detect_constraints(
    model: AdditiveModel, samples: SampleSet, design: Optional[DesignMatrix] = None
) -> ConstraintSet:
    """
    Count persistent dependencies among the group directions and pick groups to center.

    ``R`` has one row per stacked sample coordinate and one column per group,
    ``R[(l, i), K] = (D_{l,K} . 1)_i``. Groups are visited in order of
    decreasing contributing-sample count; a group stays free when it raises
    the rank of the free set and is constrained otherwise.

    Parameters
    ----------
    model : AdditiveModel
    samples : SampleSet
    design : DesignMatrix, optional
        Reused when already built for the same model and samples.

    Returns
    -------
    ConstraintSet
    """
    if design is None:
        design = build_design(model, samples)
    stacked = design.stacked
    n_groups = len(design.group_slices)
    if stacked.shape[0] < n_groups:
        raise ModelError(f"Need M*N >= {n_groups} stacked rows to detect constraints, got {stacked.shape[0]}.")
    r_matrix = np.stack([stacked[:, sl].sum(axis=1) for sl in design.group_slices], axis=1)
    _, singular, vt = np.linalg.svd(r_matrix, full_matrices=False)
    rank = _rank(r_matrix)

    contributing = [
        int(np.count_nonzero(np.any(design.blocks[:, :, sl] != 0.0, axis=(1, 2))))
        for sl in design.group_slices
    ]
    order = sorted(range(n_groups), key=lambda k: (-contributing[k], k))
    free: List[int] = []
    for k in order:
        if _rank(r_matrix[:, free + [k]]) > len(free):
            free.append(k)
    constrained = tuple(sorted(set(range(n_groups)) - set(free)))
    if constrained:
        logger.info(
            f"Detected {len(constrained)} identifiability constraint(s) on groups "
            f"{[design.group_names[k] for k in constrained]} from {design.num_samples} samples."
        )
    return ConstraintSet(
        constrained=constrained,
        group_slices=design.group_slices,
        group_names=design.group_names,
        rank=rank,
        num_samples=design.num_samples,
        singular_values=singular,
        null_space=vt[rank:].T,
    )


def apply_constraints(theta: np.ndarray, constraints: ConstraintSet) -> np.ndarray:
    """Subtract the group mean from every constrained group (a projection)."""
    centered = np.array(theta, dtype=float, copy=True)
    for k in constraints.constrained:
        sl = constraints.group_slices[k]
        centered[sl] -= centered[sl].mean()
    return centered
