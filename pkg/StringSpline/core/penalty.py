# core/penalty.py

"""
penalty.py
==========

Exact assembly of the string-energy penalty matrix Q.

For a spline with coefficients theta, the string energy per unit volume is
``theta^T Q theta`` with

    Q = (1/V) * integral of kappa x^k A(x)^T A(x) dx,

where A(x) is the n-th derivative basis row. Inside each knot interval the
integrand is a polynomial in the local offset, so Q is a sum of per-interval
blocks ``G^T F G`` (G = D_n^T M) with closed-form moment matrices F.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import block_diag

from .bspline import SplineBasis, deriv_matrix, piecewise_coeffs
from .logger import logger

RANK_TOL = 1e-10


class PenaltyError(Exception):
    """
    Custom exception for penalty configuration and assembly errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the PenaltyError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


@dataclass(frozen=True)
class PenaltyConfig:
    """
    Penalty on the n-th derivative weighted by the density ``kappa x^k``.

    Attributes
    ----------
    deriv_order : int
        Derivative order n (>= 1).
    density_exponent : int
        Exponent k of the density (>= 0); periodic bases need k = 0.
    kappa : float
        Density prefactor.
    volume : float, optional
        Normalizing volume V. Computed analytically from the density over the
        basis domain when None.
    """

    deriv_order: int = 2
    density_exponent: int = 0
    kappa: float = 1.0
    volume: Optional[float] = None

    def __post_init__(self):
        if self.deriv_order < 1:
            raise PenaltyError(f"Derivative order must be >= 1, got {self.deriv_order}.")
        if self.density_exponent < 0:
            raise PenaltyError(f"Density exponent must be >= 0, got {self.density_exponent}.")
        if self.kappa <= 0:
            raise PenaltyError(f"kappa must be positive, got {self.kappa}.")
        if self.volume is not None and self.volume <= 0:
            raise PenaltyError(f"Volume must be positive, got {self.volume}.")

    def to_dict(self) -> dict:
        return {
            "deriv_order": self.deriv_order,
            "density_exponent": self.density_exponent,
            "kappa": self.kappa,
            "volume": self.volume,
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "PenaltyConfig":
        volume = spec.get("volume")
        return cls(
            deriv_order=int(spec.get("deriv_order", 2)),
            density_exponent=int(spec.get("density_exponent", 0)),
            kappa=float(spec.get("kappa", 1.0)),
            volume=None if volume is None else float(volume),
        )


@dataclass(frozen=True)
class PenaltyMatrix:
    """
    Assembled penalty Q with the configuration and basis it was built for.

    Attributes
    ----------
    matrix : ndarray
        Dense symmetric p x p matrix.
    rank : int
        Numerical rank at eigenvalue threshold ``1e-10 * lambda_max``.
    config : PenaltyConfig
    basis : SplineBasis
    volume : float
        Normalizing volume actually used.
    """

    matrix: np.ndarray
    rank: int
    config: PenaltyConfig
    basis: SplineBasis
    volume: float
    eigenvalues: np.ndarray = field(repr=False, default=None)

    @property
    def num_params(self) -> int:
        return self.matrix.shape[0]

    @property
    def deriv_order(self) -> int:
        return self.config.deriv_order

    @property
    def null_dim(self) -> int:
        """
        Number of string modes the penalty leaves free.

        Polynomials of degree below n on an open aperiodic domain, the
        constants on a periodic one, and nothing once the splines are forced
        to vanish at a domain edge.
        """
        if self.basis.periodic:
            return 1
        if self.basis.vanishes_at_end or self.basis.clamp_left:
            return 0
        return self.config.deriv_order

    @property
    def dof(self) -> int:
        """Rank of Q in exact arithmetic, p minus the free modes."""
        return self.num_params - self.null_dim

    @property
    def posterior_dof(self) -> int:
        """p - n with n the derivative order; the lambda and alpha posteriors carry (p - n) / 2."""
        return self.num_params - self.config.deriv_order

    def energy(self, theta: np.ndarray) -> float:
        return string_energy(self, theta)

    def to_frame(self) -> pd.DataFrame:
        """Full matrix, row-major, one column per coefficient index."""
        columns = [f"q{j}" for j in range(self.num_params)]
        return pd.DataFrame(self.matrix, columns=columns)


def density_volume(basis: SplineBasis, config: PenaltyConfig) -> float:
    """V = integral of kappa x^k over the basis domain (or the configured value)."""
    if config.volume is not None:
        return config.volume
    k = config.density_exponent
    a, b = basis.origin, basis.upper
    volume = config.kappa * (b ** (k + 1) - a ** (k + 1)) / (k + 1)
    if volume <= 0:
        raise PenaltyError(
            f"Density kappa*x^{k} integrates to {volume} on [{a}, {b}]; give an explicit volume."
        )
    return volume


def interval_moment_matrix(interval: Tuple[float, float], k: int, c: float, size: int) -> np.ndarray:
    """
    Moments ``F_ij = integral over interval of d^(i+j) (d + c)^k dd``.

    Parameters
    ----------
    interval : tuple of float
        Local sub-range ``(lo, hi)`` of a knot interval, ``0 <= hi - lo <= 1``.
    k : int
        Density exponent.
    c : float
        Offset of the local coordinate, ``floor(u) - shift + x0/h``.
    size : int
        Matrix dimension r - n.

    Returns
    -------
    ndarray
        The ``size x size`` moment matrix.
    """
    lo, hi = interval
    powers = np.add.outer(np.arange(size), np.arange(size))
    moments = np.zeros((size, size))
    for m in range(k + 1):
        exponent = powers + m + 1
        moments += math.comb(k, m) * c ** (k - m) * (hi**exponent - lo**exponent) / exponent
    return moments


def _interval_pieces(basis: SplineBasis):
    """Yield (floor, local lo, local hi) for every knot interval meeting the domain."""
    if basis.periodic:
        for floor in range(basis.num_params):
            yield floor, 0.0, 1.0
        return
    u0, u1 = basis.shift, basis.shift + basis.intervals
    for floor in range(math.floor(u0), math.ceil(u1 - 1e-12)):
        lo, hi = max(u0 - floor, 0.0), min(u1 - floor, 1.0)
        if hi > lo:
            yield floor, lo, hi


def assemble_penalty(basis: SplineBasis, config: PenaltyConfig) -> PenaltyMatrix:
    """
    Assemble Q for ``basis`` from per-interval blocks.

    Blocks land on coefficient indices ``floor(u)-r+1 .. floor(u)``; periodic
    bases wrap them modulo p and aperiodic bases drop indices outside
    ``[0, p-1]``. A partial last interval is integrated over its true range.

    Parameters
    ----------
    basis : SplineBasis
        Target basis.
    config : PenaltyConfig
        Derivative order and density.

    Returns
    -------
    PenaltyMatrix

    Raises
    ------
    PenaltyError
        If n is not below the order, or a non-constant density is requested on
        a periodic basis.
    """
    r, p, h = basis.order, basis.num_params, basis.knot_spacing
    n, k = config.deriv_order, config.density_exponent
    if n >= r:
        logger.error(f"Penalty derivative order {n} is not below spline order {r}.")
        raise PenaltyError(f"Derivative order n={n} must be below the spline order r={r}.")
    if basis.periodic and k > 0:
        logger.error("Rejected non-periodic density on a periodic basis.")
        raise PenaltyError("A periodic basis needs a periodic density; density exponent must be 0.")

    volume = density_volume(basis, config)
    weights = deriv_matrix(r, n).T @ piecewise_coeffs(r)
    offsets = np.arange(r)
    q = np.zeros((p, p))
    for floor, lo, hi in _interval_pieces(basis):
        c = floor - basis.shift + basis.origin / h
        block = weights.T @ interval_moment_matrix((lo, hi), k, c, r - n) @ weights
        indices = floor - r + 1 + offsets
        if basis.periodic:
            indices = np.mod(indices, p)
            q[np.ix_(indices, indices)] += block
        else:
            keep = (indices >= 0) & (indices < p)
            q[np.ix_(indices[keep], indices[keep])] += block[np.ix_(keep, keep)]
    q *= config.kappa * h ** (1 + k - 2 * n) / volume
    q = 0.5 * (q + q.T)

    eigenvalues = np.linalg.eigvalsh(q)
    top = max(float(eigenvalues[-1]), 0.0)
    rank = int(np.sum(eigenvalues > RANK_TOL * top)) if top > 0 else 0
    logger.info(
        f"Assembled {p}x{p} penalty (r={r}, n={n}, k={k}, {'periodic' if basis.periodic else 'aperiodic'}), rank {rank}."
    )
    return PenaltyMatrix(
        matrix=q, rank=rank, config=config, basis=basis, volume=volume, eigenvalues=eigenvalues
    )


def string_energy(penalty, theta: np.ndarray) -> float:
    """
    ``theta^T Q theta`` (the roughness epsilon_Q^2), clamped at zero.

    Raises
    ------
    PenaltyError
        If the dimensions disagree.
    """
    q = penalty.matrix if isinstance(penalty, PenaltyMatrix) else np.asarray(penalty)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (q.shape[0],):
        raise PenaltyError(f"theta has shape {theta.shape}, penalty expects ({q.shape[0]},).")
    return max(float(theta @ q @ theta), 0.0)


def combined_penalty(penalties: Sequence[PenaltyMatrix], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Block-diagonal ``diag(lambda_K Q_K)`` over parameter groups."""
    if weights is None:
        weights = [1.0] * len(penalties)
    return block_diag(*[w * pen.matrix for w, pen in zip(weights, penalties)])
