# core/bspline.py

"""
bspline.py
==========

Uniform B-spline bases in piecewise-polynomial form.

A basis of order r maps the argument x to the knot coordinate
``u = (x - origin) / knot_spacing + shift``; basis function i is supported on
``(i, i + r)``. Inside knot interval ``[floor(u), floor(u) + 1)`` the r active
functions are polynomials in the local offset ``d = u - floor(u)`` whose
coefficients are the columns of the piecewise coefficient matrix M, so that a
row of weights is ``d_r . M`` and its n-th derivative ``d_{r-n} . D_n^T . M``.
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np

from .logger import logger

_DOMAIN_TOL = 1e-12


class BSplineError(Exception):
    """
    Custom exception for B-spline basis errors.

    Raised for invalid basis parameters and for arguments outside an aperiodic
    basis domain.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the BSplineError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


@dataclass(frozen=True)
class SplineBasis:
    """
    An order-r uniform B-spline family with p coefficients.

    Parameters
    ----------
    order : int
        Spline order r (degree r - 1).
    num_params : int
        Number of coefficients p.
    knot_spacing : float
        Knot spacing h in units of the argument.
    origin : float
        Left end x0 of the domain.
    length : float
        Domain length L.
    periodic : bool, optional
        Wrap the domain and index arithmetic modulo p. Defaults to False.
    clamp_left : bool, optional
        Aperiodic only: use shift 0 so the spline vanishes at x0. Defaults to
        False (free left edge).

    Attributes
    ----------
    shift : float
        Knot-coordinate offset: r/2 for periodic, 0 for clamped, r-1 otherwise.
    intervals : float
        Number of knot intervals spanned, L/h.
    upper : float
        Right end x0 + L of the domain.

    Raises
    ------
    BSplineError
        If the parameters do not describe a valid basis.
    """

    order: int
    num_params: int
    knot_spacing: float
    origin: float
    length: float
    periodic: bool = False
    clamp_left: bool = False

    def __post_init__(self):
        r, p = self.order, self.num_params
        if r < 1:
            raise BSplineError(f"Spline order must be >= 1, got {r}.")
        if self.knot_spacing <= 0 or self.length <= 0:
            raise BSplineError(
                f"Knot spacing and length must be positive, got h={self.knot_spacing}, L={self.length}."
            )
        if p < r:
            raise BSplineError(f"Basis needs at least r={r} coefficients, got p={p}.")
        if self.periodic:
            if self.clamp_left:
                raise BSplineError("A periodic basis has no left edge to clamp.")
            if abs(self.intervals - p) > 1e-9 * max(1.0, p):
                raise BSplineError(
                    f"Periodic basis requires L/h = p, got L/h={self.intervals} and p={p}."
                )
        elif self.intervals + self.shift > p + r - 1 + 1e-9:
            raise BSplineError(
                f"Domain reaches u={self.intervals + self.shift}, beyond the knot support "
                f"(0, {p + r - 1}) of {p} order-{r} functions."
            )

    @classmethod
    def periodic_on(cls, lo: float, hi: float, num_params: int, order: int) -> "SplineBasis":
        return periodic_basis(lo, hi, num_params, order)

    @classmethod
    def aperiodic_on(cls, lo: float, hi: float, order: int, **kwargs) -> "SplineBasis":
        """See ``aperiodic_basis`` for the keyword arguments."""
        return aperiodic_basis(lo, hi, order, **kwargs)

    @property
    def shift(self) -> float:
        if self.periodic:
            return self.order / 2.0
        if self.clamp_left:
            return 0.0
        return float(self.order - 1)

    @property
    def intervals(self) -> float:
        return self.length / self.knot_spacing

    @property
    def upper(self) -> float:
        return self.origin + self.length

    @property
    def vanishes_at_end(self) -> bool:
        """True when the spline and all its derivatives are forced to zero at x0+L."""
        if self.periodic:
            return False
        end = self.intervals + self.shift
        return abs(end - (self.num_params + self.order - 1)) < 1e-9

    def to_u(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.origin) / self.knot_spacing + self.shift

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.periodic:
            return np.isfinite(x)
        tol = _DOMAIN_TOL * max(1.0, abs(self.origin), abs(self.upper))
        return (x >= self.origin - tol) & (x <= self.upper + tol)

    def breakpoints(self) -> np.ndarray:
        """Knot positions inside the domain, together with both domain ends."""
        u_lo, u_hi = self.shift, self.shift + self.intervals
        knots = np.arange(math.floor(u_lo), math.ceil(u_hi) + 1, dtype=float)
        knots = knots[(knots > u_lo) & (knots < u_hi)]
        inner = self.origin + self.knot_spacing * (knots - self.shift)
        return np.concatenate(([self.origin], inner, [self.upper]))

    def to_dict(self) -> dict:
        return {
            "kind": "periodic" if self.periodic else "aperiodic",
            "order": self.order,
            "num_params": self.num_params,
            "knot_spacing": self.knot_spacing,
            "origin": self.origin,
            "length": self.length,
            "clamp_left": self.clamp_left,
        }


@dataclass(frozen=True)
class BasisRow:
    """Dense length-p row whose dot product with theta gives B^(n)(x; theta)."""

    values: np.ndarray
    deriv: int

    def __matmul__(self, theta):
        return self.values @ theta


def periodic_basis(lo: float, hi: float, num_params: int, order: int) -> SplineBasis:
    """Periodic basis with ``num_params`` intervals on ``[lo, hi)``."""
    if hi <= lo:
        raise BSplineError(f"Empty periodic domain [{lo}, {hi}).")
    return SplineBasis(
        order=order,
        num_params=num_params,
        knot_spacing=(hi - lo) / num_params,
        origin=lo,
        length=hi - lo,
        periodic=True,
    )


def aperiodic_basis(
    lo: float,
    hi: float,
    order: int,
    intervals: Optional[int] = None,
    knot_spacing: Optional[float] = None,
    vanishing_end: bool = False,
    clamp_left: bool = False,
) -> SplineBasis:
    """
    Aperiodic basis on ``[lo, hi]`` from an interval count or a knot spacing.

    With ``vanishing_end`` the coefficient count is chosen so that the mapped
    domain ends exactly at the edge of the knot support, forcing the spline
    and all its derivatives to zero at ``hi``. Otherwise every point of the
    domain keeps a full set of r active functions on its right side.

    Parameters
    ----------
    lo, hi : float
        Domain ends.
    order : int
        Spline order r.
    intervals : int, optional
        Number of knot intervals; ``h = (hi - lo) / intervals``.
    knot_spacing : float, optional
        Explicit spacing h, used when ``intervals`` is None. L/h may then be
        non-integer, leaving a partial last interval.
    vanishing_end : bool, optional
        Force the spline to vanish at ``hi``.
    clamp_left : bool, optional
        Force the spline to vanish at ``lo``.

    Returns
    -------
    SplineBasis

    Raises
    ------
    BSplineError
        If neither or both of ``intervals`` and ``knot_spacing`` are given, or
        the vanishing end does not fall on a knot.
    """
    if hi <= lo:
        raise BSplineError(f"Empty aperiodic domain [{lo}, {hi}].")
    if (intervals is None) == (knot_spacing is None):
        raise BSplineError("Give exactly one of 'intervals' or 'knot_spacing'.")
    length = hi - lo
    h = length / intervals if intervals is not None else float(knot_spacing)
    shift = 0 if clamp_left else order - 1
    end = length / h + shift
    end_knot = round(end)
    if vanishing_end:
        if abs(end - end_knot) > 1e-9 * max(1.0, end):
            raise BSplineError(
                f"A vanishing end needs hi on a knot, but the domain ends at u={end}."
            )
        num_params = end_knot - order + 1
    else:
        num_params = end_knot if abs(end - end_knot) <= 1e-9 * max(1.0, end) else math.ceil(end)
    return SplineBasis(
        order=order,
        num_params=num_params,
        knot_spacing=h,
        origin=lo,
        length=length,
        periodic=False,
        clamp_left=clamp_left,
    )


def basis_from_dict(spec: dict) -> SplineBasis:
    """Build a basis from its JSON description (see ``SplineBasis.to_dict``)."""
    try:
        kind = spec.get("kind", "aperiodic")
        if "num_params" in spec and "knot_spacing" in spec:
            return SplineBasis(
                order=int(spec["order"]),
                num_params=int(spec["num_params"]),
                knot_spacing=float(spec["knot_spacing"]),
                origin=float(spec["origin"]),
                length=float(spec["length"]),
                periodic=kind == "periodic",
                clamp_left=bool(spec.get("clamp_left", False)),
            )
        if kind == "periodic":
            return periodic_basis(
                float(spec["lo"]), float(spec["hi"]), int(spec["num_params"]), int(spec["order"])
            )
        if kind == "aperiodic":
            return aperiodic_basis(
                float(spec["lo"]),
                float(spec["hi"]),
                int(spec["order"]),
                intervals=int(spec["intervals"]) if "intervals" in spec else None,
                knot_spacing=float(spec["knot_spacing"]) if "knot_spacing" in spec else None,
                vanishing_end=bool(spec.get("vanishing_end", False)),
                clamp_left=bool(spec.get("clamp_left", False)),
            )
    except KeyError as e:
        raise BSplineError(f"Basis description is missing field {e}.") from e
    raise BSplineError(f"Unknown basis kind {kind!r}; expected 'periodic' or 'aperiodic'.")


# --- piecewise polynomial machinery -------------------------------------------


def binomial_matrix(a, i, r: int, exact: bool = False) -> np.ndarray:
    """
    Lower-triangular binomial matrix with ``[B(a,i)]_{jk} = C(j,k) i^(j-k) a^k``.

    Re-expanding a polynomial with coefficient vector c about ``i`` with
    argument scaled by ``a`` gives ``P(i + a d; c) = d_r . B(a, i)^T c``.
    Uses 0**0 = 1. With ``exact`` the entries are Fractions in an object array.
    """
    if exact:
        a, i = Fraction(a), Fraction(i)
    rows = [
        [math.comb(j, k) * i ** (j - k) * a**k if k <= j else 0 * a for k in range(r)]
        for j in range(r)
    ]
    if exact:
        return np.array(rows, dtype=object)
    return np.array(rows, dtype=float)


@lru_cache(maxsize=None)
def cardinal_coeffs(r: int) -> Tuple[Tuple[Fraction, ...], ...]:
    """
    Exact per-interval power coefficients of the cardinal B-spline M_r(u).

    Entry ``[j][m]`` is the coefficient of u^m on ``[j, j+1)``.
    """
    norm = Fraction(1, math.factorial(r - 1))
    table = []
    for j in range(r):
        row = []
        for m in range(r):
            total = sum(
                (-1) ** k * math.comb(r, k) * math.comb(r - 1, m) * (-k) ** (r - 1 - m)
                for k in range(j + 1)
            )
            row.append(norm * total)
        table.append(tuple(row))
    return tuple(table)


def _expand(a: int, i: int, coeffs: Tuple[Fraction, ...]) -> Tuple[Fraction, ...]:
    matrix = binomial_matrix(a, i, len(coeffs), exact=True)
    return tuple(sum(matrix[m, k] * coeffs[m] for m in range(len(coeffs))) for k in range(len(coeffs)))


@lru_cache(maxsize=None)
def _columns_direct(r: int) -> Tuple[Tuple[Fraction, ...], ...]:
    cards = cardinal_coeffs(r)
    return tuple(_expand(-1, j + 1, cards[j]) for j in range(r))


@lru_cache(maxsize=None)
def _columns_mirrored(r: int) -> Tuple[Tuple[Fraction, ...], ...]:
    cards = cardinal_coeffs(r)
    return tuple(_expand(1, r - 1 - j, cards[r - 1 - j]) for j in range(r))


@lru_cache(maxsize=None)
def _piecewise_table(r: int, use_symmetry: bool) -> np.ndarray:
    direct = _columns_direct(r)
    half = math.ceil(r / 2)
    columns = [
        _columns_mirrored(r)[j] if use_symmetry and j >= half else direct[j] for j in range(r)
    ]
    table = np.array([[float(columns[j][m]) for j in range(r)] for m in range(r)])
    table.setflags(write=False)
    return table


def piecewise_coeffs(r: int, use_symmetry: bool = True, exact: bool = False):
    """
    Piecewise coefficient matrix M (r x r) of the order-r cardinal B-spline.

    Column j holds the local power coefficients, in ``d``, of the weight
    multiplying ``theta_{floor(u)-r+1+j}``; columns at and beyond ``ceil(r/2)``
    use the mirror identity when ``use_symmetry`` is set. The table is cached
    and read-only. With ``exact`` the columns are returned as Fractions.
    """
    if r < 1:
        raise BSplineError(f"Spline order must be >= 1, got {r}.")
    if exact:
        columns = _columns_direct(r) if not use_symmetry else tuple(
            _columns_mirrored(r)[j] if j >= math.ceil(r / 2) else _columns_direct(r)[j]
            for j in range(r)
        )
        return tuple(tuple(columns[j][m] for j in range(r)) for m in range(r))
    return _piecewise_table(r, use_symmetry)


@lru_cache(maxsize=None)
def _deriv_table(r: int, n: int) -> np.ndarray:
    table = np.zeros((r, r - n))
    for j in range(r - n):
        table[j + n, j] = math.factorial(j + n) / math.factorial(j)
    table.setflags(write=False)
    return table


def deriv_matrix(r: int, n: int) -> np.ndarray:
    """Differentiation matrix D_n (r x (r-n)), ``[D_n]_{ij} = i!/(i-n)!`` on ``i - j = n``."""
    if n < 0 or n >= r:
        raise BSplineError(f"Derivative order n={n} annihilates an order-{r} basis (need 0 <= n < r).")
    return _deriv_table(r, n)


@lru_cache(maxsize=None)
def _row_weights(r: int, n: int) -> np.ndarray:
    weights = deriv_matrix(r, n).T @ piecewise_coeffs(r)
    weights.setflags(write=False)
    return weights


# --- evaluation ------------------------------------------------------------------


def basis_entries(basis: SplineBasis, x, deriv: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sparse basis rows: coefficient indices and weights for each argument.

    Parameters
    ----------
    basis : SplineBasis
        The basis to evaluate.
    x : array_like
        Arguments, shape (m,).
    deriv : int, optional
        Derivative order n with respect to x.

    Returns
    -------
    indices : ndarray of int, shape (m, r)
        Coefficient index per active function. Out-of-range aperiodic
        functions get index 0 and weight 0.
    weights : ndarray of float, shape (m, r)

    Raises
    ------
    BSplineError
        If an aperiodic argument falls outside ``[x0, x0+L]`` or ``deriv`` is
        not below the order.
    """
    r, p = basis.order, basis.num_params
    if deriv < 0 or deriv >= r:
        raise BSplineError(f"Derivative order n={deriv} annihilates an order-{r} basis.")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x)):
        raise BSplineError("Spline arguments must be finite.")
    u = basis.to_u(x)
    if basis.periodic:
        u = np.mod(u - basis.shift, p) + basis.shift
        floor = np.floor(u)
    else:
        inside = basis.contains(x)
        if not np.all(inside):
            bad = x[~inside]
            logger.error(f"{bad.size} argument(s) outside [{basis.origin}, {basis.upper}].")
            raise BSplineError(
                f"Argument(s) {bad[:5].tolist()} outside aperiodic domain [{basis.origin}, {basis.upper}]."
            )
        u_lo, u_hi = basis.shift, basis.shift + basis.intervals
        u = np.clip(u, u_lo, u_hi)
        floor = np.floor(u)
        # Half-open intervals: the right end takes the left limit.
        floor = np.where(floor >= u_hi, floor - 1, floor)
    local = u - floor
    powers = local[:, None] ** np.arange(r - deriv)
    weights = powers @ _row_weights(r, deriv)
    if deriv:
        weights = weights * basis.knot_spacing ** (-deriv)
    indices = floor.astype(int)[:, None] - r + 1 + np.arange(r)
    if basis.periodic:
        indices = np.mod(indices, p)
    else:
        valid = (indices >= 0) & (indices < p)
        weights = np.where(valid, weights, 0.0)
        indices = np.where(valid, indices, 0)
    return indices, weights


def basis_matrix(basis: SplineBasis, x, deriv: int = 0) -> np.ndarray:
    """Dense (m x p) matrix of basis rows at the arguments ``x``."""
    indices, weights = basis_entries(basis, x, deriv)
    rows = np.zeros((indices.shape[0], basis.num_params))
    np.add.at(rows, (np.arange(indices.shape[0])[:, None], indices), weights)
    return rows


def basis_row(basis: SplineBasis, x: float, deriv: int = 0) -> BasisRow:
    """
    Row vector such that ``row @ theta`` is the n-th derivative of the spline at x.

    Raises
    ------
    BSplineError
        Out-of-domain x for an aperiodic basis.
    """
    return BasisRow(values=basis_matrix(basis, [x], deriv)[0], deriv=deriv)


def linear_coefficients(basis: SplineBasis) -> np.ndarray:
    """Greville coefficients reproducing f(x) = x on an aperiodic basis (r >= 2)."""
    if basis.periodic:
        raise BSplineError("f(x) = x is not periodic.")
    i = np.arange(basis.num_params)
    return basis.knot_spacing * (i + basis.order / 2.0 - basis.shift) + basis.origin


# --- projection and refinement -------------------------------------------------


@dataclass(frozen=True)
class Projection:
    """
    Least-squares projection of a function onto a basis.

    Attributes
    ----------
    theta : ndarray
        Coefficients; functions without support in the window are zero.
    residual : float
        Max absolute error on the projection grid.
    condition : float
        2-norm condition number of the active design.
    active : ndarray of bool
        Coefficients determined by the window.
    """

    theta: np.ndarray
    residual: float
    condition: float
    active: np.ndarray


def project(
    basis: SplineBasis,
    fn: Callable[[np.ndarray], np.ndarray],
    window: Optional[Tuple[float, float]] = None,
    points_per_interval: int = 12,
    max_condition: float = 1e12,
) -> Projection:
    """
    Least-squares projection of ``fn`` onto ``basis`` over ``window``.

    Raises
    ------
    BSplineError
        If the window leaves the domain or the projection is ill-conditioned.
    """
    lo, hi = window if window is not None else (basis.origin, basis.upper)
    if not (np.all(basis.contains([lo, hi])) and hi > lo):
        raise BSplineError(f"Projection window ({lo}, {hi}) is not inside the basis domain.")
    count = points_per_interval * max(1, math.ceil((hi - lo) / basis.knot_spacing)) + 1
    grid = np.linspace(lo, hi, count)
    design = basis_matrix(basis, grid)
    values = np.asarray(fn(grid), dtype=float)
    active = np.any(design != 0.0, axis=0)
    condition = float(np.linalg.cond(design[:, active]))
    if not np.isfinite(condition) or condition > max_condition:
        logger.error(f"Projection design condition number {condition:.3e} exceeds {max_condition:.1e}.")
        raise BSplineError(
            f"Ill-conditioned projection: condition estimate {condition:.3e} > {max_condition:.1e}."
        )
    theta = np.zeros(basis.num_params)
    theta[active] = np.linalg.lstsq(design[:, active], values, rcond=None)[0]
    residual = float(np.max(np.abs(design @ theta - values)))
    logger.debug(f"Projected onto {int(active.sum())} active functions, residual {residual:.3e}.")
    return Projection(theta=theta, residual=residual, condition=condition, active=active)


def refine(basis: SplineBasis) -> SplineBasis:
    """The basis on the same domain with half the knot spacing."""
    if basis.periodic:
        return periodic_basis(basis.origin, basis.upper, 2 * basis.num_params, basis.order)
    return aperiodic_basis(
        basis.origin,
        basis.upper,
        basis.order,
        knot_spacing=basis.knot_spacing / 2.0,
        vanishing_end=basis.vanishes_at_end,
        clamp_left=basis.clamp_left,
    )


def prolongate(basis: SplineBasis, theta: np.ndarray) -> Tuple[SplineBasis, np.ndarray]:
    """Represent the spline ``theta`` exactly on the refined basis."""
    fine = refine(basis)
    projection = project(fine, lambda x: basis_matrix(basis, x) @ theta)
    return fine, projection.theta
