# core/diagnostics.py

"""
diagnostics.py
==============

Smoothing-ratio diagnostics for a single penalized spline.

With one parameter group and one noise precision the fit depends on
(lambda, z) only through alpha = lambda / z. For a given alpha the solve
``(D^T D + alpha Q) theta = D^T Y`` yields the residual eps_f^2, the roughness
eps_Q^2 and the hat-matrix trace, from which the marginal posterior of alpha,
GCV and AIC follow. Kernel, expected-MSE, autocorrelation and resolution
helpers round off the module.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from scipy.linalg import cho_solve
from scipy.optimize import curve_fit
from scipy.special import gammaln

from .bspline import SplineBasis, basis_matrix, periodic_basis
from .logger import logger
from .penalty import PenaltyConfig, assemble_penalty
from .sampler import FitProblem, SingularityError

DEFAULT_AIC_PRECISION = 23.74**-2


class DiagnosticsError(Exception):
    """
    Custom exception for diagnostics errors.

    Attributes
    ----------
    message : str
        Explanation of the error.
    """

    def __init__(self, message):
        """
        Initialize the DiagnosticsError with a message.

        Parameters
        ----------
        message : str
            Explanation of the error.
        """
        super().__init__(message)
        self.message = message


@dataclass(frozen=True)
class AlphaFit:
    """Conditional-mean fit at one alpha."""

    alpha: float
    theta: np.ndarray
    factor: np.ndarray
    eps_f: float
    eps_q: float
    logdet: float
    trace_h: float


@dataclass
class AlphaSystem:
    """
    Stacked design, targets and penalty of a one-group, one-precision fit.

    Attributes
    ----------
    design : ndarray
        Shape (M, p); M counts scalar observations.
    targets : ndarray
        Shape (M,).
    penalty : ndarray
        Shape (p, p).
    null_dim : int
        Number of modes the penalty leaves free; the large-alpha limit of tr H.
    deriv_order : int
        n of the penalty; the alpha and z posteriors carry (p - n) / 2 and (M - n) / 2.
    e0, v0 : float
        Zero-point energy and minimum variance.
    """

    design: np.ndarray
    targets: np.ndarray
    penalty: np.ndarray
    null_dim: int
    deriv_order: int
    e0: float = 1e-10
    v0: float = 1e-10

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        self.penalty = np.asarray(self.penalty, dtype=float)
        if self.design.shape[0] != self.targets.size:
            raise DiagnosticsError(
                f"Design has {self.design.shape[0]} rows but there are {self.targets.size} targets."
            )
        self.gram = self.design.T @ self.design
        self.rhs = self.design.T @ self.targets

    @classmethod
    def from_problem(cls, problem: FitProblem, e0: float = 1e-10, v0: float = 1e-10) -> "AlphaSystem":
        """
        Reduce a FitProblem with one parameter group and one variance group.

        Raises
        ------
        DiagnosticsError
            For multi-group or constrained problems, where alpha is not a
            single scalar.
        """
        if len(problem.penalties) != 1 or len(problem.variance_groups) != 1:
            raise DiagnosticsError(
                f"Alpha diagnostics need one parameter group and one variance group, got "
                f"{len(problem.penalties)} and {len(problem.variance_groups)}."
            )
        if problem.constraints.count:
            raise DiagnosticsError("Alpha diagnostics do not support identifiability constraints.")
        return cls(
            design=problem.design.stacked,
            targets=problem.targets.ravel(),
            penalty=problem.penalties[0].matrix,
            null_dim=problem.penalties[0].null_dim,
            deriv_order=problem.penalties[0].deriv_order,
            e0=e0,
            v0=v0,
        )

    @property
    def num_obs(self) -> int:
        return self.targets.size

    @property
    def num_params(self) -> int:
        return self.penalty.shape[0]

    def scaled(self, factor: float) -> "AlphaSystem":
        """Same system with targets scaled by ``factor`` and E0, V0 by its square."""
        return AlphaSystem(
            design=self.design,
            targets=self.targets * factor,
            penalty=self.penalty,
            null_dim=self.null_dim,
            deriv_order=self.deriv_order,
            e0=self.e0 * factor**2,
            v0=self.v0 * factor**2,
        )

    def solve(self, alpha: float) -> AlphaFit:
        """
        Factor ``D^T D + alpha Q`` and evaluate the fit statistics.

        Raises
        ------
        SingularityError
            If the system is not positive definite.
        """
        if alpha < 0 or not math.isfinite(alpha):
            raise DiagnosticsError(f"alpha must be finite and >= 0, got {alpha}.")
        matrix = self.gram + alpha * self.penalty
        try:
            factor = np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError as e:
            logger.error(f"D^T D + alpha Q is not positive definite at alpha={alpha:.3e}.")
            raise SingularityError(
                f"D^T D + alpha Q is not positive definite at alpha={alpha:.3e}."
            ) from e
        theta = cho_solve((factor, True), self.rhs)
        residual = self.design @ theta - self.targets
        return AlphaFit(
            alpha=alpha,
            theta=theta,
            factor=factor,
            eps_f=float(residual @ residual),
            eps_q=max(float(theta @ self.penalty @ theta), 0.0),
            logdet=2.0 * float(np.sum(np.log(np.diag(factor)))),
            trace_h=float(np.trace(cho_solve((factor, True), self.gram))),
        )


# --- marginal posterior ----------------------------------------------------------


def _marginal_scale(system: AlphaSystem, fit: AlphaFit) -> float:
    return fit.eps_f + system.v0 + fit.alpha * (fit.eps_q + system.e0)


def _check_dimensions(system: AlphaSystem) -> None:
    if system.num_obs <= system.deriv_order:
        raise DiagnosticsError(
            f"Need more observations than the penalty order: M={system.num_obs}, n={system.deriv_order}."
        )


def marginal_alpha_logpdf(system: AlphaSystem, alpha: float) -> float:
    """
    Log marginal posterior of alpha up to an additive constant.

    ``((p-n)/2 - 1) ln alpha - ((M-n)/2) ln(eps_f + V0 + alpha (eps_Q + E0))
    - (1/2) ln |D^T D + alpha Q|``
    """
    _check_dimensions(system)
    if alpha <= 0:
        raise DiagnosticsError(f"alpha must be positive, got {alpha}.")
    fit = system.solve(alpha)
    p, n, m = system.num_params, system.deriv_order, system.num_obs
    return (
        ((p - n) / 2.0 - 1.0) * math.log(alpha)
        - (m - n) / 2.0 * math.log(_marginal_scale(system, fit))
        - 0.5 * fit.logdet
    )


@dataclass(frozen=True)
class GammaLaw:
    """Gamma distribution in (shape, rate) form."""

    shape: float
    rate: float

    @property
    def mean(self) -> float:
        return self.shape / self.rate

    @property
    def dist(self):
        return stats.gamma(a=self.shape, scale=1.0 / self.rate)

    def logpdf(self, z):
        return self.dist.logpdf(z)


def marginal_z_given_alpha(system: AlphaSystem, alpha: float) -> GammaLaw:
    """z | alpha ~ Gamma((M-n)/2, (eps_f + V0 + alpha (eps_Q + E0)) / 2)."""
    _check_dimensions(system)
    fit = system.solve(alpha)
    return GammaLaw(
        shape=(system.num_obs - system.deriv_order) / 2.0,
        rate=_marginal_scale(system, fit) / 2.0,
    )


def joint_z_alpha_logpdf(system: AlphaSystem, z: float, alpha: float) -> float:
    """
    Log joint density of (z, alpha) on the scale of ``marginal_alpha_logpdf``.

    Integrating ``exp`` of this over z > 0 returns
    ``exp(marginal_alpha_logpdf + s ln 2 + ln Gamma(s))`` with s = (M-n)/2.
    """
    law = marginal_z_given_alpha(system, alpha)
    return (
        marginal_alpha_logpdf(system, alpha)
        + float(law.logpdf(z))
        + law.shape * math.log(2.0)
        + float(gammaln(law.shape))
    )


# --- classical selectors --------------------------------------------------------


def gcv_score(num_obs: int, eps_f: float, trace_h: float) -> float:
    """GCV = M eps_f (M - Tr H)^-2."""
    if trace_h >= num_obs:
        raise DiagnosticsError(
            f"Tr(H)={trace_h:.6g} >= M={num_obs}: the fit interpolates and GCV is undefined."
        )
    return num_obs * eps_f / (num_obs - trace_h) ** 2


def gcv(system: AlphaSystem, alpha: float) -> float:
    fit = system.solve(alpha)
    return gcv_score(system.num_obs, fit.eps_f, fit.trace_h)


def aic_score(eps_f: float, trace_h: float, z_hat: float = DEFAULT_AIC_PRECISION) -> float:
    """AIC = z_hat eps_f + 2 Tr H."""
    return z_hat * eps_f + 2.0 * trace_h


def aic(system: AlphaSystem, alpha: float, z_hat: float = DEFAULT_AIC_PRECISION) -> float:
    fit = system.solve(alpha)
    return aic_score(fit.eps_f, fit.trace_h, z_hat)


@dataclass
class AlphaProfile:
    """
    Fit statistics over a grid of alpha values.

    Attributes
    ----------
    alpha : ndarray
    eps_f, eps_q : ndarray
    log_marginal : ndarray
    gcv, aic : ndarray
        NaN where undefined.
    trace_h : ndarray
    """

    alpha: np.ndarray
    eps_f: np.ndarray
    eps_q: np.ndarray
    log_marginal: np.ndarray
    gcv: np.ndarray
    aic: np.ndarray
    trace_h: np.ndarray

    @property
    def argmax_marginal(self) -> int:
        return int(np.nanargmax(self.log_marginal))

    @property
    def argmin_gcv(self) -> int:
        return int(np.nanargmin(self.gcv))

    @property
    def argmin_aic(self) -> int:
        return int(np.nanargmin(self.aic))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "alpha": self.alpha,
                "eps_f": self.eps_f,
                "eps_q": self.eps_q,
                "logmarg": self.log_marginal,
                "gcv": self.gcv,
                "aic": self.aic,
                "trH": self.trace_h,
            }
        )


def default_alpha_grid() -> np.ndarray:
    return np.logspace(-6, 6, 121)


def alpha_profile(
    system: AlphaSystem, alphas: Optional[Sequence[float]] = None, z_hat: float = DEFAULT_AIC_PRECISION
) -> AlphaProfile:
    """
    Evaluate every selector on a logarithmic alpha grid.

    Parameters
    ----------
    system : AlphaSystem
    alphas : sequence of float, optional
        Increasing positive grid; defaults to 10^-6 .. 10^6 with 121 points.
    z_hat : float, optional
        Noise precision plugged into AIC.

    Returns
    -------
    AlphaProfile
    """
    _check_dimensions(system)
    grid = default_alpha_grid() if alphas is None else np.asarray(alphas, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise DiagnosticsError("The alpha grid must be a non-empty increasing sequence of positive values.")
    p, n, m = system.num_params, system.deriv_order, system.num_obs
    columns = {key: np.empty(grid.size) for key in ("eps_f", "eps_q", "logmarg", "gcv", "aic", "trH")}
    for i, alpha in enumerate(grid):
        fit = system.solve(float(alpha))
        columns["eps_f"][i] = fit.eps_f
        columns["eps_q"][i] = fit.eps_q
        columns["trH"][i] = fit.trace_h
        columns["logmarg"][i] = (
            ((p - n) / 2.0 - 1.0) * math.log(alpha)
            - (m - n) / 2.0 * math.log(_marginal_scale(system, fit))
            - 0.5 * fit.logdet
        )
        columns["gcv"][i] = gcv_score(m, fit.eps_f, fit.trace_h) if fit.trace_h < m else np.nan
        columns["aic"][i] = aic_score(fit.eps_f, fit.trace_h, z_hat)
    logger.info(f"Alpha profile over {grid.size} points in [{grid[0]:.1e}, {grid[-1]:.1e}].")
    return AlphaProfile(
        alpha=grid,
        eps_f=columns["eps_f"],
        eps_q=columns["eps_q"],
        log_marginal=columns["logmarg"],
        gcv=columns["gcv"],
        aic=columns["aic"],
        trace_h=columns["trH"],
    )


# --- kernels and expected error ---------------------------------------------------


def kernel_ft(omega, alpha: float, n: int, volume: float, num_obs: int, density: float):
    """Asymptotic kernel transform ``(1 + alpha omega^(2n) / (V M phi))^-1``."""
    if alpha <= 0 or volume <= 0 or num_obs <= 0 or density <= 0:
        raise DiagnosticsError("alpha, volume, sample count and density must be positive.")
    omega = np.asarray(omega, dtype=float)
    return 1.0 / (1.0 + alpha * omega ** (2 * n) / (volume * num_obs * density))


def kernel_matrix(system: AlphaSystem, basis: SplineBasis, x, y, alpha: float) -> np.ndarray:
    """
    Empirical kernel ``G(x, y) = B(x)^T ((1/M) D^T D + (alpha/M) Q)^-1 B(y)``.

    Returns
    -------
    ndarray
        Shape (len(x), len(y)).
    """
    fit = system.solve(alpha)
    bx = basis_matrix(basis, np.atleast_1d(x))
    by = basis_matrix(basis, np.atleast_1d(y))
    return system.num_obs * bx @ cho_solve((fit.factor, True), by.T)


def empirical_kernel(system: AlphaSystem, basis: SplineBasis, x: float, y: float, alpha: float) -> float:
    return float(kernel_matrix(system, basis, [x], [y], alpha)[0, 0])


def expected_mse(system: AlphaSystem, theta0: np.ndarray, lam: float, z: float) -> float:
    """
    Expected mean squared error of the conditional-mean fit at the sample points.

    ``(1/M) (|D A^-1 alpha Q theta0|^2 + z^-1 Tr(H^2))`` with
    ``A = D^T D + alpha Q`` and ``alpha = lambda / z``.
    """
    if z <= 0 or lam < 0:
        raise DiagnosticsError(f"Need z > 0 and lambda >= 0, got z={z}, lambda={lam}.")
    alpha = lam / z
    fit = system.solve(alpha)
    theta0 = np.asarray(theta0, dtype=float)
    bias = system.design @ cho_solve((fit.factor, True), alpha * (system.penalty @ theta0))
    hat_factor = cho_solve((fit.factor, True), system.gram)
    variance = float(np.trace(hat_factor @ hat_factor)) / z
    return (float(bias @ bias) + variance) / system.num_obs


# --- chain autocorrelation -----------------------------------------------------


@dataclass(frozen=True)
class AutocorrFit:
    """
    Exponential fit of a trace's autocorrelation.

    Attributes
    ----------
    tau : float
        Decorrelation time in sweeps; ``inf`` when the trace does not decay.
    decaying : bool
    acf : ndarray
        Normalized autocorrelation up to ``max_lag``.
    fit_lags : int
        Number of lags used in the fit.
    max_lag : int
    """

    tau: float
    decaying: bool
    acf: np.ndarray
    fit_lags: int
    max_lag: int


def _exponential(lag, tau):
    return np.exp(-lag / tau)


def autocorr_time(trace, spacing: int = 1) -> AutocorrFit:
    """
    Fit ``exp(-lag / tau)`` to the normalized autocorrelation of ``trace``.

    The autocorrelation is computed by FFT up to lag ``len(trace) // 4`` and
    fitted over the lags preceding its first non-positive value.

    Parameters
    ----------
    trace : array_like
        At least 100 values.
    spacing : int, optional
        Sweeps between consecutive trace entries (the thinning).

    Returns
    -------
    AutocorrFit

    Raises
    ------
    DiagnosticsError
        For short traces or a failed fit.
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim != 1 or x.size < 100:
        raise DiagnosticsError(f"Autocorrelation needs a 1-D trace of length >= 100, got shape {x.shape}.")
    max_lag = x.size // 4
    centered = x - x.mean()
    power = np.abs(np.fft.rfft(centered, 2 * x.size)) ** 2
    acov = np.fft.irfft(power)[: max_lag + 1]
    if acov[0] <= 0:
        logger.warning("Constant trace: decorrelation time is undefined.")
        return AutocorrFit(tau=math.inf, decaying=False, acf=np.ones(max_lag + 1), fit_lags=0, max_lag=max_lag)
    acf = acov / acov[0]
    nonpositive = np.flatnonzero(acf[1:] <= 0)
    cut = int(nonpositive[0]) + 1 if nonpositive.size else max_lag + 1
    if cut < 2:
        return AutocorrFit(tau=0.0, decaying=True, acf=acf, fit_lags=1, max_lag=max_lag)
    lags = np.arange(cut, dtype=float)
    guess = -1.0 / math.log(min(acf[1], 1.0 - 1e-12))
    try:
        popt, _ = curve_fit(_exponential, lags, acf[:cut], p0=[guess], bounds=(1e-12, np.inf))
    except (RuntimeError, ValueError) as e:
        logger.error(f"Exponential fit of the autocorrelation failed: {e}")
        raise DiagnosticsError(f"Exponential fit of the autocorrelation failed: {e}") from e
    tau = float(popt[0])
    if tau > max_lag:
        logger.warning(f"Autocorrelation does not decay within {max_lag} lags (fit tau {tau:.3g}).")
        return AutocorrFit(tau=math.inf, decaying=False, acf=acf, fit_lags=cut, max_lag=max_lag)
    return AutocorrFit(tau=tau * spacing, decaying=True, acf=acf, fit_lags=cut, max_lag=max_lag)


# --- resolution ---------------------------------------------------------------------


@dataclass
class ResolutionStudy:
    """
    Fixed-alpha fits over successively halved knot spacings.

    Attributes
    ----------
    intervals : ndarray
        Knot intervals per level.
    spacing : ndarray
        Knot spacing h per level.
    rmse_truth : ndarray
        RMSE of each fit against the target on a dense grid.
    refinement_change : ndarray
        RMSE between each fit and the next finer one, relative to the RMS of
        the finer fit; NaN at the finest level.
    truth_slope : float
        Log-log slope of ``rmse_truth`` against h.
    refinement_slope : float
        Log-log slope of the successive-refinement RMSE against h.
    """

    intervals: np.ndarray
    spacing: np.ndarray
    rmse_truth: np.ndarray
    refinement_change: np.ndarray
    truth_slope: float
    refinement_slope: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "intervals": self.intervals,
                "h": self.spacing,
                "rmse_truth": self.rmse_truth,
                "refinement_change": self.refinement_change,
            }
        )


def resolution_study(
    target: Callable[[np.ndarray], np.ndarray],
    alpha: float,
    lo: float = -3.0,
    hi: float = 3.0,
    levels: Sequence[int] = (8, 16, 32, 64),
    num_samples: int = 200,
    order: int = 4,
    deriv_order: int = 2,
    grid_points: int = 2000,
) -> ResolutionStudy:
    """
    Fit a periodic target at fixed alpha while halving the knot spacing.

    Samples are noiseless and equidistant on ``[lo, hi)``; all fits are
    compared on one dense grid.
    """
    if len(levels) < 2:
        raise DiagnosticsError("A resolution study needs at least two levels.")
    x = np.linspace(lo, hi, num_samples, endpoint=False)
    y = np.asarray(target(x), dtype=float)
    grid = np.linspace(lo, hi, grid_points, endpoint=False)
    truth = np.asarray(target(grid), dtype=float)
    curves = []
    for intervals in levels:
        basis = periodic_basis(lo, hi, int(intervals), order)
        penalty = assemble_penalty(basis, PenaltyConfig(deriv_order=deriv_order))
        system = AlphaSystem(
            design=basis_matrix(basis, x),
            targets=y,
            penalty=penalty.matrix,
            null_dim=penalty.null_dim,
            deriv_order=deriv_order,
        )
        fit = system.solve(alpha)
        curves.append(basis_matrix(basis, grid) @ fit.theta)
    curves = np.array(curves)
    spacing = (hi - lo) / np.asarray(levels, dtype=float)
    rmse_truth = np.sqrt(np.mean((curves - truth) ** 2, axis=1))
    steps = np.sqrt(np.mean(np.diff(curves, axis=0) ** 2, axis=1))
    change = np.append(steps / np.sqrt(np.mean(curves[1:] ** 2, axis=1)), np.nan)
    truth_slope = float(np.polyfit(np.log(spacing), np.log(rmse_truth), 1)[0])
    if len(levels) > 2:
        refinement_slope = float(np.polyfit(np.log(spacing[:-1]), np.log(steps), 1)[0])
    else:
        refinement_slope = math.nan
    logger.info(f"Resolution study over {list(levels)} intervals: truth slope {truth_slope:.3f}.")
    return ResolutionStudy(
        intervals=np.asarray(levels),
        spacing=spacing,
        rmse_truth=rmse_truth,
        refinement_change=change,
        truth_slope=truth_slope,
        refinement_slope=refinement_slope,
    )
