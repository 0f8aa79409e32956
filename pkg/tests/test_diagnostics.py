import math

import numpy as np
import pytest
from scipy import integrate
from scipy.signal import lfilter
from scipy.special import gammaln

from StringSpline.core.bspline import aperiodic_basis, basis_matrix, periodic_basis, project
from StringSpline.core.diagnostics import (
    DEFAULT_AIC_PRECISION,
    AlphaSystem,
    DiagnosticsError,
    aic,
    aic_score,
    alpha_profile,
    autocorr_time,
    default_alpha_grid,
    empirical_kernel,
    expected_mse,
    gcv,
    gcv_score,
    joint_z_alpha_logpdf,
    kernel_ft,
    kernel_matrix,
    marginal_alpha_logpdf,
    marginal_z_given_alpha,
    resolution_study,
)
from StringSpline.core.model import (
    AdditiveModel,
    ComponentFunction,
    IdentityArgument,
    ParameterGroup,
    SampleSet,
    ScalarDirection,
    scalar_model,
)
from StringSpline.core.sampler import FitProblem
from StringSpline.core.streams import stream


def f3(x):
    return np.sin(np.pi * x / 3.0) / 0.72


@pytest.fixture
def system(dense_problem):
    return AlphaSystem.from_problem(dense_problem)


def joint_by_hand(system, z, alpha):
    """alpha^((p-n)/2-1) z^((M-n)/2-1) exp(-z S / 2) |D^T D + alpha Q|^(-1/2), in logs."""
    fit = system.solve(alpha)
    p, n, m = system.num_params, system.deriv_order, system.num_obs
    scale = fit.eps_f + system.v0 + alpha * (fit.eps_q + system.e0)
    return (
        ((p - n) / 2.0 - 1.0) * math.log(alpha)
        + ((m - n) / 2.0 - 1.0) * math.log(z)
        - z * scale / 2.0
        - 0.5 * fit.logdet
    )


def test_gcv_and_aic_formulas():
    assert gcv_score(10, 2.5, 2.0) == 0.390625
    assert aic_score(3.0, 4.0, z_hat=1.0) == 11.0
    assert aic_score(1.0, 0.0) == pytest.approx(23.74**-2)
    assert DEFAULT_AIC_PRECISION == pytest.approx(1.0 / 563.5876)
    with pytest.raises(DiagnosticsError):
        gcv_score(10, 1.0, 10.0)


def test_selectors_use_the_solved_fit(system):
    fit = system.solve(0.3)
    assert gcv(system, 0.3) == pytest.approx(60 * fit.eps_f / (60 - fit.trace_h) ** 2)
    assert aic(system, 0.3, z_hat=100.0) == pytest.approx(100.0 * fit.eps_f + 2.0 * fit.trace_h)


def test_hat_trace_matches_the_explicit_hat_matrix(system):
    fit = system.solve(0.05)
    d = system.design
    hat = d @ np.linalg.solve(system.gram + 0.05 * system.penalty, d.T)
    assert fit.trace_h == pytest.approx(np.trace(hat), rel=1e-10)
    assert fit.eps_f == pytest.approx(np.sum((hat @ system.targets - system.targets) ** 2), rel=1e-8)


def test_hat_trace_falls_from_p_to_the_free_modes(system):
    traces = [system.solve(alpha).trace_h for alpha in np.logspace(-6, 6, 25)]
    assert np.all(np.diff(traces) < 0)
    assert system.null_dim - 1e-9 < traces[-1] < traces[0] < system.num_params + 1e-9


def test_joint_density_matches_the_direct_form(system):
    for z, alpha in [(50.0, 1e-3), (120.0, 0.1), (80.0, 10.0)]:
        assert joint_z_alpha_logpdf(system, z, alpha) == pytest.approx(joint_by_hand(system, z, alpha), rel=1e-10)


def test_posterior_shapes_on_the_periodic_sinusoid_setup(system):
    assert (system.num_params, system.deriv_order, system.num_obs) == (20, 2, 60)
    assert marginal_z_given_alpha(system, 0.1).shape == 29.0
    fits = {alpha: system.solve(alpha) for alpha in (0.1, 1.0)}

    def by_hand(alpha):
        fit = fits[alpha]
        scale = fit.eps_f + system.v0 + alpha * (fit.eps_q + system.e0)
        return 8.0 * math.log(alpha) - 29.0 * math.log(scale) - 0.5 * fit.logdet

    assert marginal_alpha_logpdf(system, 1.0) - marginal_alpha_logpdf(system, 0.1) == pytest.approx(
        by_hand(1.0) - by_hand(0.1), rel=1e-10
    )


def test_posterior_shapes_on_a_vanishing_end_basis():
    basis = aperiodic_basis(-3.0, 3.0, 4, intervals=17, vanishing_end=True)
    x = np.linspace(-3.0, 3.0, 40, endpoint=False)
    problem = FitProblem.from_model(scalar_model(basis), SampleSet(inputs=x, targets=f3(x)), constraints="none")
    system = AlphaSystem.from_problem(problem)
    assert (system.num_params, system.null_dim, system.deriv_order) == (17, 0, 2)
    assert marginal_z_given_alpha(system, 0.5).shape == 19.0
    fit = system.solve(0.5)
    scale = fit.eps_f + system.v0 + 0.5 * (fit.eps_q + system.e0)
    expected = 6.5 * math.log(0.5) - 19.0 * math.log(scale) - 0.5 * fit.logdet
    assert marginal_alpha_logpdf(system, 0.5) == pytest.approx(expected, rel=1e-10)


def test_marginal_is_the_joint_integrated_over_z(system):
    alpha = 0.2
    law = marginal_z_given_alpha(system, alpha)
    s = law.shape
    offset = marginal_alpha_logpdf(system, alpha) + s * math.log(2.0) + gammaln(s)
    lo, hi = law.dist.ppf(1e-12), law.dist.ppf(1.0 - 1e-12)
    total, _ = integrate.quad(lambda z: math.exp(joint_by_hand(system, z, alpha) - offset), lo, hi, limit=200)
    assert total == pytest.approx(1.0, rel=1e-7)
    assert s == (60 - 2) / 2.0


def test_marginal_profile_is_scale_free_up_to_a_constant(system):
    alphas = np.logspace(-4, 2, 13)
    base = alpha_profile(system, alphas)
    scaled = alpha_profile(system.scaled(4.0), alphas)
    shift = scaled.log_marginal - base.log_marginal
    assert np.allclose(shift, shift[0], rtol=0, atol=1e-9)
    assert scaled.argmax_marginal == base.argmax_marginal
    assert np.allclose(scaled.eps_f, 16.0 * base.eps_f, rtol=1e-9)


def test_profile_finds_interior_optima(system):
    profile = alpha_profile(system)
    assert profile.alpha.size == 121
    for index in (profile.argmax_marginal, profile.argmin_gcv):
        assert 0 < index < 120
    frame = profile.to_frame()
    assert list(frame.columns) == ["alpha", "eps_f", "eps_q", "logmarg", "gcv", "aic", "trH"]
    assert not frame.isna().any().any()


def test_default_grid_spans_twelve_decades():
    grid = default_alpha_grid()
    assert grid[0] == pytest.approx(1e-6) and grid[-1] == pytest.approx(1e6)
    assert grid.size == 121


def test_profile_rejects_bad_grids(system):
    for grid in ([], [1.0, 0.5], [0.0, 1.0]):
        with pytest.raises(DiagnosticsError):
            alpha_profile(system, grid)
    with pytest.raises(DiagnosticsError):
        system.solve(-1.0)
    with pytest.raises(DiagnosticsError):
        marginal_alpha_logpdf(system, 0.0)


def test_diagnostics_need_a_single_function(two_group_problem):
    with pytest.raises(DiagnosticsError):
        AlphaSystem.from_problem(two_group_problem)


@pytest.fixture
def two_group_problem():
    rng = np.random.default_rng(2)
    inputs = rng.uniform(-3.0, 3.0, size=(40, 2))
    model = AdditiveModel(
        groups=(
            ParameterGroup("f", periodic_basis(-3.0, 3.0, 8, 4)),
            ParameterGroup("g", periodic_basis(-3.0, 3.0, 8, 4)),
        ),
        components=(
            ComponentFunction("f", "f", IdentityArgument(0), ScalarDirection()),
            ComponentFunction("g", "g", IdentityArgument(1), ScalarDirection()),
        ),
    )
    return FitProblem.from_model(model, SampleSet(inputs=inputs, targets=np.sin(inputs[:, 0])))


def test_kernel_transform():
    assert kernel_ft(0.0, 2.0, 2, 1.0, 10, 0.5) == 1.0
    omega = 2.5**0.25
    assert kernel_ft(omega, 2.0, 2, 1.0, 10, 0.5) == pytest.approx(0.5)
    values = kernel_ft(np.linspace(0.0, 5.0, 50), 2.0, 2, 1.0, 10, 0.5)
    assert np.all(np.diff(values) < 0)
    with pytest.raises(DiagnosticsError):
        kernel_ft(1.0, 0.0, 2, 1.0, 10, 0.5)


def test_kernel_smooths_the_samples_into_the_fit(system, sinusoid_basis, dense_samples):
    alpha = 0.1
    x = np.linspace(-3.0, 2.9, 17)
    samples_x = dense_samples.inputs[:, 0]
    kernel = kernel_matrix(system, sinusoid_basis, x, samples_x, alpha)
    fit = basis_matrix(sinusoid_basis, x) @ system.solve(alpha).theta
    assert np.allclose(kernel @ system.targets / system.num_obs, fit, atol=1e-10)
    # constants are unpenalized, so every row averages to one
    assert np.allclose(kernel.mean(axis=1), 1.0, atol=1e-10)
    assert empirical_kernel(system, sinusoid_basis, x[3], samples_x[5], alpha) == pytest.approx(kernel[3, 5])
    square = kernel_matrix(system, sinusoid_basis, x, x, alpha)
    assert np.allclose(square, square.T, atol=1e-12)


def test_expected_mse_of_a_free_mode_is_pure_variance(system):
    theta0 = np.full(system.num_params, 0.7)
    lam, z = 3.0, 100.0
    fit = system.solve(lam / z)
    hat = system.design @ np.linalg.solve(system.gram + (lam / z) * system.penalty, system.design.T)
    assert expected_mse(system, theta0, lam, z) == pytest.approx(np.trace(hat @ hat) / (z * 60), rel=1e-10)
    assert fit.trace_h < system.num_params


def test_expected_mse_without_penalty_is_p_over_m(system):
    theta0 = np.random.default_rng(0).standard_normal(system.num_params)
    assert expected_mse(system, theta0, 0.0, 4.0) == pytest.approx(20 / (4.0 * 60), rel=1e-10)
    with pytest.raises(DiagnosticsError):
        expected_mse(system, theta0, 1.0, 0.0)


def test_expected_mse_matches_monte_carlo(system, sinusoid_basis):
    theta0 = project(sinusoid_basis, f3).theta
    lam, z = 5.0, 100.0
    alpha = lam / z
    truth = system.design @ theta0
    rng = stream(21)
    errors = np.empty(2000)
    for k in range(errors.size):
        y = truth + rng.standard_normal(truth.size) / math.sqrt(z)
        noisy = AlphaSystem(system.design, y, system.penalty, system.null_dim, system.deriv_order)
        errors[k] = np.mean((system.design @ noisy.solve(alpha).theta - truth) ** 2)
    standard_error = errors.std() / math.sqrt(errors.size)
    assert abs(errors.mean() - expected_mse(system, theta0, lam, z)) < 4.0 * standard_error


def test_autocorrelation_time_of_an_ar1_chain():
    rho = 0.9
    trace = lfilter([1.0], [1.0, -rho], stream(4).standard_normal(200000))
    fit = autocorr_time(trace)
    assert fit.decaying
    assert fit.tau == pytest.approx(-1.0 / math.log(rho), rel=0.1)
    assert autocorr_time(trace, spacing=5).tau == pytest.approx(5.0 * fit.tau)
    assert fit.acf[0] == 1.0


def test_autocorrelation_edge_cases():
    assert autocorr_time(np.full(500, 2.5)).tau == math.inf
    assert autocorr_time(stream(5).standard_normal(20000)).tau < 1.0
    with pytest.raises(DiagnosticsError):
        autocorr_time(np.arange(99.0))


def test_resolution_study_converges_at_fourth_order():
    study = resolution_study(f3, alpha=1e-8)
    assert study.truth_slope == pytest.approx(4.0, abs=0.7)
    assert np.all(np.diff(study.rmse_truth) < 0)
    assert np.isnan(study.refinement_change[-1])
    assert np.all(study.refinement_change[:-1] < 0.05)
    frame = study.to_frame()
    assert list(frame.columns) == ["intervals", "h", "rmse_truth", "refinement_change"]
    with pytest.raises(DiagnosticsError):
        resolution_study(f3, alpha=1e-8, levels=(8,))
