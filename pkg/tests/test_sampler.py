import numpy as np
import pytest
from scipy import integrate

from StringSpline.core.bspline import aperiodic_basis, basis_matrix, periodic_basis
from StringSpline.core.model import SampleSet, scalar_model
from StringSpline.core.sampler import (
    DegenerateChainError,
    FitProblem,
    GibbsSchedule,
    NonConvergenceError,
    PriorConfig,
    PriorFamily,
    SamplerError,
    SingularityError,
    compound_prior_density,
    compound_prior_survival,
    conditional_theta,
    draw_lambda,
    draw_z,
    gls_fit,
    mle_fit,
    run_gibbs,
    zero_point_half_point,
    zero_point_prior,
    zero_point_prior_slope,
)
from StringSpline.core.streams import stream

SHORT = GibbsSchedule(burn_in=100, steps=1000, thin=5, seed=11)


def f3(x):
    return np.sin(np.pi * x / 3.0) / 0.72


def test_zero_point_prior_is_a_falling_sigmoid_in_log_lambda():
    e0 = 1e-4
    half = zero_point_half_point(e0)
    assert zero_point_prior(half, e0) == pytest.approx(0.5, rel=1e-12)
    assert zero_point_prior(half - 10.0, e0) == pytest.approx(1.0, abs=1e-4)
    assert zero_point_prior(half + 5.0, e0) < 1e-30
    grid = np.linspace(half - 10.0, half + 5.0, 200)
    assert np.all(zero_point_prior_slope(grid, e0) < 0)
    assert np.all(np.diff(zero_point_prior(grid, e0)) < 0)


def test_zero_point_prior_slope_matches_finite_difference():
    e0, x, step = 0.3, 1.7, 1e-6
    numeric = (zero_point_prior(x + step, e0) - zero_point_prior(x - step, e0)) / (2 * step)
    assert zero_point_prior_slope(x, e0) == pytest.approx(numeric, rel=1e-6)


@pytest.mark.parametrize("a, b", [(1e-4, 1e-4), (0.5, 2.0), (3.0, 0.1)])
def test_compound_prior_is_a_normalized_density(a, b):
    assert compound_prior_survival(0.0, a, b) == 1.0
    if a >= 1e-2:
        # the a = 1e-4 tail is too heavy for quad
        total, _ = integrate.quad(compound_prior_density, 0.0, np.inf, args=(a, b), limit=200)
        assert total == pytest.approx(1.0, rel=1e-6)
    head, _ = integrate.quad(compound_prior_density, 0.0, 5.0, args=(a, b))
    assert 1.0 - head == pytest.approx(compound_prior_survival(5.0, a, b), rel=1e-6, abs=1e-12)


def test_lambda_conditional_per_family():
    x = PriorConfig(e0=0.2)
    assert x.lambda_conditional(3.0, 18) == pytest.approx((9.0, 1.6))
    y = PriorConfig(family="Y")
    assert y.lambda_conditional(3.0, 18, delta=0.5) == pytest.approx((10.0, 2.0))
    z = PriorConfig(family="Z", lambda_scale=0.25)
    assert z.lambda_conditional(3.0, 18) == pytest.approx((10.0, 5.5))


def test_prior_config_validation_and_round_trip():
    prior = PriorConfig(e0=0.0, v0=1e-3, family=PriorFamily.Z, lambda_scale=1e-6, label="Z6")
    again = PriorConfig.from_dict(prior.to_dict())
    assert again == prior
    assert again.name == "Z6"
    assert PriorConfig(family="Y").name == "Y"
    for bad in ({"e0": -1.0}, {"v0": float("nan")}, {"lambda_scale": 0.0}, {"delta_shape": -2.0}):
        with pytest.raises(SamplerError):
            PriorConfig(**bad)
    with pytest.raises(ValueError):
        PriorConfig(family="W")


def test_conditional_mean_solves_the_penalized_normal_equations(sinusoid_problem):
    problem = sinusoid_problem
    lam, z = np.array([0.7]), np.array([40.0])
    cond = conditional_theta(problem, lam, z)
    d = problem.design.stacked
    y = problem.targets.ravel()
    expected = np.linalg.solve(lam[0] * problem.penalties[0].matrix + z[0] * d.T @ d, z[0] * d.T @ y)
    assert np.allclose(cond.mean, expected, rtol=1e-10, atol=1e-12)
    assert cond.projector is None


def test_conditional_draws_have_the_conditional_covariance(sinusoid_problem):
    problem = sinusoid_problem
    cond = conditional_theta(problem, np.array([0.7]), np.array([40.0]))
    rng = stream(5)
    draws = np.stack([cond.draw(rng) for _ in range(20000)])
    covariance = np.linalg.inv(problem.precision(np.array([0.7]), np.array([40.0])))
    assert np.allclose(draws.mean(axis=0), cond.mean, atol=5.0 * np.sqrt(np.max(np.diag(covariance)) / 20000))
    assert np.allclose(np.cov(draws, rowvar=False).diagonal(), covariance.diagonal(), rtol=0.05)


def test_z_draws_follow_their_gamma_conditional(sinusoid_problem):
    problem = sinusoid_problem
    theta = conditional_theta(problem, np.array([1.0]), np.array([50.0])).mean
    rng = stream(6)
    draws = np.array([draw_z(problem, theta, 1e-10, rng)[0] for _ in range(20000)])
    shape = problem.counts[0] / 2.0
    rate = (1e-10 + problem.residual_sq(theta)[0]) / 2.0
    assert draws.mean() == pytest.approx(shape / rate, rel=0.02)
    assert draws.var() == pytest.approx(shape / rate**2, rel=0.1)


def test_lambda_draws_follow_their_gamma_conditional(sinusoid_problem):
    problem = sinusoid_problem
    theta = conditional_theta(problem, np.array([1.0]), np.array([50.0])).mean
    prior = PriorConfig(e0=0.5)
    rng = stream(7)
    draws = np.array([draw_lambda(problem, theta, prior, rng)[0][0] for _ in range(20000)])
    shape, rate = prior.lambda_conditional(problem.roughness(theta)[0], int(problem.dofs[0]))
    assert shape == (20 - 2) / 2.0
    assert draws.mean() == pytest.approx(shape / rate, rel=0.02)


def test_lambda_shape_counts_coefficients_minus_the_derivative_order(sinusoid_problem):
    prior = PriorConfig(e0=1.0)
    rng = stream(8)
    theta = np.zeros(20)
    draws = np.array([draw_lambda(sinusoid_problem, theta, prior, rng)[0][0] for _ in range(20000)])
    # Gamma(9, rate 1/2): mean 18, standard deviation 6
    assert abs(draws.mean() - 18.0) < 4.0 * 6.0 / np.sqrt(draws.size)
    assert sinusoid_problem.dofs.tolist() == [18]


@pytest.mark.parametrize(
    "basis, dof",
    [
        (aperiodic_basis(-3.0, 3.0, 4, intervals=17), 18),
        (aperiodic_basis(-3.0, 3.0, 4, intervals=17, vanishing_end=True), 15),
        (aperiodic_basis(-3.0, 3.0, 4, intervals=17, clamp_left=True), 15),
    ],
)
def test_aperiodic_lambda_shapes_ignore_the_boundary_conditions(basis, dof):
    x = np.linspace(-3.0, 3.0, 60, endpoint=False)
    samples = SampleSet(inputs=x, targets=f3(x))
    problem = FitProblem.from_model(scalar_model(basis), samples, constraints="none")
    assert problem.dofs.tolist() == [dof]
    shape, rate = PriorConfig(e0=1.0).lambda_conditional(0.0, int(problem.dofs[0]))
    assert (shape, rate) == (dof / 2.0, 0.5)


def test_family_y_needs_and_updates_delta(sinusoid_problem):
    problem = sinusoid_problem
    theta = conditional_theta(problem, np.array([1.0]), np.array([50.0])).mean
    prior = PriorConfig(family="Y")
    with pytest.raises(SamplerError):
        draw_lambda(problem, theta, prior, stream(8))
    lam, delta = draw_lambda(problem, theta, prior, stream(8), delta=np.array([0.1]))
    assert lam.shape == (1,) and delta.shape == (1,)
    assert np.all(delta > 0)


def test_schedule_counts_and_validation():
    schedule = GibbsSchedule(burn_in=7, steps=10, thin=3)
    assert schedule.num_draws == 4
    assert schedule.total_sweeps == 17
    assert GibbsSchedule(burn_in=0, steps=25000, thin=5).num_draws == 5000
    for bad in ({"burn_in": -1}, {"steps": 0}, {"thin": 0}):
        with pytest.raises(SamplerError):
            GibbsSchedule(**bad)


def test_chain_is_reproducible_from_its_seed(dense_problem):
    first = run_gibbs(dense_problem, PriorConfig(), SHORT)
    second = run_gibbs(dense_problem, PriorConfig(), SHORT)
    other = run_gibbs(dense_problem, PriorConfig(), GibbsSchedule(burn_in=100, steps=1000, thin=5, seed=12))
    assert np.array_equal(first.lambdas, second.lambdas)
    assert np.array_equal(first.theta_mean, second.theta_mean)
    assert not np.array_equal(first.lambdas, other.lambdas)


def test_chain_records_thinned_draws(dense_problem):
    chain = run_gibbs(dense_problem, PriorConfig(), GibbsSchedule(burn_in=20, steps=50, thin=4, store_draws=True))
    assert chain.num_draws == 13
    assert chain.iterations[0] == 20
    assert np.all(np.diff(chain.iterations) == 4)
    assert chain.thetas.shape == (13, 20)
    assert chain.theta_cov.shape == (20, 20)
    frame = chain.trace_frame()
    assert list(frame.columns) == ["iter", "lambda_f", "z_all"]
    assert len(frame) == 13
    header = chain.header()
    assert header["num_draws"] == 13
    assert header["prior"]["label"] == "X"


def test_posterior_mean_recovers_the_sinusoid(dense_problem, sinusoid_basis):
    chain = run_gibbs(dense_problem, PriorConfig(), SHORT)
    x = np.linspace(-3.0, 3.0, 400, endpoint=False)
    fit = basis_matrix(sinusoid_basis, x) @ chain.theta_mean
    assert np.sqrt(np.mean((fit - f3(x)) ** 2)) < 0.15
    # sigma = 0.1 so the noise variance is near 0.01
    assert 0.001 < chain.sigma2_hat[0] < 0.05
    assert chain.degeneracy_indicators()["polynomial_fraction"] == 0.0


def test_chain_is_equivariant_under_data_scale(sinusoid_basis, dense_samples):
    prior = PriorConfig(e0=0.0, v0=0.0)
    schedule = GibbsSchedule(burn_in=20, steps=100, thin=5, seed=2)
    model = scalar_model(sinusoid_basis)
    base = FitProblem.from_model(model, dense_samples, constraints="none")
    scaled_samples = SampleSet(inputs=dense_samples.inputs, targets=4.0 * dense_samples.targets)
    scaled = FitProblem.from_model(model, scaled_samples, constraints="none")
    a = run_gibbs(base, prior, schedule)
    b = run_gibbs(scaled, prior, schedule)
    assert np.allclose(b.theta_mean, 4.0 * a.theta_mean, rtol=1e-10, atol=0)
    assert np.allclose(b.lambdas, a.lambdas / 16.0, rtol=1e-10, atol=0)
    assert np.allclose(b.zs, a.zs / 16.0, rtol=1e-10, atol=0)


def test_mle_reaches_a_fixed_point(dense_problem):
    prior = PriorConfig()
    result = mle_fit(dense_problem, prior, tol=1e-9, max_iter=2000)
    assert result.converged
    residual = dense_problem.residual_sq(result.theta)[0]
    assert result.z[0] == pytest.approx((60 - 2) / (prior.v0 + residual), rel=1e-6)
    roughness = dense_problem.roughness(result.theta)[0]
    assert result.lam[0] == pytest.approx((20 - 2 - 2) / (roughness + prior.e0), rel=1e-6)
    assert len(result.history) == result.iterations


def test_mle_reports_non_convergence_with_last_iterate(sinusoid_problem):
    with pytest.raises(NonConvergenceError) as info:
        mle_fit(sinusoid_problem, PriorConfig(), tol=1e-300, max_iter=2)
    assert info.value.iterations == 2
    assert not info.value.last_iterate.converged
    assert info.value.last_iterate.theta.shape == (20,)


def test_gls_fit_satisfies_the_normal_equations():
    basis = periodic_basis(-3.0, 3.0, 8, 4)
    x = np.linspace(-3.0, 3.0, 40, endpoint=False)
    y = f3(x) + 0.1 * stream(3).standard_normal(40)
    problem = FitProblem.from_model(scalar_model(basis), SampleSet(inputs=x, targets=y), constraints="none")
    result = gls_fit(problem)
    d = problem.design.stacked
    assert np.allclose(d.T @ (d @ result.theta - y), 0.0, atol=1e-10)
    assert np.array_equal(result.lam, [0.0])
    assert result.z[0] == pytest.approx(40 / problem.residual_sq(result.theta)[0])


def test_singular_precision_names_the_weak_group():
    basis = periodic_basis(-3.0, 3.0, 20, 4)
    x = np.linspace(0.0, 0.2, 6)
    problem = FitProblem.from_model(scalar_model(basis), SampleSet(inputs=x, targets=np.ones(6)), constraints="none")
    with pytest.raises(SingularityError) as info:
        conditional_theta(problem, np.array([0.0]), np.array([1.0]), iteration=4)
    assert info.value.iteration == 4
    assert info.value.group == "f"
    assert info.value.direction.shape == (20,)


def test_non_finite_tension_is_a_degenerate_chain(sinusoid_problem):
    with pytest.raises(DegenerateChainError):
        conditional_theta(sinusoid_problem, np.array([np.inf]), np.array([1.0]))


def test_problem_rejects_mismatched_penalties(sinusoid_problem):
    with pytest.raises(SamplerError):
        FitProblem(
            design=sinusoid_problem.design,
            targets=sinusoid_problem.targets,
            penalties=sinusoid_problem.penalties * 2,
            constraints=sinusoid_problem.constraints,
            variance_groups=sinusoid_problem.variance_groups,
        )
