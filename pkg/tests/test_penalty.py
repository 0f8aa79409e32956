import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from StringSpline.core.bspline import (
    aperiodic_basis,
    basis_matrix,
    linear_coefficients,
    periodic_basis,
    project,
    prolongate,
)
from StringSpline.core.penalty import (
    PenaltyConfig,
    PenaltyError,
    assemble_penalty,
    combined_penalty,
    density_volume,
    interval_moment_matrix,
    string_energy,
)


def quadrature_penalty(basis, config, points=64):
    """(1/V) integral of kappa x^k A(x)^T A(x) with Gauss-Legendre per sub-interval."""
    nodes, weights = np.polynomial.legendre.leggauss(points)
    edges = basis.breakpoints()
    volume = density_volume(basis, config)
    q = np.zeros((basis.num_params, basis.num_params))
    for a, b in zip(edges[:-1], edges[1:]):
        x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        w = 0.5 * (b - a) * weights * config.kappa * x**config.density_exponent
        rows = basis_matrix(basis, x, config.deriv_order)
        q += rows.T @ (w[:, None] * rows)
    return q / volume


def test_moment_matrix_constant_density_is_hilbert():
    f = interval_moment_matrix((0.0, 1.0), 0, 0.0, 4)
    i, j = np.indices((4, 4))
    assert np.allclose(f, 1.0 / (i + j + 1), atol=1e-15)


def test_moment_matrix_quadratic_density_at_zero_offset():
    f = interval_moment_matrix((0.0, 1.0), 2, 0.0, 3)
    i, j = np.indices((3, 3))
    assert np.allclose(f, 1.0 / (i + j + 3), atol=1e-15)


def test_moment_matrix_matches_quadrature_on_partial_interval():
    nodes, weights = np.polynomial.legendre.leggauss(32)
    d = 0.25 * nodes + 0.25
    w = 0.25 * weights * (d + 3.0) ** 2
    expected = np.array([[np.sum(w * d ** (i + j)) for j in range(4)] for i in range(4)])
    assert np.allclose(interval_moment_matrix((0.0, 0.5), 2, 3.0, 4), expected, rtol=1e-12, atol=0)


@pytest.mark.parametrize(
    "basis, config",
    [
        (periodic_basis(-3.0, 3.0, 20, 4), PenaltyConfig(deriv_order=2)),
        (aperiodic_basis(-3.0, 3.0, 4, intervals=17), PenaltyConfig(deriv_order=2)),
        (aperiodic_basis(-3.0, 3.0, 5, intervals=9), PenaltyConfig(deriv_order=3)),
        (aperiodic_basis(0.0, 17.0 / 7.0, 6, intervals=40, vanishing_end=True), PenaltyConfig(2, 2, 1.0)),
        (aperiodic_basis(0.5, 2.0, 4, knot_spacing=0.4), PenaltyConfig(deriv_order=1, density_exponent=1)),
    ],
)
def test_penalty_matches_quadrature(basis, config):
    q = assemble_penalty(basis, config).matrix
    oracle = quadrature_penalty(basis, config)
    assert np.max(np.abs(q - oracle)) <= 1e-10 * np.max(np.abs(oracle))


def test_penalty_is_symmetric_and_positive_semidefinite():
    pen = assemble_penalty(aperiodic_basis(-3.0, 3.0, 4, intervals=17), PenaltyConfig())
    assert np.array_equal(pen.matrix, pen.matrix.T)
    eigenvalues = np.linalg.eigvalsh(pen.matrix)
    assert eigenvalues[0] >= -1e-10 * eigenvalues[-1]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_aperiodic_rank_is_p_minus_n(n):
    basis = aperiodic_basis(-3.0, 3.0, 4, intervals=17)
    pen = assemble_penalty(basis, PenaltyConfig(deriv_order=n))
    assert pen.rank == basis.num_params - n


def test_polynomials_below_the_derivative_order_cost_nothing():
    basis = aperiodic_basis(-3.0, 3.0, 4, intervals=17)
    pen = assemble_penalty(basis, PenaltyConfig(deriv_order=2))
    for theta in (np.ones(basis.num_params), linear_coefficients(basis)):
        norm_q = np.linalg.norm(pen.matrix, 2)
        assert theta @ pen.matrix @ theta <= 1e-16 * (theta @ theta) * norm_q * 100


def test_periodic_rows_sum_to_zero():
    pen = assemble_penalty(periodic_basis(-3.0, 3.0, 20, 4), PenaltyConfig(deriv_order=2))
    assert np.allclose(pen.matrix.sum(axis=1), 0.0, atol=1e-12 * np.max(np.abs(pen.matrix)))
    assert pen.rank == 19


def test_periodic_basis_rejects_non_constant_density():
    with pytest.raises(PenaltyError):
        assemble_penalty(periodic_basis(-3.0, 3.0, 20, 4), PenaltyConfig(density_exponent=2))


def test_derivative_order_must_be_below_spline_order():
    with pytest.raises(PenaltyError):
        assemble_penalty(aperiodic_basis(0.0, 1.0, 2, intervals=4), PenaltyConfig(deriv_order=2))


def test_string_energy_of_zero_is_zero():
    pen = assemble_penalty(periodic_basis(-3.0, 3.0, 20, 4), PenaltyConfig())
    assert string_energy(pen, np.zeros(20)) == 0.0


@given(st.floats(-1e3, 1e3, allow_nan=False).filter(lambda c: c == 0 or abs(c) > 1e-100))
def test_string_energy_is_quadratic(c):
    pen = assemble_penalty(periodic_basis(-3.0, 3.0, 20, 4), PenaltyConfig())
    theta = np.sin(np.arange(20.0))
    assert string_energy(pen, c * theta) == pytest.approx(c**2 * string_energy(pen, theta), rel=1e-12, abs=1e-300)


def test_string_energy_rejects_wrong_dimension():
    pen = assemble_penalty(periodic_basis(-3.0, 3.0, 20, 4), PenaltyConfig())
    with pytest.raises(PenaltyError):
        string_energy(pen, np.zeros(19))


def test_sinusoid_energy_matches_curvature_integral():
    basis = periodic_basis(-3.0, 3.0, 20, 4)
    pen = assemble_penalty(basis, PenaltyConfig(deriv_order=2))
    theta = project(basis, lambda x: np.sin(np.pi * x / 3.0) / 0.72).theta
    # f'' = -(pi/3)^2 f, and the mean of sin^2 over a period is 1/2
    expected = (np.pi / 3.0) ** 4 / 0.72**2 / 2.0
    assert string_energy(pen, theta) == pytest.approx(expected, rel=1e-3)


def test_energy_is_stable_under_refinement():
    basis = periodic_basis(-3.0, 3.0, 16, 4)
    theta = project(basis, lambda x: np.cos(np.pi * x / 3.0)).theta
    coarse = string_energy(assemble_penalty(basis, PenaltyConfig()), theta)
    fine, fine_theta = prolongate(basis, theta)
    refined = string_energy(assemble_penalty(fine, PenaltyConfig()), fine_theta)
    assert refined == pytest.approx(coarse, rel=1e-3)


def test_combined_penalty_is_block_diagonal():
    a = assemble_penalty(periodic_basis(-3.0, 3.0, 8, 4), PenaltyConfig())
    b = assemble_penalty(aperiodic_basis(0.0, 1.0, 4, intervals=5), PenaltyConfig())
    total = combined_penalty([a, b], [2.0, 3.0])
    assert total.shape == (16, 16)
    assert np.allclose(total[:8, :8], 2.0 * a.matrix)
    assert np.allclose(total[8:, 8:], 3.0 * b.matrix)
    assert np.all(total[:8, 8:] == 0.0)


def test_penalty_frame_has_one_column_per_coefficient():
    pen = assemble_penalty(periodic_basis(-3.0, 3.0, 6, 4), PenaltyConfig())
    frame = pen.to_frame()
    assert list(frame.columns) == [f"q{j}" for j in range(6)]
    assert np.array_equal(frame.to_numpy(), pen.matrix)


def test_config_round_trip_and_validation():
    config = PenaltyConfig(deriv_order=3, density_exponent=2, kappa=0.5, volume=2.0)
    assert PenaltyConfig.from_dict(config.to_dict()) == config
    with pytest.raises(PenaltyError):
        PenaltyConfig(deriv_order=0)
    with pytest.raises(PenaltyError):
        PenaltyConfig(kappa=-1.0)


def test_free_modes_follow_the_boundary_conditions():
    cases = [
        (periodic_basis(-3.0, 3.0, 20, 4), 1),
        (aperiodic_basis(-3.0, 3.0, 4, intervals=17), 2),
        (aperiodic_basis(0.0, 17.0 / 7.0, 6, intervals=40, vanishing_end=True), 0),
    ]
    for basis, free in cases:
        pen = assemble_penalty(basis, PenaltyConfig(deriv_order=2))
        assert pen.null_dim == free
        assert pen.dof == basis.num_params - free
        if free:
            assert pen.rank == pen.dof
        assert pen.posterior_dof == basis.num_params - 2
