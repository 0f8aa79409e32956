import os

# No log files from test runs.
os.environ.setdefault("STRINGSPLINE_LOG_FILE", "0")
os.environ.setdefault("STRINGSPLINE_LOG_LEVEL", "WARNING")

import hypothesis
import numpy as np
import pytest

from StringSpline.core.bspline import periodic_basis
from StringSpline.core.datagen import LJConfig, ScalarBenchmark, gen_scalar
from StringSpline.core.model import scalar_model
from StringSpline.core.sampler import FitProblem

np.seterr(all="warn")

hypothesis.settings.register_profile("dev", max_examples=20, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))


@pytest.fixture
def sinusoid_basis():
    """The order-4 periodic basis with 20 coefficients on [-3, 3)."""
    return periodic_basis(-3.0, 3.0, 20, 4)


@pytest.fixture
def sinusoid_samples():
    return gen_scalar(ScalarBenchmark(function="f3", num_samples=20, sigma=0.1, seed=7))


@pytest.fixture
def sinusoid_problem(sinusoid_basis, sinusoid_samples):
    return FitProblem.from_model(scalar_model(sinusoid_basis), sinusoid_samples, constraints="none")


@pytest.fixture
def small_lj_config():
    """Eight particles, short equilibration, a handful of frames."""
    return LJConfig(
        n_particles=8,
        equilibration=200,
        stride=10,
        n_configs=6,
        basis_intervals=60,
        force_noise=1.0,
        seed=3,
    )


@pytest.fixture
def dense_samples():
    """Sixty noisy sinusoid samples, well above the twenty coefficients."""
    return gen_scalar(ScalarBenchmark(function="f3", num_samples=60, sigma=0.1, seed=7))


@pytest.fixture
def dense_problem(sinusoid_basis, dense_samples):
    return FitProblem.from_model(scalar_model(sinusoid_basis), dense_samples, constraints="none")
