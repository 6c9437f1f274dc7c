import warnings

import numpy as np
import pytest

from adprog.cohort import CohortConfig, ParamMap, generate_cohort


@pytest.fixture(scope="session")
def cohort():
    """The default 200-subject synthetic cohort."""
    return generate_cohort(CohortConfig())


@pytest.fixture(scope="session")
def uniform_cohort():
    """50 subjects sharing one parameter set (no demographic effect)."""
    pm = ParamMap(alpha1=(0.4, 0.0, 0.0), alpha2=(0.05, 0.0, 0.0), beta=(0.03, 0.0, 0.0))
    return generate_cohort(CohortConfig(n_subjects=50, param_map=pm, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
