import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmtesid import (RayleighDamping, add_measurement_noise, build_shear_frame,
                     generate_gwn_excitation, partition_dataset, simulate_response)
from mmtesid.kernel import MmteParams

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MASSES = (5.63, 6.03, 4.66)
STORY_K = (17.98, 25.58, 24.97)  # kN/m


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fig1_phi():
    return MmteParams([2.0, 8.0], [5.0, 2.5], [2.0, 10.0], 0.5)


def three_dof(dt=0.01, damping=RayleighDamping(0.0005, 2.0), observed=(1, 2), free=(1, 2)):
    return build_shear_frame(MASSES, STORY_K, damping, observed_dofs=observed, dt=dt,
                             stiffness_scale=1e3, free=free, parameterization="scaling")


@pytest.fixture(scope="session")
def frame():
    return three_dof()


@pytest.fixture(scope="session")
def small_parts(frame):
    """Two partitions of 60 samples from the 3-DOF frame at nominal parameters."""
    x = generate_gwn_excitation(120, frame.dt, 10.0, 1)
    y = add_measurement_noise(simulate_response(frame, x, frame.theta_nominal), 0.05, 2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return partition_dataset(x, y, 60)


# --- acceptance report ------------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
