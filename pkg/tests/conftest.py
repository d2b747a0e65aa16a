import sys

import numpy as np
import pytest

from fuelgrid.gallery import drift_follower, exit_domain, fuel_follower, stopping_only
from fuelgrid.solver import solve_backward


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def solved_drift_follower():
    inst = drift_follower()
    spec, lat, tr = inst.build()
    field, pol = solve_backward(spec, lat, tr)
    return inst, spec, lat, tr, field, pol


@pytest.fixture(scope="session")
def solved_fuel_follower():
    inst = fuel_follower()
    spec, lat, tr = inst.build()
    field, pol = solve_backward(spec, lat, tr)
    return inst, spec, lat, tr, field, pol


@pytest.fixture(scope="session")
def solved_gallery():
    out = []
    for inst in (stopping_only(), drift_follower(), fuel_follower(), exit_domain()):
        spec, lat, tr = inst.build()
        field, pol = solve_backward(spec, lat, tr)
        out.append((inst, spec, lat, tr, field, pol))
    return out


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=np.array([1234, 1], dtype=np.uint64)))
