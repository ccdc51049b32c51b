import math

import numpy as np
import pytest

from sweepopt.controls import GridControl
from sweepopt.instance import builtin, closed_form_solution
from sweepopt.optimizer import continuation_solve
from sweepopt.schedule import make_schedule

T_END = math.pi / 2


@pytest.fixture(scope="session")
def annulus():
    return builtin("annulus_example")


@pytest.fixture(scope="session")
def closed_form():
    return closed_form_solution("annulus_example")


@pytest.fixture(scope="session")
def default_schedule(annulus):
    return make_schedule(annulus.M_bar, annulus.geometry.eta)


@pytest.fixture(scope="session")
def reference_control(annulus):
    def make(N):
        g = annulus.grid(N)
        return GridControl(g, g[:, None])
    return make


@pytest.fixture(scope="session")
def continuation_2000(annulus, default_schedule):
    """Bootstrap continuation on N=2000 from the default initial guess (about 30 s)."""
    return continuation_solve(annulus, default_schedule, annulus.grid(2000))


def unit_circle(t):
    return np.array([math.cos(t), math.sin(t)])
