import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sweepopt.errors import GammaTooSmall
from sweepopt.instance import EndpointSet
from sweepopt.schedule import (first_inner_start, first_stage_where, make_schedule, shift_initial_point,
                               shifted_terminal_set)


def test_single_stage_alpha():
    s = make_schedule(1.0, 1.0, gamma_0=2 * math.e, count=1)
    assert s.alphas[0] == pytest.approx(1 / (2 * math.e), rel=1e-15)
    assert s.inner_set_margin(0) == pytest.approx(0.18393972058572117, rel=1e-12)


def test_threshold_is_strict():
    with pytest.raises(GammaTooSmall):
        make_schedule(1.0, 1.0, gamma_0=2.0)


def test_invalid_growth_and_count():
    with pytest.raises(ValueError):
        make_schedule(1.0, 1.0, growth=1.0)
    with pytest.raises(ValueError):
        make_schedule(1.0, 1.0, count=0)


def test_default_schedule(default_schedule, annulus):
    s = default_schedule
    assert len(s) == 8
    assert s.gammas[0] == pytest.approx(4 * annulus.M_bar / annulus.geometry.eta)
    assert s.gammas[-1] == pytest.approx(s.gammas[0] * 3 ** 7)
    assert np.all(np.diff(s.gammas) > 0)
    assert np.all(np.diff(s.alphas) < 0)
    assert np.all(np.diff(s.rhos) < 0)
    assert s.identity_residuals().max() <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 50.0), st.floats(0.1, 5.0), st.floats(1.01, 10.0), st.floats(1.5, 4.0),
       st.integers(1, 12))
def test_identity_holds(m_bar, eta, ratio, growth, count):
    s = make_schedule(m_bar, eta, gamma_0=ratio * 2 * m_bar / eta, growth=growth, count=count)
    assert s.identity_residuals().max() <= 1e-12
    assert all(a > 0 for a in s.alphas)


def test_shift_initial_point(annulus, default_schedule):
    geom = annulus.geometry
    rho = default_schedule.rhos[3]
    np.testing.assert_allclose(shift_initial_point(geom, [1, 0], rho), [1 + rho, 0], rtol=1e-15)
    np.testing.assert_array_equal(shift_initial_point(geom, [1.5, 0], rho), [1.5, 0])
    np.testing.assert_allclose(shift_initial_point(geom, [1, 0], 1e-14), [1, 0], atol=1e-13)


def test_shifted_start_lies_in_inner_set(annulus, default_schedule):
    geom = annulus.geometry
    for k in range(len(default_schedule)):
        c = shift_initial_point(geom, [1, 0], default_schedule.rhos[k])
        assert geom.eval_psi(c) <= -default_schedule.alphas[k]


def test_shifted_terminal_set(annulus):
    geom = annulus.geometry
    C1 = annulus.C1
    same = shifted_terminal_set(C1, [0, 1], [0, 1], geom, delta0=0.5)
    assert same.contains([0, 1.2])
    assert not same.contains([0, 1.6])  # outside the ball around (0, 1)
    moved = shifted_terminal_set(C1, [0, 1], [0.01, 1], geom, delta0=0.5)
    assert moved.contains([0.01, 1.2])
    assert not moved.contains([0.0, 1.2])
    # shrinking shifts converge to the unshifted set
    pts = np.array([[0.0, 1.0 + 0.1 * k] for k in range(5)])
    gaps = [max(shifted_terminal_set(C1, [0, 1], [e, 1], geom).distance(p) for p in pts)
            for e in (1e-1, 1e-2, 1e-3)]
    assert gaps == sorted(gaps, reverse=True) and gaps[-1] == pytest.approx(1e-3)


def test_unshifted_terminal_set_is_c1(annulus):
    s = shifted_terminal_set(annulus.C1, [0, 1], [0, 1], annulus.geometry)
    assert isinstance(s, EndpointSet)
    assert s.contains([0.0, 1.5])


def test_first_inner_start(annulus, default_schedule):
    assert first_inner_start(annulus.geometry, default_schedule, [1.0, 0.0]) == 0
    # a start already deep inside never moves, and lies in C(k) once alpha_k is small enough
    k = first_inner_start(annulus.geometry, default_schedule, [1.0005, 0.0])
    assert k is not None and k > 0
    assert annulus.geometry.eval_psi([1.0005, 0.0]) <= -default_schedule.alphas[k]
    assert annulus.geometry.eval_psi([1.0005, 0.0]) > -default_schedule.alphas[k - 1]


def test_first_stage_where():
    assert first_stage_where([False, True, True]) == 1
    assert first_stage_where([True, False, True]) == 2
    assert first_stage_where([True, True, False]) is None
    assert first_stage_where([True, True]) == 0
