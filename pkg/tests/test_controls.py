import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sweepopt.controls import (BallSet, BoxSet, GridControl, project_pointwise, sobolev_gram, w12_distance,
                               z_accumulator)
from sweepopt.errors import EmptyIntersection, GridMismatch

GRID = np.linspace(0, 1, 101)


def ctrl(fn, grid=GRID):
    return GridControl.from_function(grid, fn)


def test_w12_distance_examples():
    u = ctrl(lambda t: t)
    assert w12_distance(u, u) == (0.0, 0.0)
    sup, d2 = w12_distance(u, ctrl(lambda t: t + 0.3))
    assert sup == pytest.approx(0.3) and d2 == pytest.approx(0.0, abs=1e-12)
    sup, d2 = w12_distance(u, ctrl(lambda t: 2 * t))
    assert sup == pytest.approx(1.0) and d2 == pytest.approx(1.0)


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        w12_distance(ctrl(lambda t: t), ctrl(lambda t: t, np.linspace(0, 1, 11)))
    with pytest.raises(GridMismatch):
        GridControl(GRID, np.zeros(5))


def test_z_accumulator():
    u = ctrl(lambda t: t)
    np.testing.assert_array_equal(z_accumulator(u, u), 0.0)
    z = z_accumulator(ctrl(lambda t: 2 * t), u)
    assert z[0] == 0.0 and z[-1] == pytest.approx(1.0)
    np.testing.assert_allclose(z, GRID, atol=1e-12)


def test_w12_norm():
    u = ctrl(lambda t: 2 * t)
    assert u.w12_norm() == pytest.approx(2.0 + 2.0)
    np.testing.assert_allclose(u(0.505), [1.01])


def test_project_interval(annulus):
    g = np.array([0.0, 0.5, 1.0])
    u = GridControl(g, [[0.0], [0.0], [2.0]])
    np.testing.assert_allclose(project_pointwise(u, annulus.U).values[:, 0], [0.0, 0.5, 2.0])
    trust = GridControl(g, g[:, None])
    out = project_pointwise(GridControl(g, np.full((3, 1), math.pi)), annulus.U, trust, 0.1)
    np.testing.assert_allclose(out.values[:, 0], g + 0.1)


def test_project_empty_intersection(annulus):
    g = np.array([0.0, 1.0])
    trust = GridControl(g, [[-1.0], [-1.0]])
    with pytest.raises(EmptyIntersection):
        project_pointwise(GridControl(g, [[0.0], [0.0]]), annulus.U, trust, 0.1)


def test_ball_set_and_dykstra():
    U = BallSet(center=lambda t: np.zeros(2), radius=lambda t: 1.0)
    g = np.array([0.0, 1.0])
    u = GridControl(g, [[3.0, 0.0], [0.0, 0.5]])
    np.testing.assert_allclose(project_pointwise(u, U).values, [[1.0, 0.0], [0.0, 0.5]])
    trust = GridControl(g, [[1.0, 1.0], [1.0, 1.0]])
    out = project_pointwise(u, U, trust, 0.5)
    for v, c in zip(out.values, trust.values):
        assert np.linalg.norm(v) <= 1 + 1e-8 and np.linalg.norm(v - c) <= 0.5 + 1e-8
    assert U.support(0.0, np.array([3.0, 4.0])) == pytest.approx(5.0)


def test_box_support():
    U = BoxSet(lo=lambda t: np.array([t]), hi=lambda t: np.array([math.pi]))
    assert U.support(0.2, np.array([-1.0])) == pytest.approx(-0.2)
    assert U.support(0.2, np.array([2.0])) == pytest.approx(2 * math.pi)


def test_sobolev_gram_is_w12_inner_product():
    g = np.linspace(0, 1, 21)
    off, diag = sobolev_gram(g)
    G = np.diag(diag) + np.diag(off[1:], 1) + np.diag(off[1:], -1)
    v = np.sin(3 * g)
    u = GridControl(g, v)
    h = np.diff(g)
    lumped = np.sum(np.concatenate([[h[0] / 2], (h[:-1] + h[1:]) / 2, [h[-1] / 2]]) * v * v)
    assert v @ G @ v == pytest.approx(lumped + u.deriv_l2_norm() ** 2, rel=1e-12)


vals = arrays(np.float64, 21, elements=st.floats(-3, 3))


@settings(max_examples=60, deadline=None)
@given(vals, vals, vals)
def test_triangle_inequality(a, b, c):
    g = np.linspace(0, 1, 21)
    u, v, w = GridControl(g, a), GridControl(g, b), GridControl(g, c)
    uv, vw, uw = w12_distance(u, v), w12_distance(v, w), w12_distance(u, w)
    for k in range(2):
        assert uw[k] <= uv[k] + vw[k] + 1e-9


@settings(max_examples=60, deadline=None)
@given(vals, vals)
def test_z_matches_derivative_distance(a, b):
    g = np.linspace(0, 1, 21)
    u, v = GridControl(g, a), GridControl(g, b)
    z1 = z_accumulator(u, v)[-1]
    d2 = w12_distance(u, v)[1] ** 2
    assert z1 == pytest.approx(d2, rel=1e-12, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(vals)
def test_projection_idempotent(a):
    U = BoxSet(lo=lambda t: np.array([t]), hi=lambda t: np.array([math.pi]))
    g = np.linspace(0, 1, 21)
    p1 = project_pointwise(GridControl(g, a), U)
    p2 = project_pointwise(p1, U)
    np.testing.assert_array_equal(p1.values, p2.values)
    assert all(U.contains(t, v) for t, v in zip(g, p1.values))
