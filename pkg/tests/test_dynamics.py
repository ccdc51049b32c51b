import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from sweepopt.controls import GridControl
from sweepopt.dynamics import (Trajectory, catching_up_step_limit, cell_xi_means, integrate_catching_up,
                               integrate_penalized, invariant_summary, penalty_rhs, reconstruct_xi,
                               refinement_slope, sup_error, weak_errors, xi_proxy)
from sweepopt.errors import GridMismatch, OutsideProxRadius
from sweepopt.instance import builtin
from sweepopt.schedule import shift_initial_point

from conftest import unit_circle


def start(inst, gamma):
    rho = math.log(inst.geometry.eta * gamma / (2 * inst.M_bar)) / gamma / inst.geometry.eta
    return shift_initial_point(inst.geometry, [1.0, 0.0], rho)


def test_penalty_rhs_on_boundary(annulus):
    gamma = 7.0
    rhs = penalty_rhs(annulus, 0.0, [1.0, 0.0], [0.0], gamma)
    np.testing.assert_allclose(rhs, np.array([-1.0, 1.0]) + 6 * gamma * np.array([1.0, 0.0]))


def test_penalty_rhs_deep_interior():
    inst = builtin("interior_drift")
    x = np.zeros(2)
    assert inst.geometry.eval_psi(x) == -100.0
    rhs = penalty_rhs(inst, 0.0, x, [0.2], 100.0)
    np.testing.assert_array_equal(rhs, inst.f_phi(0.0, x, [0.2]))


def test_penalty_rhs_clamps_exponent(annulus):
    # far outside: gamma psi would overflow without the clamp
    rhs = penalty_rhs(annulus, 0.0, [0.1, 0.0], [0.0], 1e3)
    assert np.all(np.isfinite(rhs))


def test_reference_control_reaches_top(annulus, reference_control):
    u = reference_control(2000)
    traj = integrate_penalized(annulus, start(annulus, 1e4), u, 1e4)
    assert np.linalg.norm(traj.x_end - [0.0, 1.0]) <= 0.02
    assert traj.states[:, 0].max() < 1.01
    assert sup_error(traj, unit_circle) <= 0.02


def test_interior_straight_line():
    inst = builtin("interior_drift")
    g = inst.grid(200)
    u = GridControl(g, np.full((201, 1), 0.5))
    traj = integrate_penalized(inst, np.zeros(2), u, 50.0)
    exact = g[:, None] * (np.array([1.0, 0.5]) + np.array([0.0, 0.5]))[None, :]
    assert np.abs(traj.states - exact).max() <= 1e-10
    # clamped exponent leaves only a subnormal residue
    assert traj.xi.max() <= 1e-300


def test_grid_mismatch(annulus, reference_control):
    with pytest.raises(GridMismatch):
        integrate_penalized(annulus, [1.1, 0], reference_control(10), 100.0, grid=annulus.grid(20))


def test_invariants_across_schedule(annulus, default_schedule, reference_control):
    u = reference_control(2000)
    geom = annulus.geometry
    for gamma in default_schedule.gammas:
        traj = integrate_penalized(annulus, start(annulus, gamma), u, gamma)
        s = invariant_summary(annulus, traj)
        assert s["max_psi"] <= geom.bdry_tol
        assert 0.0 <= s["min_xi"] and s["max_xi"] <= s["xi_bound"] + 1e-8
        assert s["max_speed"] <= s["speed_bound"] + 1e-6
        np.testing.assert_allclose(traj.xi, xi_proxy(annulus, traj.states, gamma))


def test_convergence_in_gamma(annulus, default_schedule, reference_control):
    u = reference_control(2000)
    errs = [sup_error(integrate_penalized(annulus, start(annulus, g), u, g), unit_circle)
            for g in default_schedule.gammas]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 0.02


def test_weak_multiplier_convergence(annulus, default_schedule, reference_control):
    u = reference_control(2000)
    gamma = default_schedule.gammas[-1]
    traj = integrate_penalized(annulus, start(annulus, gamma), u, gamma)
    assert max(weak_errors(traj.grid, traj.xi, 1 / 6)) <= 0.01
    means = cell_xi_means(annulus, traj)
    np.testing.assert_allclose(means[10:-10], 1 / 6, atol=1e-3)


def test_weak_errors_on_known_function():
    g = np.linspace(0, 1, 2001)
    errs = weak_errors(g, 1.0 + g, 1.0)
    np.testing.assert_allclose(errs, [0.5, 2 / 3, 3 / 4], rtol=1e-6)


def test_reconstruct_xi_closed_form(annulus, closed_form, reference_control):
    u = reference_control(500)
    g = u.grid
    x = np.array([closed_form.x(t) for t in g])
    v = np.column_stack([-np.sin(g), np.cos(g)])
    xi = reconstruct_xi(annulus, Trajectory(g, x, v, np.zeros(g.size)), controls=u)
    np.testing.assert_allclose(xi, 1 / 6, atol=1e-8)


def test_reconstruct_xi_interior():
    inst = builtin("interior_drift")
    g = inst.grid(50)
    u = GridControl(g, np.zeros((51, 1)))
    traj = integrate_penalized(inst, np.zeros(2), u, 50.0)
    np.testing.assert_array_equal(reconstruct_xi(inst, traj), 0.0)


def _angle_oracle(c, t_eval):
    # on the unit circle with u = t + c the angle obeys theta' = 1 + c (sin + cos)
    sol = solve_ivp(lambda t, th: 1 + c * (np.sin(th) + np.cos(th)), (0, t_eval[-1]), [0.0],
                    t_eval=t_eval, rtol=1e-12, atol=1e-12)
    return sol.y[0]


def test_offset_control_multiplier(annulus):
    c = 0.3
    g = annulus.grid(2000)
    u = GridControl(g, (g + c)[:, None])
    gamma = 1e4
    traj = integrate_penalized(annulus, start(annulus, gamma), u, gamma)
    th = _angle_oracle(c, g)
    np.testing.assert_allclose(traj.states, np.column_stack([np.cos(th), np.sin(th)]), atol=2e-3)
    expected = (1 + c * (np.cos(th) - np.sin(th))) / 6
    means = cell_xi_means(annulus, traj)
    mid = 0.5 * (expected[:-1] + expected[1:])
    assert np.abs(means[5:] - mid[5:]).max() <= 2e-3


def test_catching_up_matches_circle(annulus, reference_control):
    traj = integrate_catching_up(annulus, [1.0, 0.0], reference_control(4000))
    assert sup_error(traj, unit_circle) <= 0.02
    assert max(annulus.geometry.eval_psi(x) for x in traj.states) <= annulus.geometry.bdry_tol


def test_catching_up_step_limit(annulus, reference_control):
    limit = catching_up_step_limit(annulus)
    assert limit == pytest.approx(2.7 / (2 * 25.375 * annulus.M_bar))
    with pytest.raises(OutsideProxRadius):
        integrate_catching_up(annulus, [1.0, 0.0], reference_control(200))


def test_catching_up_is_euler_when_inactive():
    inst = builtin("interior_drift")
    g = inst.grid(100)
    u = GridControl(g, np.sin(g)[:, None])
    traj = integrate_catching_up(inst, np.zeros(2), u)
    x = np.zeros(2)
    for i in range(100):
        x = x + (g[i + 1] - g[i]) * inst.f_phi(g[i], x, u.values[i])
    np.testing.assert_allclose(traj.states[-1], x, rtol=1e-14)


def test_catching_up_refinement(annulus, reference_control):
    ns = [500, 1000, 2000, 4000]
    errs = [sup_error(integrate_catching_up(annulus, [1.0, 0.0], reference_control(n)), unit_circle)
            for n in ns]
    assert abs(refinement_slope(ns, errs) - 1.0) <= 0.3


def test_penalty_vs_catching_up(annulus, reference_control):
    u = reference_control(4000)
    cu = integrate_catching_up(annulus, [1.0, 0.0], u)
    pen = integrate_penalized(annulus, start(annulus, 1e4), u, 1e4)
    assert np.linalg.norm(cu.states - pen.states, axis=1).max() <= 0.05


def test_refinement_slope_exact():
    assert refinement_slope([10, 20, 40], [1.0, 0.25, 0.0625]) == pytest.approx(2.0)


def test_reconstructed_xi_obeys_process_bound(annulus, reference_control):
    # the sweeping process itself obeys the tighter bound M_bar / (2 eta)
    traj = integrate_catching_up(annulus, [1.0, 0.0], reference_control(4000))
    bound = annulus.M_bar / (2 * annulus.geometry.eta)
    assert traj.xi.max() <= bound + 1e-8
    assert traj.xi.min() >= 0.0
