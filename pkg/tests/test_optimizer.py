import math

import numpy as np
import pytest

from sweepopt.certificate import continuation_candidate
from sweepopt.controls import GridControl, z_accumulator
from sweepopt.dynamics import Trajectory, integrate_penalized, reconstruct_xi
from sweepopt.optimizer import (PenalizedSolveState, References, adjoint_integrate_penalized, cost_J,
                                gradient, terminal_penalty)


def _objective(inst, g, gamma, uref, refs, C1k, mu, substeps):
    def J(x0, values):
        u = GridControl(g, values)
        traj = integrate_penalized(inst, x0, u, gamma, substeps=substeps)
        z = z_accumulator(u, uref)[-1]
        return cost_J(inst, traj, z, u, refs) + terminal_penalty(traj.states[-1], C1k, mu)[0]
    return J


@pytest.mark.parametrize("N", [1, 400])
def test_gradient_matches_central_differences(annulus, N):
    g = annulus.grid(N)
    rng = np.random.default_rng(0)
    u = GridControl(g, (g + 0.2 + 0.1 * np.sin(5 * g))[:, None])
    uref = GridControl.from_function(g, lambda t: [t])
    refs = References(np.array([1.0, 0.0]), uref)
    x0, gamma, mu = np.array([1.1, 0.05]), 10.0, 10.0
    traj = integrate_penalized(annulus, x0, u, gamma)
    J = _objective(annulus, g, gamma, uref, refs, annulus.C1, mu, traj.substeps)
    gx, gu = gradient(annulus, PenalizedSolveState(gamma, u, x0, traj, 0.0, 0.0), refs, annulus.C1, mu)
    eps = 1e-6
    for _ in range(20):
        vx = rng.normal(size=2)
        vu = rng.normal(size=u.values.shape)
        fd = (J(x0 + eps * vx, u.values + eps * vu) - J(x0 - eps * vx, u.values - eps * vu)) / (2 * eps)
        an = gx @ vx + np.sum(gu * vu)
        assert abs(fd - an) <= 1e-6 * max(abs(fd), abs(an))


def test_cost_at_anchor_is_endpoint_cost(annulus, reference_control):
    u = reference_control(200)
    traj = integrate_penalized(annulus, [1.0, 0.0], u, 100.0)
    refs = References(np.array([1.0, 0.0]), u)
    z = z_accumulator(u, u)[-1]
    assert z == 0.0
    assert cost_J(annulus, traj, z, u, refs) == annulus.cost_g(traj.states[0], traj.states[-1])
    shifted = GridControl(u.grid, u.values + 0.3)
    assert cost_J(annulus, traj, z_accumulator(shifted, u)[-1], shifted, refs) == pytest.approx(
        annulus.cost_g(traj.states[0], traj.states[-1]) + 0.5 * 0.09)


def test_terminal_penalty(annulus):
    val, grad = terminal_penalty(np.array([0.0, 1.5]), annulus.C1, 4.0)
    d = annulus.C1.distance(np.array([0.0, 1.5]))
    assert val == pytest.approx(4.0 * d * d)
    assert np.linalg.norm(grad) == pytest.approx(8.0 * d)
    assert terminal_penalty(np.ones(2), None, 4.0)[0] == 0.0


def test_adjoint_is_linear(annulus, reference_control):
    traj = integrate_penalized(annulus, [1.001, 0.0], reference_control(300), 500.0)
    a = adjoint_integrate_penalized(annulus, traj, 500.0, [1.0, 0.0])
    b = adjoint_integrate_penalized(annulus, traj, 500.0, [0.0, 1.0])
    c = adjoint_integrate_penalized(annulus, traj, 500.0, [2.0, -3.0])
    np.testing.assert_allclose(c, 2 * a - 3 * b, atol=1e-10)


def test_continuation_candidate_shape(annulus, continuation_2000):
    cand = continuation_2000.candidate
    assert cand.x.shape == (2001, 2) and cand.p.shape == (2001, 2)
    assert cand.xi_cells.shape == (2000,)
    assert 0.0 < cand.lam <= 1.0
    assert len(continuation_2000.convergence_table) == 8
    costs = [r["cost"] for r in continuation_2000.convergence_table]
    assert all(np.isfinite(costs))


def test_candidate_xi_matches_reconstruction(annulus, continuation_2000):
    cand = continuation_2000.candidate
    g = cand.grid
    band = continuation_candidate(annulus, g, cand.x, cand.u, cand.xi, cand.p, cand.lam, cand.gamma).band
    v = np.gradient(cand.x, g, axis=0)
    rec = reconstruct_xi(annulus, Trajectory(g, cand.x, v, cand.xi), band=band, controls=cand.u)
    # compare away from the initial layer, on nodes inside the band
    near = np.array([annulus.geometry.eval_psi(x) >= -band for x in cand.x])
    near[: 20] = False
    near[-2:] = False
    assert near.sum() > 1000
    assert np.abs(rec[near] - cand.xi[near]).max() <= 0.05


def test_continuation_reaches_optimum(continuation_2000):
    cand = continuation_2000.candidate
    g = cand.grid
    assert np.abs(cand.u.values[:, 0] - g).max() <= 0.02
    circle = np.column_stack([np.cos(g), np.sin(g)])
    assert np.linalg.norm(cand.x - circle, axis=1).max() <= 0.02
    assert math.isclose(cand.gamma, continuation_2000.convergence_table[-1]["gamma"])
