"""Pure-Python integration kernels.

Reference implementation of the three hot loops; the compiled module
``_ckernels`` mirrors it step for step for :class:`AffineRadialModel`
instances. Works with any model exposing ``f_phi``, ``jac_x``, ``jac_u``,
``psi``, ``grad`` and ``hess``.

Status codes returned by :func:`forward`: 0 success, 1 step control
failed, 2 non-finite state.
"""

import math

import numpy as np

EXP_LO = -745.0
EXP_HI = 50.0
MAX_SUBSTEPS = 1 << 22


def _pen(model, gamma, x):
    """Return ``(e, psi, grad)`` with ``e = exp(clip(gamma psi))``."""
    ps = float(model.psi(x))
    gr = np.asarray(model.grad(x), dtype=float)
    e = math.exp(min(max(gamma * ps, EXP_LO), EXP_HI))
    return e, ps, gr


def _rhs(model, gamma, t, x, u):
    e, _, gr = _pen(model, gamma, x)
    fp = np.asarray(model.f_phi(t, x, u), dtype=float)
    return fp - gamma * e * gr, fp, e, gr


def _jt(model, gamma, t, x, u, v):
    """``(dF/dx)^T v`` and ``(dF/du)^T v`` for the penalized right-hand side."""
    e, _, gr = _pen(model, gamma, x)
    H = np.asarray(model.hess(x), dtype=float)
    Jx = np.asarray(model.jac_x(t, x, u), dtype=float)
    Ju = np.asarray(model.jac_u(t, x, u), dtype=float)
    gx = Jx.T @ v - gamma * e * (H @ v + gamma * gr * float(gr @ v))
    return gx, Ju.T @ v


def _stiffness(model, gamma, t, x, u):
    e, _, gr = _pen(model, gamma, x)
    H = np.asarray(model.hess(x), dtype=float)
    Jx = np.asarray(model.jac_x(t, x, u), dtype=float)
    return gamma * e * (gamma * float(gr @ gr) + float(np.sqrt(np.sum(H * H)))) + float(np.sqrt(np.sum(Jx * Jx)))


def _rk4(model, gamma, tau, hs, y, u1, u2, u4):
    """One RK4 step; also returns the RK4 quadrature of ``xi`` over the step."""
    k1, fp, e, gr = _rhs(model, gamma, tau, y, u1)
    k2, _, e2, _ = _rhs(model, gamma, tau + 0.5 * hs, y + 0.5 * hs * k1, u2)
    k3, _, e3, _ = _rhs(model, gamma, tau + 0.5 * hs, y + 0.5 * hs * k2, u2)
    k4, _, e4, _ = _rhs(model, gamma, tau + hs, y + hs * k3, u4)
    y_new = y + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    p0 = gamma * e * float(np.sqrt(gr @ gr))
    xq = (hs / 6.0) * gamma * (e + 2.0 * e2 + 2.0 * e3 + e4)
    return y_new, p0, float(np.sqrt(fp @ fp)), xq


def _lerp(ua, ub, w):
    return ua + w * (ub - ua)


def _substeps_of(model, gamma, t_i, h, m, y, ua, ub):
    """Run ``m`` RK4 substeps over one cell, returning every substep state."""
    hs = h / m
    ys = np.empty((m + 1, y.size))
    ys[0] = y
    for s in range(m):
        tau = t_i + s * hs
        ys[s + 1] = _rk4(model, gamma, tau, hs, ys[s], _lerp(ua, ub, s / m),
                         _lerp(ua, ub, (s + 0.5) / m), _lerp(ua, ub, (s + 1.0) / m))[0]
    return ys


def forward(model, grid, x0, u, gamma, substeps=None, c_stab=1.5, rel_change=0.1, c_max=2.5):
    """Integrate the penalized system over ``grid`` with RK4 substeps.

    With ``substeps=None`` each cell starts from ``ceil(h sigma / c_stab)``
    substeps and doubles until every substep keeps ``hs sigma <= c_max`` and
    changes the penalty magnitude by at most ``rel_change``. Passing the
    returned counts back freezes the discrete map (used for gradients).
    """
    # rejected trial steps may overflow; they are caught by the acceptance tests
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(model, grid, x0, u, gamma, substeps, c_stab, rel_change, c_max)


def _forward(model, grid, x0, u, gamma, substeps, c_stab, rel_change, c_max):
    grid = np.asarray(grid, dtype=float)
    u = np.asarray(u, dtype=float)
    N = grid.size - 1
    n = np.asarray(x0).size
    states = np.empty((N + 1, n))
    states[0] = x0
    subs = np.empty(N, dtype=np.int64)
    fixed = substeps is not None
    for i in range(N):
        t_i = grid[i]
        h = grid[i + 1] - t_i
        ua, ub = u[i], u[i + 1]
        x = states[i]
        if fixed:
            m = int(substeps[i])
        else:
            sig = _stiffness(model, gamma, t_i, x, ua)
            m = max(1, int(math.ceil(h * sig / c_stab)))
        while True:
            hs = h / m
            y = x.copy()
            ok = True
            for s in range(m):
                tau = t_i + s * hs
                y_new, p0, fn, _ = _rk4(model, gamma, tau, hs, y, _lerp(ua, ub, s / m),
                                     _lerp(ua, ub, (s + 0.5) / m), _lerp(ua, ub, (s + 1.0) / m))
                if not np.all(np.isfinite(y_new)):
                    if fixed:
                        return states, subs, 2
                    ok = False
                    break
                if not fixed:
                    e1, _, g1 = _pen(model, gamma, y_new)
                    p1 = gamma * e1 * float(np.sqrt(g1 @ g1))
                    sig1 = _stiffness(model, gamma, tau + hs, y_new, ua)
                    # stiff stages can overshoot into the deep interior; bound the displacement too
                    step = float(np.linalg.norm(y_new - y))
                    if not (abs(p1 - p0) <= rel_change * max(p0, 0.1 * fn + 1e-8) and hs * sig1 <= c_max
                            and step <= 2.0 * hs * (fn + max(p0, p1))):
                        ok = False
                        break
                y = y_new
            if ok:
                break
            m *= 2
            if m > MAX_SUBSTEPS:
                return states, subs, 1
        states[i + 1] = y
        subs[i] = m
    return states, subs, 0


def xi_integrals(model, grid, states, u, gamma, substeps):
    """``int xi dt`` over each cell, replayed from node states with frozen substeps."""
    grid = np.asarray(grid, dtype=float)
    u = np.asarray(u, dtype=float)
    N = grid.size - 1
    out = np.zeros(N)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            h = grid[i + 1] - grid[i]
            m = int(substeps[i])
            hs = h / m
            ua, ub = u[i], u[i + 1]
            y = np.asarray(states[i], dtype=float)
            for s in range(m):
                y, _, _, xq = _rk4(model, gamma, grid[i] + s * hs, hs, y, _lerp(ua, ub, s / m),
                                   _lerp(ua, ub, (s + 0.5) / m), _lerp(ua, ub, (s + 1.0) / m))
                out[i] += xq
    return out


def vjp(model, grid, u, gamma, substeps, states, bar_xN):
    """Pull the terminal cotangent back to ``(bar_x0, bar_u)`` through every RK4 substep."""
    grid = np.asarray(grid, dtype=float)
    u = np.asarray(u, dtype=float)
    N = grid.size - 1
    bar_u = np.zeros_like(u)
    a = np.asarray(bar_xN, dtype=float).copy()
    for i in range(N - 1, -1, -1):
        t_i = grid[i]
        h = grid[i + 1] - t_i
        m = int(substeps[i])
        hs = h / m
        ua, ub = u[i], u[i + 1]
        ys = _substeps_of(model, gamma, t_i, h, m, states[i], ua, ub)
        for s in range(m - 1, -1, -1):
            tau = t_i + s * hs
            w1, w2, w4 = s / m, (s + 0.5) / m, (s + 1.0) / m
            u1, u2, u4 = _lerp(ua, ub, w1), _lerp(ua, ub, w2), _lerp(ua, ub, w4)
            y1 = ys[s]
            k1 = _rhs(model, gamma, tau, y1, u1)[0]
            y2 = y1 + 0.5 * hs * k1
            k2 = _rhs(model, gamma, tau + 0.5 * hs, y2, u2)[0]
            y3 = y1 + 0.5 * hs * k2
            k3 = _rhs(model, gamma, tau + 0.5 * hs, y3, u2)[0]
            y4 = y1 + hs * k3
            gk4 = (hs / 6.0) * a
            gy4, gu4 = _jt(model, gamma, tau + hs, y4, u4, gk4)
            gk3 = (hs / 3.0) * a + hs * gy4
            gy3, gu3 = _jt(model, gamma, tau + 0.5 * hs, y3, u2, gk3)
            gk2 = (hs / 3.0) * a + 0.5 * hs * gy3
            gy2, gu2 = _jt(model, gamma, tau + 0.5 * hs, y2, u2, gk2)
            gk1 = (hs / 6.0) * a + 0.5 * hs * gy2
            gy1, gu1 = _jt(model, gamma, tau, y1, u1, gk1)
            a = a + gy1 + gy2 + gy3 + gy4
            gmid = gu2 + gu3
            bar_u[i] += (1 - w1) * gu1 + (1 - w2) * gmid + (1 - w4) * gu4
            bar_u[i + 1] += w1 * gu1 + w2 * gmid + w4 * gu4
    return a, bar_u


def adjoint(model, grid, u, gamma, substeps, states, p_terminal):
    """Backward RK4 for ``p' = -(dF/dx)^T p`` along the stored trajectory.

    Midpoint states come from cubic Hermite interpolation of the substep
    states.
    """
    grid = np.asarray(grid, dtype=float)
    u = np.asarray(u, dtype=float)
    N = grid.size - 1
    n = states.shape[1]
    p_out = np.empty((N + 1, n))
    p = np.asarray(p_terminal, dtype=float).copy()
    p_out[N] = p
    for i in range(N - 1, -1, -1):
        t_i = grid[i]
        h = grid[i + 1] - t_i
        m = int(substeps[i])
        hs = h / m
        ua, ub = u[i], u[i + 1]
        ys = _substeps_of(model, gamma, t_i, h, m, states[i], ua, ub)
        for s in range(m - 1, -1, -1):
            tau = t_i + s * hs
            u0, um, u1 = _lerp(ua, ub, s / m), _lerp(ua, ub, (s + 0.5) / m), _lerp(ua, ub, (s + 1.0) / m)
            y0, y1 = ys[s], ys[s + 1]
            F0 = _rhs(model, gamma, tau, y0, u0)[0]
            F1 = _rhs(model, gamma, tau + hs, y1, u1)[0]
            ym = 0.5 * (y0 + y1) + (hs / 8.0) * (F0 - F1)
            g1 = -_jt(model, gamma, tau + hs, y1, u1, p)[0]
            g2 = -_jt(model, gamma, tau + 0.5 * hs, ym, um, p - 0.5 * hs * g1)[0]
            g3 = -_jt(model, gamma, tau + 0.5 * hs, ym, um, p - 0.5 * hs * g2)[0]
            g4 = -_jt(model, gamma, tau, y0, u0, p - hs * g3)[0]
            p = p - (hs / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        p_out[i] = p
    return p_out
