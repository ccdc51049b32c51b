"""Penalized and catching-up integration of the controlled sweeping process.

The penalized system replaces the normal-cone reaction by
``gamma exp(gamma psi(x)) grad psi(x)``; along its solutions that intensity
is the multiplier proxy ``xi``. The catching-up scheme projects an explicit
Euler step back onto C and serves as an independent reference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import backend
from ._pykernels import EXP_HI, EXP_LO
from .controls import GridControl
from .errors import BlowUp, GridMismatch, LeftC, NonFinite, OutsideProxRadius, ZeroGradientOnBoundary
from .geometry import Region
from .instance import ProblemInstance


@dataclass(frozen=True)
class Trajectory:
    """State path on a grid with node velocities and the multiplier track.

    ``velocities[i]`` is the right derivative at ``grid[i]``; the last row
    is the left derivative at the final node.
    """

    grid: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    xi: np.ndarray
    controls: Optional[GridControl] = None
    substeps: Optional[np.ndarray] = None
    gamma: Optional[float] = None

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def x_end(self) -> np.ndarray:
        return self.states[-1]

    def __call__(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.grid, self.states[:, j]) for j in range(self.n)])


def _exp_clamped(z):
    return np.exp(np.clip(z, EXP_LO, EXP_HI))


def penalty_rhs(inst: ProblemInstance, t: float, x, u, gamma: float) -> np.ndarray:
    """``f_Phi(t,x,u) - gamma exp(gamma psi(x)) grad psi(x)``."""
    x = np.asarray(x, dtype=float)
    geom = inst.geometry
    e = float(_exp_clamped(gamma * geom.eval_psi(x)))
    out = inst.f_phi(t, x, u) - gamma * e * np.asarray(geom.grad_psi(x), dtype=float)
    if not np.all(np.isfinite(out)):
        raise NonFinite(f"penalized right-hand side is not finite at t={t}")
    return out


def xi_proxy(inst: ProblemInstance, states: np.ndarray, gamma: float) -> np.ndarray:
    psi = np.array([inst.geometry.eval_psi(x) for x in states])
    return gamma * _exp_clamped(gamma * psi)


def integrate_penalized(inst: ProblemInstance, x0, u: GridControl, gamma: float, grid=None,
                        substeps=None, kernels=None, **step_opts) -> Trajectory:
    """Integrate the penalized system from ``x0`` under the control ``u``.

    Parameters
    ----------
    grid : array, optional
        Output nodes; defaults to ``u.grid`` and must coincide with it.
    substeps : array of int, optional
        Frozen RK4 substep counts per cell (as returned in a previous
        ``Trajectory``); when omitted they are chosen adaptively.
    kernels : module, optional
        Kernel backend; by default chosen by :mod:`sweepopt.backend`.

    Raises
    ------
    BlowUp
        Step-size control failed or the state became non-finite.
    LeftC
        A grid node lies outside the boundary band of C.
    """
    grid = u.grid if grid is None else np.asarray(grid, dtype=float)
    if grid.shape != u.grid.shape or not np.array_equal(grid, u.grid):
        raise GridMismatch("control grid differs from the integration grid")
    model = inst.rhs_model()
    K = kernels or backend.kernels_for(model)
    x0 = np.asarray(x0, dtype=float)
    states, subs, status = K.forward(model, grid, x0, u.values, float(gamma), substeps, **step_opts)
    if status == 1:
        raise BlowUp(f"step-size control failed at gamma={gamma:.6g}")
    if status == 2 or not np.all(np.isfinite(states)):
        raise BlowUp(f"non-finite state at gamma={gamma:.6g}")
    geom = inst.geometry
    psi = np.array([geom.eval_psi(x) for x in states])
    bad = np.nonzero(psi > geom.bdry_tol)[0]
    if bad.size:
        i = int(bad[0])
        raise LeftC(f"psi={psi[i]:.3g} at t={grid[i]:.6g} exceeds the boundary band")
    xi = gamma * _exp_clamped(gamma * psi)
    vel = np.array([model.f_phi(t, x, uv) for t, x, uv in zip(grid, states, u.values)])
    vel -= xi[:, None] * np.array([model.grad(x) for x in states])
    return Trajectory(grid, states, vel, xi, u, np.asarray(subs), float(gamma))


def cell_xi_means(inst: ProblemInstance, traj: Trajectory, kernels=None) -> np.ndarray:
    """Cell averages ``(1/h) int xi_gamma dt`` resolved on the frozen substeps of ``traj``.

    Node values of ``xi_gamma`` miss boundary layers shorter than a cell;
    the averages do not.
    """
    if traj.substeps is None or traj.gamma is None or traj.controls is None:
        raise ValueError("cell averages need a penalized trajectory with its substeps")
    model = inst.rhs_model()
    K = kernels or backend.kernels_for(model)
    ints = K.xi_integrals(model, traj.grid, traj.states, traj.controls.values, traj.gamma, traj.substeps)
    return np.asarray(ints) / np.diff(traj.grid)


def reconstruct_xi(inst: ProblemInstance, traj: Trajectory, band: Optional[float] = None,
                   controls: Optional[GridControl] = None) -> np.ndarray:
    """Recover the sweeping multiplier from velocities.

    Zero on the deep interior, ``||xdot - f_Phi|| / ||grad psi||`` elsewhere.
    ``band`` widens the boundary band used for the classification.
    """
    u = controls if controls is not None else traj.controls
    if u is None:
        raise ValueError("a control is needed to evaluate f")
    geom = inst.geometry
    out = np.zeros(traj.grid.size)
    for i, (t, x, v) in enumerate(zip(traj.grid, traj.states, traj.velocities)):
        if geom.classify(x, band) is Region.DEEP_INTERIOR:
            continue
        g = np.asarray(geom.grad_psi(x), dtype=float)
        ng = float(np.linalg.norm(g))
        if ng == 0.0:
            raise ZeroGradientOnBoundary(f"grad psi vanishes at t={t:.6g}")
        out[i] = float(np.linalg.norm(v - inst.f_phi(t, x, u.values[i]))) / ng
    return out


def catching_up_step_limit(inst: ProblemInstance) -> float:
    """Largest step keeping ``h M_bar`` below half the prox radius."""
    geom = inst.geometry
    return geom.eta / (2.0 * geom.m_psi * inst.M_bar)


def integrate_catching_up(inst: ProblemInstance, x0, u: GridControl, grid=None) -> Trajectory:
    """Moreau catching-up scheme ``x_{i+1} = proj_C(x_i + h f_Phi(t_i, x_i, u_i))``.

    Velocities are forward differences (left difference at the last node);
    ``xi`` is recovered with :func:`reconstruct_xi`.
    """
    grid = u.grid if grid is None else np.asarray(grid, dtype=float)
    if grid.shape != u.grid.shape or not np.array_equal(grid, u.grid):
        raise GridMismatch("control grid differs from the integration grid")
    h = np.diff(grid)
    limit = catching_up_step_limit(inst)
    if h.max() >= limit:
        raise OutsideProxRadius(f"step {h.max():.3g} is not below {limit:.3g} = eta / (2 M_psi M_bar)")
    geom = inst.geometry
    N = grid.size - 1
    states = np.empty((N + 1, inst.n))
    states[0] = np.asarray(x0, dtype=float)
    for i in range(N):
        y = states[i] + h[i] * inst.f_phi(grid[i], states[i], u.values[i])
        states[i + 1] = geom.project_onto_C(y)
    vel = np.empty_like(states)
    vel[:-1] = np.diff(states, axis=0) / h[:, None]
    vel[-1] = vel[-2] if N > 1 else vel[0]
    traj = Trajectory(grid, states, vel, np.zeros(N + 1), u)
    xi = reconstruct_xi(inst, traj)
    return Trajectory(grid, states, vel, xi, u)


def invariant_summary(inst: ProblemInstance, traj: Trajectory) -> dict:
    """Maxima of psi, xi and speed together with the bounds they must obey."""
    geom = inst.geometry
    psi = np.array([geom.eval_psi(x) for x in traj.states])
    speed = np.linalg.norm(traj.velocities, axis=1)
    thr = 2.0 * inst.M_bar / geom.eta
    return {
        "max_psi": float(psi.max()),
        "min_xi": float(traj.xi.min()),
        "max_xi": float(traj.xi.max()),
        "max_speed": float(speed.max()),
        "xi_bound": thr,
        "speed_bound": inst.M_bar + thr * geom.m_psi_bar,
    }


def weak_errors(grid, xi, target: float, powers=(0, 1, 2)) -> list:
    """``|int (xi - target) t^k dt| / int |t^k| dt`` for each power ``k`` (trapezoid rule)."""
    out = []
    for k in powers:
        h = grid ** k
        num = abs(float(np.trapezoid((xi - target) * h, grid)))
        den = float(np.trapezoid(np.abs(h), grid))
        out.append(num / den)
    return out


def sup_error(traj: Trajectory, ref) -> float:
    """``max_i ||x(t_i) - ref(t_i)||``."""
    return float(max(np.linalg.norm(x - np.asarray(ref(t))) for t, x in zip(traj.grid, traj.states)))


def refinement_slope(ns, errs) -> float:
    """Least-squares slope of ``log err`` against ``log h`` (``h ~ 1/N``)."""
    x = -np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errs, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


__all__ = [
    "Trajectory", "penalty_rhs", "xi_proxy", "integrate_penalized", "cell_xi_means", "reconstruct_xi",
    "integrate_catching_up", "catching_up_step_limit", "invariant_summary", "weak_errors",
    "sup_error", "refinement_slope",
]
