"""Penalized problems over (x(0), u) and the continuation in gamma.

Each stage minimizes

    J = g(x(0), x(1)) + 1/2 (|u(0) - u_ref(0)|^2 + z(1) + |x(0) - x_ref(0)|^2)
        + mu d(x(1), C1(k))^2

over W^{1,2} controls with values in U(t), subject to the penalized
dynamics and ``z(1) <= delta``. Gradients are exact for the discrete map
(RK4 with frozen substep counts). Steps are Sobolev-preconditioned and
projected node by node; the terminal penalty weight ``mu`` is escalated until
the endpoint lands within ``endpoint_tol`` of C1(k).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solveh_banded

from . import backend
from .controls import GridControl, project_pointwise, sobolev_gram, z_accumulator
from .dynamics import Trajectory, cell_xi_means, integrate_penalized
from .errors import BlowUp, LeftC, Stalled
from .geometry import BoxSampler
from .instance import EndpointSet, ProblemInstance
from .schedule import PenaltySchedule, shift_initial_point, shifted_terminal_set

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class References:
    """Anchor of the proximal terms.

    ``x`` is a callable (or ``None``) giving the reference state path; in
    verification mode it is the known optimum and the localization ball
    ``sup |x - x_ref| <= delta`` is enforced.
    """

    x0: np.ndarray
    u: GridControl
    x: Optional[Callable] = None
    localize: bool = False


@dataclass(frozen=True)
class StageOptions:
    max_iter: int = 60
    stage_tol: float = 1e-7
    mu0: float = 10.0
    mu_growth: float = 10.0
    max_escalations: int = 6
    endpoint_tol: Optional[float] = None
    armijo: float = 1e-4
    max_backtracks: int = 30
    step0: float = 1.0


@dataclass
class PenalizedSolveState:
    gamma: float
    control: GridControl
    x0: np.ndarray
    trajectory: Trajectory
    z_terminal: float
    cost: float
    grad_norm: float = float("nan")
    iterations: int = 0
    mu: float = 0.0
    objective: float = float("nan")
    endpoint_distance: float = float("nan")
    terminal_set: Optional[EndpointSet] = None
    history: list = field(default_factory=list)


@dataclass
class Candidate:
    """Node values of a candidate optimum with its multipliers."""

    grid: np.ndarray
    x: np.ndarray
    u: GridControl
    xi: np.ndarray
    p: np.ndarray
    lam: float
    gamma: Optional[float] = None
    terminal_set: Optional[EndpointSet] = None
    xi_cells: Optional[np.ndarray] = None


@dataclass
class ContinuationResult:
    stages: list
    candidate: Candidate
    convergence_table: list

    def summary_rows(self):
        """Rows ``k, gamma, cost, du_sup, dx_sup, grad_norm``."""
        return [[r["k"], r["gamma"], r["cost"], r["du_sup"], r["dx_sup"], r["grad_norm"]]
                for r in self.convergence_table]


SUMMARY_HEADER = ["k", "gamma", "cost", "du_sup", "dx_sup", "grad_norm"]


# ---------------------------------------------------------------------------
# cost and gradient


def cost_J(inst: ProblemInstance, traj: Trajectory, z_terminal: float, u: GridControl,
           refs: References) -> float:
    """Proximal Mayer cost; raises GInfinite when the endpoint cost is infinite."""
    x0 = traj.states[0]
    du0 = u.values[0] - refs.u.values[0]
    dx0 = x0 - refs.x0
    return inst.cost_g(x0, traj.states[-1]) + 0.5 * (float(du0 @ du0) + z_terminal + float(dx0 @ dx0))


def terminal_penalty(x1, C1k: Optional[EndpointSet], mu: float):
    """``mu d(x1, C1k)^2`` and its gradient."""
    if C1k is None or mu == 0.0:
        return 0.0, np.zeros_like(x1)
    r = x1 - C1k.project(x1)
    return mu * float(r @ r), 2.0 * mu * r


def gradient(inst: ProblemInstance, state: PenalizedSolveState, refs: References,
             C1k: Optional[EndpointSet] = None, mu: float = 0.0, kernels=None):
    """Exact gradient of ``cost_J + mu d^2`` for the discrete map of ``state``.

    Returns ``(d/dx0, d/du)`` with the control part shaped like the node
    values.
    """
    traj = state.trajectory
    u = state.control
    model = inst.rhs_model()
    K = kernels or backend.kernels_for(model)
    x0, x1 = traj.states[0], traj.states[-1]
    g0, g1 = inst.dg(x0, x1)
    bar_xN = np.asarray(g1, dtype=float) + terminal_penalty(x1, C1k, mu)[1]
    bar_x0, bar_u = K.vjp(model, traj.grid, u.values, traj.gamma, traj.substeps, traj.states, bar_xN)
    gx0 = np.asarray(g0, dtype=float) + bar_x0 + (x0 - refs.x0)
    gu = np.array(bar_u, dtype=float)
    # 1/2 z(1) = 1/2 sum_j h_j |d_j|^2 with d_j the derivative mismatch on cell j
    d = u.derivative() - refs.u.derivative()
    gu[1:] += d
    gu[:-1] -= d
    gu[0] += u.values[0] - refs.u.values[0]
    return gx0, gu


# ---------------------------------------------------------------------------
# one stage


def _x0_projector(inst: ProblemInstance, rho: float):
    """Map onto the stage's initial set; a singleton C0 pins x(0) to the shifted point."""
    geom = inst.geometry
    if inst.C0.kind == "singleton":
        fixed = shift_initial_point(geom, inst.C0.params["point"], rho)
        return (lambda x: fixed.copy()), True

    def proj(x):
        y = inst.C0.project(x)
        return shift_initial_point(geom, y, rho)

    return proj, False


def estimate_diameter(inst: ProblemInstance, seed: int = 0, k: int = 256) -> float:
    lo, hi = inst.box if inst.box is not None else (-np.ones(inst.n), np.ones(inst.n))
    pts = BoxSampler(inst.geometry, lo, hi, seed=seed).boundary(k)
    if len(pts) < 2:
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


class _Stage:
    def __init__(self, inst, gamma, refs, C1k, proj_x0, x0_fixed, opts, kernels):
        self.inst, self.gamma, self.refs, self.C1k = inst, gamma, refs, C1k
        self.proj_x0, self.x0_fixed, self.opts = proj_x0, x0_fixed, opts
        self.kernels = kernels
        self.gram = sobolev_gram(refs.u.grid)

    def evaluate(self, x0, u: GridControl, mu: float) -> Optional[PenalizedSolveState]:
        """Integrate and score; ``None`` when the trial is infeasible."""
        inst, refs = self.inst, self.refs
        try:
            traj = integrate_penalized(inst, x0, u, self.gamma, kernels=self.kernels)
        except (BlowUp, LeftC):
            return None
        z = float(z_accumulator(u, refs.u)[-1])
        if z > inst.delta:
            return None
        if refs.localize and refs.x is not None:
            dev = max(np.linalg.norm(x - refs.x(t)) for t, x in zip(traj.grid, traj.states))
            if dev > inst.delta:
                return None
        cost = cost_J(inst, traj, z, u, refs)
        pen = terminal_penalty(traj.states[-1], self.C1k, mu)[0]
        dist = self.C1k.distance(traj.states[-1]) if self.C1k is not None else 0.0
        return PenalizedSolveState(self.gamma, u, np.asarray(x0, dtype=float), traj, z, cost,
                                   mu=mu, objective=cost + pen, endpoint_distance=dist,
                                   terminal_set=self.C1k)

    def project_u(self, values) -> GridControl:
        refs = self.refs
        trust = refs.u if refs.localize else None
        return project_pointwise(GridControl(refs.u.grid, values), self.inst.U, trust,
                                 self.inst.delta if refs.localize else None)

    def sobolev_direction(self, gu):
        return -solveh_banded(self.gram, gu)

    def sobolev_norm(self, du):
        # banded matvec of the Gram matrix
        off, diag = self.gram
        Gd = diag[:, None] * du
        Gd[1:] += off[1:, None] * du[:-1]
        Gd[:-1] += off[1:, None] * du[1:]
        return float(np.sqrt(max(np.sum(du * Gd), 0.0)))

    def descend(self, state: PenalizedSolveState, mu: float) -> PenalizedSolveState:
        opts = self.opts
        state = self.evaluate(state.x0, state.control, mu) if state.mu != mu else state
        step = opts.step0
        for it in range(opts.max_iter):
            gx0, gu = gradient(self.inst, state, self.refs, self.C1k, mu, self.kernels)
            du = self.sobolev_direction(gu)
            dx = np.zeros_like(gx0) if self.x0_fixed else -gx0
            # projected-gradient stationarity measure at unit step
            pg_u = self.project_u(state.control.values + du).values - state.control.values
            pg_x = self.proj_x0(state.x0 + dx) - state.x0
            state.grad_norm = self.sobolev_norm(pg_u) + float(np.linalg.norm(pg_x))
            state.history.append(state.objective)
            if state.grad_norm <= opts.stage_tol:
                break
            accepted = None
            s = step
            for _ in range(opts.max_backtracks):
                u_try = self.project_u(state.control.values + s * du)
                x_try = self.proj_x0(state.x0 + s * dx)
                delta_u = u_try.values - state.control.values
                slope = float(np.sum(gu * delta_u) + gx0 @ (x_try - state.x0))
                if slope < 0.0:
                    trial = self.evaluate(x_try, u_try, mu)
                    if trial is not None and trial.objective <= state.objective + opts.armijo * slope:
                        accepted = trial
                        break
                s *= 0.5
            if accepted is None:
                break
            accepted.iterations = state.iterations + 1
            accepted.history = state.history
            accepted.grad_norm = state.grad_norm
            state = accepted
            step = min(2.0 * s, 1e8)
        return state


def solve_stage(inst: ProblemInstance, gamma: float, init_x0, init_u: GridControl, refs: References,
                C1k: Optional[EndpointSet], rho: float, options: Optional[StageOptions] = None,
                kernels=None, stage_index: Optional[int] = None) -> PenalizedSolveState:
    """Projected-gradient solve of one penalized problem.

    Raises
    ------
    Stalled
        The initial point cannot be integrated, or the terminal constraint
        is still violated after every penalty escalation.
    """
    opts = options or StageOptions()
    proj_x0, fixed = _x0_projector(inst, rho)
    stage = _Stage(inst, gamma, refs, C1k, proj_x0, fixed, opts, kernels)
    tol = opts.endpoint_tol if opts.endpoint_tol is not None else 1e-4 * estimate_diameter(inst)
    mu = opts.mu0 if C1k is not None else 0.0
    x0 = proj_x0(np.asarray(init_x0, dtype=float))
    state = stage.evaluate(x0, stage.project_u(init_u.values), mu)
    if state is None:
        raise Stalled(f"initial guess infeasible at gamma={gamma:.6g}", stage_index)
    for esc in range(opts.max_escalations + 1):
        state = stage.descend(state, mu)
        log.info("gamma=%.6g mu=%.3g it=%d J=%.10g dist=%.3g |pg|=%.3g", gamma, mu, state.iterations,
                 state.objective, state.endpoint_distance, state.grad_norm)
        if C1k is None or state.endpoint_distance <= tol:
            return state
        if esc < opts.max_escalations:
            mu *= opts.mu_growth
    raise Stalled(f"terminal distance {state.endpoint_distance:.3g} above {tol:.3g} after "
                  f"{opts.max_escalations} escalations at gamma={gamma:.6g}", stage_index)


# ---------------------------------------------------------------------------
# continuation


def default_initial_control(inst: ProblemInstance, grid) -> GridControl:
    """Midpoint of ``U(t)`` for boxes, else the projection of zero."""
    from .controls import BoxSet
    vals = []
    for t in grid:
        if isinstance(inst.U, BoxSet):
            lo, hi = inst.U.bounds(t)
            vals.append(0.5 * (lo + hi))
        else:
            vals.append(inst.U.project(t, np.zeros(inst.m)))
    return GridControl(grid, np.array(vals))


def stage_terminal_set(inst: ProblemInstance, refs: References, gamma: float, rho: float, kernels=None):
    """C1(k) for the stage.

    With a known reference path, C1 is shifted by ``x_gamma_ref(1) - x_ref(1)``
    where ``x_gamma_ref`` is the penalized flow under the reference control.
    Without one there is no offset to apply and C1 itself is used.
    """
    if inst.C1.kind == "whole":
        return None
    if refs.x is None:
        return replace(inst.C1, within=inst.geometry)
    proj_x0, _ = _x0_projector(inst, rho)
    try:
        ref_traj = integrate_penalized(inst, proj_x0(refs.x0), refs.u, gamma, kernels=kernels)
    except (BlowUp, LeftC):
        return inst.C1
    xg1 = ref_traj.states[-1]
    x_bar_1 = np.asarray(refs.x(inst.t1), dtype=float)
    delta0 = inst.delta if refs.localize else None
    return shifted_terminal_set(inst.C1, x_bar_1, xg1, inst.geometry, delta0)


def adjoint_integrate_penalized(inst: ProblemInstance, traj: Trajectory, gamma: float, p_terminal,
                                kernels=None) -> np.ndarray:
    """Backward solution of the penalized adjoint equation at the grid nodes.

    ``p' = -(df_Phi/dx)^T p + gamma e H p + gamma^2 e grad psi <grad psi, p>``
    with ``e = exp(gamma psi(x))``, integrated on the substeps of ``traj``.
    """
    model = inst.rhs_model()
    K = kernels or backend.kernels_for(model)
    subs = traj.substeps
    if subs is None:
        subs = np.ones(traj.grid.size - 1, dtype=np.int64)
    p = K.adjoint(model, traj.grid, traj.controls.values, gamma, subs, traj.states,
                  np.asarray(p_terminal, dtype=float))
    if not np.all(np.isfinite(p)):
        raise BlowUp("adjoint integration produced non-finite values")
    return p


def assemble_candidate(inst: ProblemInstance, state: PenalizedSolveState, kernels=None) -> Candidate:
    """Multipliers from the final stage: xi from the penalty, p from the adjoint, lambda by normalization."""
    traj = state.trajectory
    x0, x1 = traj.states[0], traj.states[-1]
    g1 = np.asarray(inst.dg(x0, x1)[1], dtype=float)
    pen_grad = terminal_penalty(x1, state.terminal_set, state.mu)[1]
    pT = -(g1 + pen_grad)
    p = adjoint_integrate_penalized(inst, traj, state.gamma, pT, kernels)
    c = 1.0 / (float(np.linalg.norm(pT)) + 1.0)
    return Candidate(traj.grid, traj.states.copy(), state.control, traj.xi.copy(), c * p, c,
                     gamma=state.gamma, terminal_set=state.terminal_set,
                     xi_cells=cell_xi_means(inst, traj, kernels))


def continuation_solve(inst: ProblemInstance, schedule: PenaltySchedule, grid,
                       reference: Optional[tuple] = None, u_init: Optional[GridControl] = None,
                       options: Optional[StageOptions] = None, kernels=None,
                       on_stage: Optional[Callable] = None) -> ContinuationResult:
    """Solve the penalized problems along ``schedule``, warm-starting each stage.

    Parameters
    ----------
    reference : (x_fn, u_fn), optional
        Known optimum; enables verification mode (fixed anchors and
        localization). Without it every stage is anchored at the previous
        stage's solution.
    on_stage : callable, optional
        Called as ``on_stage(k, state)`` after each stage.

    Raises
    ------
    Stalled
        With ``.stage`` set to the failing stage index.
    """
    grid = np.asarray(grid, dtype=float)
    if reference is not None:
        x_fn, u_fn = reference
        u_ref = GridControl.from_function(grid, u_fn)
        refs = References(np.asarray(x_fn(grid[0]), dtype=float), u_ref, x_fn, localize=True)
        # start away from the anchor, well inside its trust ball
        if u_init is None:
            u_init = GridControl(grid, u_ref.values + 0.2 * inst.delta)
        u_cur = project_pointwise(u_init, inst.U, u_ref, inst.delta)
    else:
        u_cur = u_init if u_init is not None else default_initial_control(inst, grid)
        x_start = inst.C0.project(np.zeros(inst.n)) if inst.C0.kind != "whole" else np.zeros(inst.n)
        refs = References(np.asarray(x_start, dtype=float), u_cur)
    x_cur = refs.x0
    opts = options or StageOptions()
    stages, table = [], []
    prev = None
    for k, gamma in enumerate(schedule.gammas):
        rho = schedule.rhos[k]
        C1k = stage_terminal_set(inst, refs, gamma, rho, kernels)
        # later stages start from the terminal weight the previous stage needed
        stage_opts = opts if prev is None or prev.mu == 0.0 else replace(opts, mu0=max(opts.mu0, prev.mu))
        try:
            state = solve_stage(inst, gamma, x_cur, u_cur, refs, C1k, rho, stage_opts, kernels, stage_index=k)
        except Stalled as exc:
            exc.stage = k
            raise
        if prev is None:
            du = dx = float("nan")
        else:
            du = float(np.max(np.abs(state.control.values - prev.control.values)))
            dx = float(np.max(np.linalg.norm(state.trajectory.states - prev.trajectory.states, axis=1)))
        table.append({"k": k, "gamma": gamma, "cost": state.cost, "du_sup": du, "dx_sup": dx,
                      "grad_norm": state.grad_norm})
        stages.append(state)
        if on_stage is not None:
            on_stage(k, state)
        prev = state
        x_cur, u_cur = state.x0, state.control
        if reference is None:
            refs = replace(refs, x0=state.x0, u=state.control)
    return ContinuationResult(stages, assemble_candidate(inst, stages[-1], kernels), table)
