"""Numerical check of first-order optimality conditions for a candidate.

A candidate consists of node values of the state, control and sweeping
multiplier, an adjoint path of bounded variation (node values plus atoms),
a cost multiplier ``lambda`` and a measure ``nu`` (node density plus
atoms). The conditions checked are

* nontriviality ``|p(T)| + lambda = 1``;
* admissibility ``x' = f_Phi - xi grad psi`` with ``psi(x) <= 0``;
* the measure-driven adjoint equation, cell by cell and atom by atom;
* complementary slackness of ``xi`` (zero off the boundary, and
  ``xi <grad psi, p> = 0``) and support of ``nu`` on the boundary;
* transversality at both endpoints;
* the weak maximum condition over ``U(t)``.

All pointwise conditions that hold almost everywhere are evaluated with
the left limit of ``p`` at atom nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Optional

import jsonschema
import numpy as np

from .controls import ControlSet, GridControl
from .errors import EndpointInfeasible, NegativeLambda, UnmatchedAtom, UnsupportedSetKind
from .geometry import Region
from .instance import ProblemInstance, closed_form_solution

CHECKS = ("nontriviality", "admissibility", "adjoint", "slackness_a", "slackness_b",
          "nu_support", "transversality", "weak_max")


# ---------------------------------------------------------------------------
# data types


def _atom_index(grid, t, tol=1e-9):
    i = int(np.argmin(np.abs(grid - t)))
    if abs(grid[i] - t) > tol * max(1.0, abs(t)):
        raise UnmatchedAtom(f"atom time {t} is not a grid node")
    return i


@dataclass(frozen=True)
class BVPath:
    """Right-continuous node values with jumps ``(time, jump)`` at grid nodes."""

    grid: np.ndarray
    values: np.ndarray
    atoms: tuple = ()

    def atom_indices(self) -> dict:
        return {_atom_index(self.grid, t): np.asarray(j, dtype=float) for t, j in self.atoms}

    def left_values(self) -> np.ndarray:
        """Node values with the left limit substituted at atom nodes."""
        out = np.array(self.values, dtype=float)
        for i, j in self.atom_indices().items():
            out[i] = out[i] - j
        return out

    @property
    def terminal(self) -> np.ndarray:
        return np.asarray(self.values[-1], dtype=float)

    def sup_norm(self) -> float:
        return float(max(np.abs(self.values).max(), np.abs(self.left_values()).max()))

    def scaled(self, c: float) -> "BVPath":
        return BVPath(self.grid, c * np.asarray(self.values), tuple((t, c * np.asarray(j)) for t, j in self.atoms))


@dataclass(frozen=True)
class SignedMeasure:
    """Absolutely continuous part by node density plus point masses at nodes."""

    grid: np.ndarray
    density: np.ndarray
    atoms: tuple = ()

    @staticmethod
    def zero(grid) -> "SignedMeasure":
        return SignedMeasure(np.asarray(grid), np.zeros(len(grid)))

    def atom_indices(self) -> dict:
        return {_atom_index(self.grid, t): float(m) for t, m in self.atoms}

    def scaled(self, c: float) -> "SignedMeasure":
        return SignedMeasure(self.grid, c * np.asarray(self.density), tuple((t, c * m) for t, m in self.atoms))


@dataclass(frozen=True)
class DerivativeBundle:
    """Derivative paths along the candidate, one matrix per node."""

    zeta: np.ndarray      # df/dx, (N+1, n, n)
    omega: np.ndarray     # df/du, (N+1, n, m)
    theta: np.ndarray     # Hessian of Phi, (N+1, n, n)
    vartheta: np.ndarray  # Hessian of psi, (N+1, n, n)


@dataclass
class CertCandidate:
    grid: np.ndarray
    x: np.ndarray
    u: GridControl
    xi: np.ndarray
    p: BVPath
    lam: Optional[float] = None
    nu: Optional[SignedMeasure] = None
    band: Optional[float] = None
    kind: str = "analytic"
    xi_cells: Optional[np.ndarray] = None  # cell averages of xi, when resolved below the grid


@dataclass
class CheckResult:
    residual: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual <= self.tolerance)


@dataclass
class CertificateReport:
    checks: dict
    lam: float
    p_terminal: np.ndarray
    nu_atoms: list
    band: float
    kind: str
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_json(self) -> dict:
        return {
            "overall_pass": self.passed,
            "kind": self.kind,
            "checks": {k: {"residual": float(c.residual) if np.isfinite(c.residual) else None, "tolerance": float(c.tolerance), "pass": c.passed}
                       for k, c in self.checks.items()},
            "lambda": float(self.lam),
            "p_terminal": [float(v) for v in self.p_terminal],
            "nu_atoms": [[float(t), float(m)] for t, m in self.nu_atoms],
            "band": float(self.band),
            "details": {k: float(v) for k, v in self.details.items()},
        }


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` when ``doc`` does not match the report schema."""
    jsonschema.validate(doc, certificate_schema())


def certificate_schema() -> dict:
    with resources.files("sweepopt").joinpath("schemas/certificate.schema.json").open() as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# derivative paths


def build_bundle(inst: ProblemInstance, grid, x, u: GridControl) -> DerivativeBundle:
    geom = inst.geometry
    zeta = np.array([np.asarray(inst.df_dx(t, xi, ui), dtype=float) for t, xi, ui in zip(grid, x, u.values)])
    omega = np.array([np.asarray(inst.df_du(t, xi, ui), dtype=float).reshape(inst.n, inst.m)
                      for t, xi, ui in zip(grid, x, u.values)])
    theta = np.array([np.asarray(inst.phi_ext_hess(xi), dtype=float) for xi in x])
    vartheta = np.array([np.asarray(geom.hess_psi(xi), dtype=float) for xi in x])
    return DerivativeBundle(zeta, omega, theta, vartheta)


def bundle_fd_error(inst: ProblemInstance, bundle: DerivativeBundle, grid, x, u: GridControl,
                    k: int = 10, seed: int = 0, eps: float = 1e-6) -> float:
    """Largest relative mismatch of the bundle against central differences at ``k`` nodes."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(grid), size=min(k, len(grid)), replace=False)
    worst = 0.0

    def cmp(J, fn, z):
        nonlocal worst
        fd = np.empty_like(J)
        for j in range(z.size):
            e = np.zeros_like(z)
            e[j] = eps
            fd[:, j] = (np.asarray(fn(z + e), dtype=float) - np.asarray(fn(z - e), dtype=float)) / (2 * eps)
        worst = max(worst, float(np.abs(J - fd).max() / max(np.abs(J).max(), np.abs(fd).max(), 1.0)))

    geom = inst.geometry
    for i in idx:
        t, xi, ui = grid[i], x[i], u.values[i]
        cmp(bundle.zeta[i], lambda z: inst.f(t, z, ui), xi)
        cmp(bundle.omega[i], lambda w: inst.f(t, xi, w), ui)
        cmp(bundle.theta[i], inst.phi_ext_grad, xi)
        cmp(bundle.vartheta[i], geom.grad_psi, xi)
    return worst


# ---------------------------------------------------------------------------
# individual checks


def check_nontriviality(p: BVPath, lam: float) -> float:
    if lam < 0:
        raise NegativeLambda(f"lambda={lam} is negative")
    return abs(float(np.linalg.norm(p.terminal)) + lam - 1.0)


def check_admissibility(inst: ProblemInstance, grid, x, u: GridControl, xi, xi_cells=None) -> tuple:
    """``(ode_residual, max(0, max psi), max(0, -min xi))``.

    The ODE residual is taken cell by cell in integral form,
    ``|dx / h - mean f_Phi + mean xi grad psi|`` with trapezoid means, so
    a multiplier concentrated inside one cell is measured by its mass.
    ``xi_cells`` supplies those cell means of ``xi`` directly.
    """
    geom = inst.geometry
    grid = np.asarray(grid, dtype=float)
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    h = np.diff(grid)
    fp = np.array([inst.f_phi(t, xv, uv) for t, xv, uv in zip(grid, x, u.values)])
    gr = np.array([geom.grad_psi(xv) for xv in x], dtype=float)
    if xi_cells is None:
        react = 0.5 * (xi[:-1, None] * gr[:-1] + xi[1:, None] * gr[1:])
    else:
        react = np.asarray(xi_cells, dtype=float)[:, None] * 0.5 * (gr[:-1] + gr[1:])
    r = np.diff(x, axis=0) / h[:, None] - 0.5 * (fp[:-1] + fp[1:]) + react
    ode = float(np.linalg.norm(r, axis=1).max()) if len(h) else 0.0
    psi_max = max(geom.eval_psi(xv) for xv in x)
    neg = max(0.0, -float(xi.min()))
    if xi_cells is not None:
        neg = max(neg, -float(np.min(xi_cells)))
    return ode, max(0.0, float(psi_max)), neg


def _adjoint_field(bundle: DerivativeBundle, xi, p):
    """``(theta - zeta^T) p + xi vartheta p`` at each node."""
    M = bundle.theta - np.transpose(bundle.zeta, (0, 2, 1)) + xi[:, None, None] * bundle.vartheta
    return np.einsum("kij,kj->ki", M, p)


def check_adjoint(inst: ProblemInstance, grid, x, xi, p: BVPath, nu: SignedMeasure,
                  bundle: DerivativeBundle) -> tuple:
    """``(cell_residual, atom_residual)``.

    Cell residual: ``|dp_ac - int F dt - int grad psi dnu_ac|`` per cell
    with trapezoid quadrature, using left limits at atom nodes. Atom
    residual: ``|jump_p - grad psi nu({tau})|``.
    """
    pa, na = p.atom_indices(), nu.atom_indices()
    if set(pa) != set(na):
        raise UnmatchedAtom(f"adjoint atoms at nodes {sorted(pa)} but measure atoms at {sorted(na)}")
    geom = inst.geometry
    grads = np.array([geom.grad_psi(xv) for xv in x])
    right = np.asarray(p.values, dtype=float)
    left = p.left_values()
    F_right = _adjoint_field(bundle, xi, right)
    F_left = _adjoint_field(bundle, xi, left)
    h = np.diff(grid)
    dens = np.asarray(nu.density, dtype=float)
    G = grads * dens[:, None]
    inc = left[1:] - right[:-1]
    quad = 0.5 * h[:, None] * (F_right[:-1] + F_left[1:])
    meas = 0.5 * h[:, None] * (G[:-1] + G[1:])
    cell = float(np.linalg.norm(inc - quad - meas, axis=1).max()) if len(h) else 0.0
    atom = 0.0
    for i, jump in pa.items():
        atom = max(atom, float(np.linalg.norm(jump - grads[i] * na[i])))
    return cell, atom


def _band(inst, band):
    return inst.geometry.bdry_tol if band is None else band


def check_slackness(inst: ProblemInstance, x, xi, p: BVPath, band: Optional[float] = None) -> tuple:
    """``(max xi off the boundary band, max |xi <grad psi, p>|)``."""
    geom = inst.geometry
    b = _band(inst, band)
    left = p.left_values()
    res_a = res_b = 0.0
    for xv, s, pv in zip(x, xi, left):
        if geom.classify(xv, b) is Region.DEEP_INTERIOR:
            res_a = max(res_a, abs(float(s)))
        res_b = max(res_b, abs(float(s) * float(np.asarray(geom.grad_psi(xv)) @ pv)))
    return res_a, res_b


def check_nu_support(inst: ProblemInstance, grid, x, nu: SignedMeasure, band: Optional[float] = None) -> float:
    """Mass of ``|nu|`` carried by nodes off the boundary band."""
    geom = inst.geometry
    b = _band(inst, band)
    off = np.array([geom.classify(xv, b) is Region.DEEP_INTERIOR for xv in x])
    w = np.zeros(len(grid))
    h = np.diff(grid)
    w[:-1] += h / 2
    w[1:] += h / 2
    mass = float(np.sum(np.abs(nu.density) * w * off))
    for i, m in nu.atom_indices().items():
        if off[i]:
            mass += abs(m)
    return mass


def check_transversality(inst: ProblemInstance, x, p: BVPath, lam: float, endpoint_tol: float = 1e-6) -> float:
    """Distance of ``(p(0), -p(T)) - lambda grad g`` to the product of endpoint normal cones."""
    xa, xb = np.asarray(x[0], dtype=float), np.asarray(x[-1], dtype=float)
    da, db = inst.C0.distance(xa), inst.C1.distance(xb)
    if da > endpoint_tol or db > endpoint_tol:
        raise EndpointInfeasible(f"endpoint distances {da:.3g}, {db:.3g} exceed {endpoint_tol:.3g}")
    ya, yb = inst.C0.project(xa), inst.C1.project(xb)
    g0, g1 = inst.dg(xa, xb)
    v0 = np.asarray(p.values[0], dtype=float) - lam * np.asarray(g0, dtype=float)
    v1 = -p.terminal - lam * np.asarray(g1, dtype=float)
    r0 = inst.C0.normal_distance(ya, v0)
    r1 = inst.C1.normal_distance(yb, v1)
    return math.hypot(r0, r1)


def check_weak_max(inst: ProblemInstance, grid, u: GridControl, p: BVPath, bundle: DerivativeBundle,
                   n_samples: int = 64, seed: int = 0, eps0: float = 1.0) -> float:
    """``max_t [max_{v in U(t)} <w, v> - <w, u(t)>]`` with ``w = omega^T p``.

    Convex sets use their support function. Prox-regular sets are sampled
    and the objective carries the quadratic correction
    ``-(|w| / min(eps0, 2 r)) |v - u(t)|^2``.
    """
    U: ControlSet = inst.U
    left = p.left_values()
    rng = np.random.default_rng(seed)
    res = 0.0
    for i, t in enumerate(grid):
        w = bundle.omega[i].T @ left[i]
        ub = u.values[i]
        if U.convex:
            gap = U.support(t, w) - float(w @ ub)
        elif hasattr(U, "sampler"):
            vs = np.atleast_2d(U.sampler(t, rng, n_samples))
            coef = float(np.linalg.norm(w)) / min(eps0, 2.0 * U.r)
            vals = vs @ w - coef * np.sum((vs - ub) ** 2, axis=1)
            gap = float(vals.max()) - float(w @ ub)
        else:
            raise UnsupportedSetKind(f"cannot maximize over U(t) of kind {U.kind}")
        res = max(res, gap)
    return max(res, 0.0)


# ---------------------------------------------------------------------------
# multiplier recovery for approximate candidates


def xi_band(gamma: float, threshold: float, floor_ratio: float = 1e-3) -> float:
    """psi-level below which the penalty intensity drops under ``floor_ratio * threshold``."""
    return max(math.log(gamma / (floor_ratio * threshold)) / gamma, 0.0)


def fit_nu(inst: ProblemInstance, grid, x, xi, p_nodes, bundle: DerivativeBundle, jump_factor: float = 5.0,
           window: int = 5):
    """Recover ``nu`` and the atoms of ``p`` from node values of an adjoint.

    A cell whose increment exceeds ``jump_factor`` times the median
    increment of its neighbors carries an atom at its right node; the
    regular part of that cell is removed by an implicit trapezoid step and
    the rest is projected on ``grad psi``. Other cells contribute a density
    from their residual projected on ``grad psi``.

    Returns ``(BVPath, SignedMeasure)`` satisfying ``jump = grad psi * mass``
    exactly at every atom.
    """
    geom = inst.geometry
    grid = np.asarray(grid, dtype=float)
    p_nodes = np.asarray(p_nodes, dtype=float)
    N = grid.size - 1
    h = np.diff(grid)
    grads = np.array([geom.grad_psi(xv) for xv in x])
    inc = np.linalg.norm(np.diff(p_nodes, axis=0), axis=1)
    atoms_p, atoms_nu = [], []
    atom_cells = set()
    for j in range(N):
        lo, hi = max(0, j - window), min(N, j + window + 1)
        nb = np.concatenate([inc[lo:j], inc[j + 1:hi]])
        scale = float(np.median(nb)) if nb.size else 0.0
        if inc[j] > jump_factor * max(scale, 1e-14):
            atom_cells.add(j)
    M = bundle.theta - np.transpose(bundle.zeta, (0, 2, 1)) + xi[:, None, None] * bundle.vartheta
    F = np.einsum("kij,kj->ki", M, p_nodes)
    n = p_nodes.shape[1]
    left = p_nodes.copy()
    cell_mass = np.zeros(N)
    for j in range(N):
        gm = 0.5 * (grads[j] + grads[j + 1])
        gg = float(gm @ gm)
        if j in atom_cells:
            i = j + 1
            # regular part of the cell from an implicit trapezoid step
            A = np.eye(n) - 0.5 * h[j] * M[i]
            p_left = np.linalg.solve(A, p_nodes[j] + 0.5 * h[j] * F[j])
            gi = grads[i]
            mass = float((p_nodes[i] - p_left) @ gi) / float(gi @ gi)
            jump = gi * mass
            atoms_p.append((float(grid[i]), jump))
            atoms_nu.append((float(grid[i]), mass))
            left[i] = p_nodes[i] - jump
            continue
        r = p_nodes[j + 1] - p_nodes[j] - 0.5 * h[j] * (F[j] + F[j + 1])
        cell_mass[j] = float(r @ gm) / gg if gg > 0 else 0.0
    dens_cell = cell_mass / h
    # atom cells carry no density of their own; borrow from the nearest regular cell
    regular = np.array([j not in atom_cells for j in range(N)])
    if regular.any() and not regular.all():
        idx = np.nonzero(regular)[0]
        dens_cell = np.interp(np.arange(N), idx, dens_cell[idx])
    density = np.empty(N + 1)
    density[0] = dens_cell[0]
    density[-1] = dens_cell[-1]
    density[1:-1] = 0.5 * (dens_cell[:-1] + dens_cell[1:])
    return (BVPath(grid, p_nodes.copy(), tuple(atoms_p)),
            SignedMeasure(grid, density, tuple(atoms_nu)))


# ---------------------------------------------------------------------------
# candidates and aggregation


@dataclass(frozen=True)
class Tolerances:
    nontriviality: float
    admissibility: float
    adjoint: float
    slackness_a: float
    slackness_b: float
    nu_support: float
    transversality: float
    weak_max: float
    endpoint: float

    @staticmethod
    def analytic(tol: float = 1e-4) -> "Tolerances":
        return Tolerances(*([tol] * 8), endpoint=1e-6)

    @staticmethod
    def continuation(p_sup: float, rel: float = 0.05, endpoint: float = 1e-3) -> "Tolerances":
        tol = rel * (1.0 + p_sup)
        return Tolerances(*([tol] * 8), endpoint=endpoint)


def analytic_candidate(name: str, N: int = 2000, variant: str = "exact", inst: Optional[ProblemInstance] = None
                       ) -> CertCandidate:
    """Closed-form candidate sampled on ``N`` cells.

    ``variant`` replaces one ingredient to produce a wrong candidate:
    ``u_pi`` sets the control to its upper bound pi, ``xi_zero`` drops the
    multiplier and ``p_radial`` uses the state as adjoint.
    """
    from .instance import builtin
    cf = closed_form_solution(name)
    inst = inst or builtin(name)
    grid = inst.grid(N)
    x = np.array([cf.x(t) for t in grid])
    u = GridControl.from_function(grid, cf.u)
    xi = np.array([cf.xi(t) for t in grid], dtype=float)
    p_vals = np.array([cf.p(t) for t in grid])
    p_atoms = []
    for t, m in cf.nu_atoms:
        i = _atom_index(grid, t)
        p_atoms.append((float(grid[i]), p_vals[i] - np.asarray(cf.p_left(grid[i]))))
    p = BVPath(grid, p_vals, tuple(p_atoms))
    nu = SignedMeasure(grid, np.array([cf.nu_density(t) for t in grid], dtype=float),
                       tuple((float(grid[_atom_index(grid, t)]), float(m)) for t, m in cf.nu_atoms))
    cand = CertCandidate(grid, x, u, xi, p, cf.lam, nu, None, "analytic")
    if variant == "exact":
        return cand
    if variant == "u_pi":
        return replace(cand, u=GridControl(grid, np.full((grid.size, 1), math.pi)))
    if variant == "xi_zero":
        return replace(cand, xi=np.zeros_like(xi))
    if variant == "p_radial":
        return replace(cand, p=BVPath(grid, x.copy()), nu=SignedMeasure.zero(grid))
    raise ValueError(f"unknown variant {variant!r}")


def continuation_candidate(inst: ProblemInstance, grid, x, u: GridControl, xi, p_nodes, lam: float,
                           gamma: float, xi_cells=None) -> CertCandidate:
    """Wrap optimizer output; the boundary band follows the penalty intensity floor."""
    threshold = 2.0 * inst.M_bar / inst.geometry.eta
    band = max(xi_band(gamma, threshold), inst.geometry.bdry_tol)
    return CertCandidate(np.asarray(grid), np.asarray(x), u, np.asarray(xi),
                         BVPath(np.asarray(grid), np.asarray(p_nodes)), lam, None, band, "continuation",
                         None if xi_cells is None else np.asarray(xi_cells))


def certify(inst: ProblemInstance, cand: CertCandidate, tolerances: Optional[Tolerances] = None
            ) -> CertificateReport:
    """Run every check and aggregate into a report.

    A missing ``nu`` is fitted from the adjoint (continuation candidates) or
    taken as zero when ``p`` already carries its atoms; a missing
    ``lambda`` is recovered from nontriviality.
    """
    grid = np.asarray(cand.grid, dtype=float)
    x = np.asarray(cand.x, dtype=float)
    xi = np.asarray(cand.xi, dtype=float)
    bundle = build_bundle(inst, grid, x, cand.u)
    p, nu = cand.p, cand.nu
    if nu is None:
        if p.atoms:
            nu = SignedMeasure.zero(grid)
        else:
            p, nu = fit_nu(inst, grid, x, xi, p.values, bundle)
    lam = cand.lam
    if lam is None:
        lam = max(0.0, 1.0 - float(np.linalg.norm(p.terminal)))
    if tolerances is None:
        tolerances = (Tolerances.analytic() if cand.kind == "analytic"
                      else Tolerances.continuation(p.sup_norm()))
    band = _band(inst, cand.band)
    ode, psi_pos, xi_neg = check_admissibility(inst, grid, x, cand.u, xi, cand.xi_cells)
    cell, atom = check_adjoint(inst, grid, x, xi, p, nu, bundle)
    sa, sb = check_slackness(inst, x, xi, p, band)
    try:
        tr = check_transversality(inst, x, p, lam, tolerances.endpoint)
    except EndpointInfeasible:
        tr = float("inf")
    residuals = {
        "nontriviality": check_nontriviality(p, lam),
        "admissibility": max(ode, psi_pos, xi_neg),
        "adjoint": max(cell, atom),
        "slackness_a": sa,
        "slackness_b": sb,
        "nu_support": check_nu_support(inst, grid, x, nu, band),
        "transversality": tr,
        "weak_max": check_weak_max(inst, grid, cand.u, p, bundle),
    }
    checks = {k: CheckResult(residuals[k], getattr(tolerances, k)) for k in CHECKS}
    details = {"ode_residual": ode, "psi_excess": psi_pos, "xi_negative": xi_neg, "adjoint_cell": cell, "adjoint_atom": atom}
    return CertificateReport(checks, lam, p.terminal, [(t, m) for t, m in nu.atoms], band, cand.kind, details)


__all__ = [
    "BVPath", "SignedMeasure", "DerivativeBundle", "CertCandidate", "CheckResult", "CertificateReport",
    "Tolerances", "build_bundle", "bundle_fd_error", "check_nontriviality", "check_admissibility",
    "check_adjoint", "check_slackness", "check_nu_support", "check_transversality", "check_weak_max",
    "fit_nu", "xi_band", "analytic_candidate", "continuation_candidate", "certify", "certificate_schema", "validate_report",
]
