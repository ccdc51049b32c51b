"""W^{1,2} controls on a time grid and the pointwise control sets U(t).

A control is stored by its node values and interpreted as the piecewise
linear interpolant, so its derivative is constant on each cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import EmptyIntersection, GridMismatch, UnsupportedSetKind


@dataclass(frozen=True)
class GridControl:
    grid: np.ndarray
    values: np.ndarray  # shape (N+1, m)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.size:
            raise GridMismatch(f"{values.shape[0]} control nodes for a grid of {grid.size}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid, fn) -> "GridControl":
        grid = np.asarray(grid, dtype=float)
        return cls(grid, np.array([np.atleast_1d(fn(t)) for t in grid], dtype=float))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def derivative(self) -> np.ndarray:
        """Per-cell constant derivative, shape ``(N, m)``."""
        return np.diff(self.values, axis=0) / np.diff(self.grid)[:, None]

    def __call__(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.grid, self.values[:, j]) for j in range(self.m)])

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def deriv_l2_norm(self) -> float:
        d = self.derivative()
        return float(np.sqrt(np.sum(np.diff(self.grid) * np.sum(d * d, axis=1))))

    def w12_norm(self) -> float:
        return self.sup_norm() + self.deriv_l2_norm()

    def with_values(self, values) -> "GridControl":
        return GridControl(self.grid, values)


def _check_grids(u: GridControl, v: GridControl):
    if u.grid.shape != v.grid.shape or not np.array_equal(u.grid, v.grid) or u.m != v.m:
        raise GridMismatch("controls live on different grids")


def w12_distance(u: GridControl, v: GridControl):
    """Return ``(||u - v||_inf, ||u' - v'||_2)``."""
    _check_grids(u, v)
    diff = GridControl(u.grid, u.values - v.values)
    return diff.sup_norm(), diff.deriv_l2_norm()


def z_accumulator(u: GridControl, u_ref: GridControl) -> np.ndarray:
    """Running integral of ``||u' - u_ref'||^2`` at the grid nodes, ``z(t_0) = 0``."""
    _check_grids(u, u_ref)
    d = u.derivative() - u_ref.derivative()
    inc = np.diff(u.grid) * np.sum(d * d, axis=1)
    return np.concatenate([[0.0], np.cumsum(inc)])


# ---------------------------------------------------------------------------
# control set descriptors


class ControlSet:
    """Pointwise control set ``U(t)``."""

    kind = "abstract"
    convex = True

    def project(self, t: float, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def contains(self, t: float, v, tol: float = 1e-12) -> bool:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return bool(np.linalg.norm(self.project(t, v) - v) <= tol)

    def support(self, t: float, w: np.ndarray) -> float:
        """``max { <w, u> : u in U(t) }``."""
        raise UnsupportedSetKind(f"no closed-form support function for {self.kind}")

    def bound(self, t: float) -> float:
        """Radius of a ball about the origin containing ``U(t)``."""
        raise NotImplementedError


@dataclass(frozen=True)
class BoxSet(ControlSet):
    """``U(t) = [lo(t), hi(t)]`` componentwise; an interval when m = 1."""

    lo: Callable[[float], np.ndarray]
    hi: Callable[[float], np.ndarray]
    kind = "box"

    def bounds(self, t):
        return np.atleast_1d(np.asarray(self.lo(t), dtype=float)), np.atleast_1d(np.asarray(self.hi(t), dtype=float))

    def project(self, t, v):
        lo, hi = self.bounds(t)
        if np.any(lo > hi):
            raise EmptyIntersection(f"U({t}) is empty")
        return np.clip(np.atleast_1d(v), lo, hi)

    def support(self, t, w):
        lo, hi = self.bounds(t)
        w = np.atleast_1d(w)
        return float(np.sum(np.where(w >= 0, w * hi, w * lo)))

    def bound(self, t):
        lo, hi = self.bounds(t)
        return float(np.linalg.norm(np.maximum(np.abs(lo), np.abs(hi))))


@dataclass(frozen=True)
class BallSet(ControlSet):
    center: Callable[[float], np.ndarray]
    radius: Callable[[float], float]
    kind = "ball"

    def project(self, t, v):
        c = np.atleast_1d(np.asarray(self.center(t), dtype=float))
        r = float(self.radius(t))
        d = np.atleast_1d(v) - c
        nd = np.linalg.norm(d)
        return c + d * (r / nd) if nd > r else np.atleast_1d(v).astype(float)

    def support(self, t, w):
        c = np.atleast_1d(np.asarray(self.center(t), dtype=float))
        w = np.atleast_1d(w)
        return float(w @ c + self.radius(t) * np.linalg.norm(w))

    def bound(self, t):
        return float(np.linalg.norm(self.center(t)) + self.radius(t))


@dataclass(frozen=True)
class ProxRegularSet(ControlSet):
    """Nonconvex ``r``-prox-regular set given by a projector and a sampler."""

    projector: Callable[[float, np.ndarray], np.ndarray]
    sampler: Callable[[float, np.random.Generator, int], np.ndarray]
    r: float
    radius_bound: float
    kind = "prox_regular"
    convex = False

    def project(self, t, v):
        return np.asarray(self.projector(t, np.atleast_1d(v)), dtype=float)

    def bound(self, t):
        return self.radius_bound


def _project_ball(c, r, v):
    d = v - c
    nd = np.linalg.norm(d)
    return c + d * (r / nd) if nd > r else v


def project_node(U: ControlSet, t: float, v, center=None, delta: Optional[float] = None) -> np.ndarray:
    """Project one node onto ``U(t)``, intersected with ``B_delta(center)`` if given."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if center is None or delta is None:
        return U.project(t, v)
    c = np.atleast_1d(np.asarray(center, dtype=float))
    if isinstance(U, BoxSet) and v.size == 1:
        lo, hi = U.bounds(t)
        lo2, hi2 = max(lo[0], c[0] - delta), min(hi[0], c[0] + delta)
        if lo2 > hi2 + 1e-14:
            raise EmptyIntersection(f"U({t}) misses the trust ball")
        return np.array([min(max(v[0], lo2), hi2)])
    if not U.convex:
        raise UnsupportedSetKind("trust-ball intersection needs a convex U(t)")
    # Dykstra's alternating projections for two convex sets
    x = v.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(500):
        y = U.project(t, x + p)
        p = x + p - y
        x_new = _project_ball(c, delta, y + q)
        q = y + q - x_new
        if np.linalg.norm(x_new - x) < 1e-14:
            x = x_new
            break
        x = x_new
    if np.linalg.norm(U.project(t, x) - x) > 1e-8:
        raise EmptyIntersection(f"U({t}) misses the trust ball")
    return x


def project_pointwise(u: GridControl, U: ControlSet, trust: Optional[GridControl] = None,
                      delta: Optional[float] = None) -> GridControl:
    """Project every node onto ``U(t_i)`` (intersected with the trust ball when given)."""
    if trust is not None:
        _check_grids(u, trust)
    out = np.empty_like(u.values)
    for i, t in enumerate(u.grid):
        c = None if trust is None else trust.values[i]
        out[i] = project_node(U, t, u.values[i], c, delta if trust is not None else None)
    return GridControl(u.grid, out)


def sobolev_gram(grid: np.ndarray) -> tuple:
    """Banded form of the nodal Gram matrix of the W^{1,2} inner product.

    Lumped mass plus stiffness; returned in the upper-banded layout expected
    by ``scipy.linalg.solveh_banded``.
    """
    h = np.diff(grid)
    mass = np.zeros(grid.size)
    mass[:-1] += h / 2
    mass[1:] += h / 2
    diag = mass.copy()
    diag[:-1] += 1.0 / h
    diag[1:] += 1.0 / h
    off = np.zeros(grid.size)
    off[1:] = -1.0 / h
    return np.vstack([off, diag])
