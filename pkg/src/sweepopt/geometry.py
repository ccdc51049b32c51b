"""Sublevel-set constraint C = {x : psi(x) <= 0}.

The set is carried by its defining function and first two derivatives,
together with the constants the penalty machinery needs: the boundary
gradient margin ``eta``, the gradient bound ``m_psi_bar`` and the
half-Lipschitz constant ``m_psi`` of the gradient.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import EmptySample, OutsideProxRadius


class Region(enum.Enum):
    DEEP_INTERIOR = "DeepInterior"
    BOUNDARY_BAND = "BoundaryBand"
    OUTSIDE = "Outside"


@dataclass(frozen=True)
class LevelSetC:
    """Constraint set given as the zero sublevel set of ``psi``.

    Parameters
    ----------
    psi, grad_psi, hess_psi : callable
        The defining function and its derivatives, each taking a state
        vector of shape ``(n,)``.
    eta : float
        Boundary gradient margin, ``||grad psi|| > 2 eta`` on ``psi = 0``.
    m_psi_bar : float
        Upper bound of ``||grad psi||`` on C.
    m_psi : float
        Half of a Lipschitz constant of ``grad psi`` on ``C + (rho/2) B``.
    rho_smooth : float
        Radius of the neighborhood on which ``psi`` is C^{1,1}.
    bdry_tol : float
        Width of the numerical boundary band ``|psi| <= bdry_tol``.
    projector : callable, optional
        Closed-form nearest-point map overriding the Newton projection.
    """

    psi: Callable[[np.ndarray], float]
    grad_psi: Callable[[np.ndarray], np.ndarray]
    hess_psi: Callable[[np.ndarray], np.ndarray]
    eta: float
    m_psi_bar: float
    m_psi: float
    rho_smooth: float = 0.5
    bdry_tol: float = 1e-8
    projector: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    radial: Optional["RadialPolynomial"] = field(default=None, compare=False)
    name: str = "levelset"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.bdry_tol < 0:
            raise ValueError("bdry_tol must be nonnegative")

    def eval_psi(self, x) -> float:
        return float(self.psi(np.asarray(x, dtype=float)))

    def classify(self, x, band: Optional[float] = None) -> Region:
        tol = self.bdry_tol if band is None else band
        v = self.eval_psi(x)
        if v > tol:
            return Region.OUTSIDE
        if v >= -tol:
            return Region.BOUNDARY_BAND
        return Region.DEEP_INTERIOR

    @property
    def prox_radius(self) -> float:
        """Radius within which the projection onto C is single valued."""
        return self.eta / self.m_psi

    def with_constants(self, eta=None, m_psi_bar=None, m_psi=None) -> "LevelSetC":
        kw = {}
        if eta is not None:
            kw["eta"] = eta
        if m_psi_bar is not None:
            kw["m_psi_bar"] = m_psi_bar
        if m_psi is not None:
            kw["m_psi"] = m_psi
        return replace(self, **kw)

    def project_onto_C(self, x) -> np.ndarray:
        """Nearest point of C to ``x``.

        Points already in C are returned unchanged. A registered closed-form
        projector takes precedence; otherwise the nearest-point KKT system
        ``y - x + mu grad psi(y) = 0, psi(y) = 0`` is solved by damped Newton,
        which requires ``d(x, C) < eta / m_psi``.
        """
        x = np.asarray(x, dtype=float)
        if self.eval_psi(x) <= self.bdry_tol:
            return x.copy()
        if self.projector is not None:
            return np.asarray(self.projector(x), dtype=float)
        return _newton_projection(self, x)


def _newton_projection(geom: LevelSetC, x: np.ndarray, max_iter: int = 60) -> np.ndarray:
    n = x.size
    # start from a gradient step onto the zero level
    y = x.copy()
    for _ in range(20):
        g = geom.grad_psi(y)
        gg = float(g @ g)
        if gg == 0.0:
            break
        y = y - geom.eval_psi(y) / gg * g
        if abs(geom.eval_psi(y)) <= geom.bdry_tol:
            break
    g = geom.grad_psi(y)
    mu = float(g @ (x - y)) / max(float(g @ g), 1e-300)

    def residual(y, mu):
        return np.concatenate([y - x + mu * geom.grad_psi(y), [geom.eval_psi(y)]])

    r = residual(y, mu)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= 1e-13 * (1.0 + np.linalg.norm(x)):
            break
        g = geom.grad_psi(y)
        K = np.zeros((n + 1, n + 1))
        K[:n, :n] = np.eye(n) + mu * geom.hess_psi(y)
        K[:n, n] = g
        K[n, :n] = g
        try:
            step = np.linalg.solve(K, -r)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        norm0 = np.linalg.norm(r)
        while t > 1e-6:
            y_t = y + t * step[:n]
            mu_t = mu + t * step[n]
            r_t = residual(y_t, mu_t)
            if np.linalg.norm(r_t) < (1 - 1e-4 * t) * norm0:
                break
            t *= 0.5
        y, mu, r = y_t, mu_t, r_t
    dist = float(np.linalg.norm(y - x))
    if dist >= geom.prox_radius or abs(geom.eval_psi(y)) > 1e3 * max(geom.bdry_tol, 1e-12):
        raise OutsideProxRadius(
            f"distance {dist:.3g} to C is not below the prox radius {geom.prox_radius:.3g}"
        )
    return y


class BoxSampler:
    """Seeded sampler of points in C, on its boundary and in a tube around it.

    Boundary points come from Newton iterations along ``grad psi`` started
    at uniform points of the bounding box; points whose iteration does not
    reach the band are discarded.
    """

    def __init__(self, geom: LevelSetC, lo, hi, seed: int = 0):
        self.geom = geom
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.rng = np.random.default_rng(seed)

    def _uniform(self, k):
        return self.lo + (self.hi - self.lo) * self.rng.random((k, self.lo.size))

    def inside(self, k: int) -> np.ndarray:
        out = []
        tries = 0
        while len(out) < k and tries < 200:
            pts = self._uniform(4 * k)
            out.extend(p for p in pts if self.geom.eval_psi(p) <= 0.0)
            tries += 1
        return np.array(out[:k]).reshape(-1, self.lo.size)

    def boundary(self, k: int, max_iter: int = 200) -> np.ndarray:
        geom = self.geom
        tol = max(geom.bdry_tol, 1e-12)
        out = []
        tries = 0
        while len(out) < k and tries < 50:
            tries += 1
            for y in self._uniform(2 * k):
                for _ in range(max_iter):
                    v = geom.eval_psi(y)
                    if abs(v) <= tol:
                        out.append(y)
                        break
                    g = geom.grad_psi(y)
                    gg = float(g @ g)
                    if not gg > 1e-300:
                        break
                    y = y - v / gg * g
                if len(out) >= k:
                    break
        return np.array(out[:k]).reshape(-1, self.lo.size)

    def tube(self, k: int, radius: float) -> np.ndarray:
        """Points of ``C + radius * B`` (C points jittered inside the ball)."""
        base = np.concatenate([self.inside(k // 2 + 1), self.boundary(k // 2 + 1)])
        d = self.rng.normal(size=base.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = radius * self.rng.random((base.shape[0], 1)) ** (1.0 / self.lo.size)
        return (base + r * d)[:k]


def estimate_constants(geom: LevelSetC, sampler: BoxSampler, safety: float = 0.9,
                       n_boundary: int = 400, n_inside: int = 400):
    """Estimate ``(eta, m_psi_bar, m_psi)`` from samples.

    ``eta`` is ``safety`` times half the smallest sampled boundary gradient
    norm, ``m_psi_bar`` the largest gradient norm sampled over C, and
    ``m_psi`` half the largest Hessian operator norm over the tube
    ``C + (rho/2) B``, raised to ``4 eta / rho`` when smaller.
    """
    if not 0.0 < safety <= 1.0:
        raise ValueError("safety must lie in (0, 1]")
    bd = sampler.boundary(n_boundary)
    inner = sampler.inside(n_inside)
    if len(bd) == 0 or len(inner) == 0:
        raise EmptySample("sampler produced no boundary or interior points")
    bnorm = np.array([np.linalg.norm(geom.grad_psi(p)) for p in bd])
    eta = safety * bnorm.min() / 2.0
    cpts = np.concatenate([bd, inner])
    m_psi_bar = max(np.linalg.norm(geom.grad_psi(p)) for p in cpts)
    tube = sampler.tube(n_inside, geom.rho_smooth / 2.0)
    hmax = max(np.linalg.norm(geom.hess_psi(p), 2) for p in np.concatenate([cpts, tube]))
    m_psi = hmax / 2.0
    if eta > 0:
        m_psi = max(m_psi, 4.0 * eta / geom.rho_smooth)
    return float(eta), float(m_psi_bar), float(m_psi)


# ---------------------------------------------------------------------------
# radial polynomial sets: psi(x) = P(||x - center||^2)


@dataclass(frozen=True)
class RadialPolynomial:
    """``psi(x) = sum_k coeffs[k] * s**k`` with ``s = ||x - center||^2``."""

    coeffs: tuple
    center: tuple

    def _s(self, x):
        d = np.asarray(x, dtype=float) - np.asarray(self.center)
        return d, float(d @ d)

    def _p(self, s, order=0):
        c = np.polynomial.polynomial.polyder(np.asarray(self.coeffs, dtype=float), order) if order else np.asarray(self.coeffs, dtype=float)
        return float(np.polynomial.polynomial.polyval(s, c)) if c.size else 0.0

    def psi(self, x):
        _, s = self._s(x)
        return self._p(s)

    def grad(self, x):
        d, s = self._s(x)
        return 2.0 * self._p(s, 1) * d

    def hess(self, x):
        d, s = self._s(x)
        return 2.0 * self._p(s, 1) * np.eye(d.size) + 4.0 * self._p(s, 2) * np.outer(d, d)


def annulus(inner: float = 1.0, outer: float = 2.0, eta: float = 2.7, rho_smooth: float = 0.5,
            bdry_tol: float = 1e-8) -> LevelSetC:
    """Annulus ``inner <= ||x|| <= outer`` as ``(s - inner^2)(s - outer^2) <= 0``."""
    a, b = inner ** 2, outer ** 2
    poly = RadialPolynomial(coeffs=(a * b, -(a + b), 1.0), center=(0.0, 0.0))

    def radial(x):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x)
        if r == 0.0:
            raise OutsideProxRadius("nearest point of the annulus to the origin is not unique")
        if r < inner:
            return x * (inner / r)
        if r > outer:
            return x * (outer / r)
        return x.copy()

    # gradient norm 2r|2r^2 - a - b| is largest at the outer circle on C
    gbar = max(2 * inner * abs(2 * a - a - b), 2 * outer * abs(2 * b - a - b))
    r_far = outer + rho_smooth / 2.0
    s_far = r_far ** 2
    hmax = max(abs(2 * (2 * s_far - a - b) + 8 * s_far), abs(2 * (2 * s_far - a - b)),
               abs(2 * (2 * a - a - b) + 8 * a), abs(2 * (2 * a - a - b)))
    m_psi = max(hmax / 2.0, 4.0 * eta / rho_smooth)
    return LevelSetC(psi=poly.psi, grad_psi=poly.grad, hess_psi=poly.hess, eta=eta,
                     m_psi_bar=gbar, m_psi=m_psi, rho_smooth=rho_smooth, bdry_tol=bdry_tol,
                     projector=radial, radial=poly, name="annulus")


def ball(radius: float = 1.0, center=(0.0, 0.0), eta: Optional[float] = None,
         rho_smooth: float = 1.0, bdry_tol: float = 1e-8) -> LevelSetC:
    """Closed ball as ``||x - center||^2 - radius^2 <= 0``."""
    c = tuple(float(v) for v in center)
    poly = RadialPolynomial(coeffs=(-radius ** 2, 1.0), center=c)
    eta = radius * 0.9 if eta is None else eta

    def radial(x):
        d = np.asarray(x, dtype=float) - np.asarray(c)
        r = np.linalg.norm(d)
        return np.asarray(c) + d * (radius / r) if r > radius else np.asarray(x, dtype=float).copy()

    return LevelSetC(psi=poly.psi, grad_psi=poly.grad, hess_psi=poly.hess, eta=eta,
                     m_psi_bar=2 * radius, m_psi=max(1.0, 4 * eta / rho_smooth),
                     rho_smooth=rho_smooth, bdry_tol=bdry_tol, projector=radial, radial=poly, name="ball")
