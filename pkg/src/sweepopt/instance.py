"""Problem instances: data of the sweeping-process control problem.

An instance bundles the constraint set, the controlled perturbation and
its derivatives, the endpoint cost, endpoint sets and control sets.
Instances are registered in code by name; see :func:`builtin`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import geometry as geo
from .controls import BoxSet, ControlSet
from .errors import NoClosedForm, UnknownInstance, UnsupportedSetKind


# ---------------------------------------------------------------------------
# endpoint sets


@dataclass(frozen=True)
class EndpointSet:
    """Closed endpoint set with membership, projection and normal cones.

    ``kind`` is one of ``singleton`` (``point``), ``ray`` (``origin``,
    unit ``direction``), ``box`` (``lo``, ``hi``), ``levelset``
    (``geometry``: a :class:`LevelSetC`) or ``whole``. ``shift`` translates
    the set; ``ball`` and ``within`` restrict membership only.
    """

    kind: str
    params: dict = field(default_factory=dict)
    shift: Optional[np.ndarray] = None
    ball: Optional[tuple] = None
    within: Optional[geo.LevelSetC] = None

    @staticmethod
    def singleton(point):
        return EndpointSet("singleton", {"point": np.asarray(point, dtype=float)})

    @staticmethod
    def ray(origin, direction):
        d = np.asarray(direction, dtype=float)
        return EndpointSet("ray", {"origin": np.asarray(origin, dtype=float), "direction": d / np.linalg.norm(d)})

    @staticmethod
    def box(lo, hi):
        return EndpointSet("box", {"lo": np.asarray(lo, dtype=float), "hi": np.asarray(hi, dtype=float)})

    @staticmethod
    def whole():
        return EndpointSet("whole")

    @staticmethod
    def levelset(geometry: geo.LevelSetC):
        return EndpointSet("levelset", {"geometry": geometry})

    def _local(self, y):
        y = np.asarray(y, dtype=float)
        return y - self.shift if self.shift is not None else y

    def _base_project(self, y):
        k, p = self.kind, self.params
        if k == "singleton":
            return p["point"].copy()
        if k == "whole":
            return y.copy()
        if k == "ray":
            s = max(0.0, float((y - p["origin"]) @ p["direction"]))
            return p["origin"] + s * p["direction"]
        if k == "box":
            return np.clip(y, p["lo"], p["hi"])
        if k == "levelset":
            return p["geometry"].project_onto_C(y)
        raise UnsupportedSetKind(k)

    def project(self, y) -> np.ndarray:
        """Nearest point of the (shifted) base set; ``ball``/``within`` are ignored."""
        y_loc = self._local(y)
        out = self._base_project(y_loc)
        return out + self.shift if self.shift is not None else out

    def distance(self, y) -> float:
        return float(np.linalg.norm(np.asarray(y, dtype=float) - self.project(y)))

    def contains(self, y, tol: float = 1e-9) -> bool:
        y = np.asarray(y, dtype=float)
        if self.distance(y) > tol:
            return False
        if self.ball is not None:
            c, r = self.ball
            if np.linalg.norm(self._local(y) - np.asarray(c)) > r + tol:
                return False
        if self.within is not None and self.within.eval_psi(y) > max(tol, self.within.bdry_tol):
            return False
        return True

    def project_normal(self, y, v, tol: float = 1e-9) -> np.ndarray:
        """Project ``v`` onto the limiting normal cone of the set at ``y``."""
        y = self._local(y)
        v = np.asarray(v, dtype=float)
        k, p = self.kind, self.params
        if k == "singleton":
            return v.copy()
        if k == "whole":
            return np.zeros_like(v)
        if k == "ray":
            d = p["direction"]
            s = float((y - p["origin"]) @ d)
            vd = float(v @ d)
            if s <= tol and vd <= 0.0:
                return v.copy()
            return v - vd * d
        if k == "box":
            lo, hi = p["lo"], p["hi"]
            out = np.zeros_like(v)
            at_lo = y <= lo + tol
            at_hi = y >= hi - tol
            both = at_lo & at_hi
            out[both] = v[both]
            only_lo = at_lo & ~at_hi
            out[only_lo] = np.minimum(v[only_lo], 0.0)
            only_hi = at_hi & ~at_lo
            out[only_hi] = np.maximum(v[only_hi], 0.0)
            return out
        if k == "levelset":
            g_ = p["geometry"]
            if abs(g_.eval_psi(y)) > max(tol, g_.bdry_tol):
                return np.zeros_like(v)
            gr = g_.grad_psi(y)
            return max(0.0, float(v @ gr)) / float(gr @ gr) * gr
        raise UnsupportedSetKind(k)

    def normal_distance(self, y, v, tol: float = 1e-9) -> float:
        v = np.asarray(v, dtype=float)
        return float(np.linalg.norm(v - self.project_normal(y, v, tol)))

    def shifted(self, shift) -> "EndpointSet":
        s = np.asarray(shift, dtype=float)
        total = s if self.shift is None else self.shift + s
        return replace(self, shift=total)

    def sample(self, rng, k: int, scale: float = 1.0) -> np.ndarray:
        """Points of the base set (for hypothesis checks)."""
        kd, p = self.kind, self.params
        if kd == "singleton":
            pts = np.repeat(p["point"][None, :], k, axis=0)
        elif kd == "ray":
            s = scale * rng.random(k)
            pts = p["origin"] + s[:, None] * p["direction"]
        elif kd == "box":
            lo, hi = p["lo"], p["hi"]
            pts = lo + (hi - lo) * rng.random((k, lo.size))
        else:
            return np.empty((0, 0))
        return pts + self.shift if self.shift is not None else pts


# ---------------------------------------------------------------------------
# right-hand-side models consumed by the integration kernels


class CallableModel:
    """Generic model: penalized dynamics assembled from instance callables."""

    def __init__(self, inst: "ProblemInstance"):
        self.inst = inst
        self.n = inst.n
        self.m = inst.m
        geom = inst.geometry
        self.psi = geom.psi
        self.grad = geom.grad_psi
        self.hess = geom.hess_psi

    def f_phi(self, t, x, u):
        return self.inst.f_phi(t, x, u)

    def jac_x(self, t, x, u):
        return np.asarray(self.inst.df_dx(t, x, u), dtype=float) - np.asarray(self.inst.phi_ext_hess(x), dtype=float)

    def jac_u(self, t, x, u):
        return np.asarray(self.inst.df_du(t, x, u), dtype=float)


@dataclass(frozen=True)
class AffineRadialModel:
    """``f_Phi(t,x,u) = A x + B u + c t + d`` with a radial polynomial ``psi``.

    This is the model family understood by the compiled kernels.
    """

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    d: np.ndarray
    poly: geo.RadialPolynomial

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def coeffs(self):
        return np.asarray(self.poly.coeffs, dtype=float)

    @property
    def center(self):
        return np.asarray(self.poly.center, dtype=float)

    def f_phi(self, t, x, u):
        return self.A @ x + self.B @ np.atleast_1d(u) + self.c * t + self.d

    def jac_x(self, t, x, u):
        return self.A

    def jac_u(self, t, x, u):
        return self.B

    def psi(self, x):
        return self.poly.psi(x)

    def grad(self, x):
        return self.poly.grad(x)

    def hess(self, x):
        return self.poly.hess(x)


# ---------------------------------------------------------------------------
# the instance


@dataclass(frozen=True)
class ProblemInstance:
    """Complete datum of the control problem.

    ``g`` and ``dg`` take the pair ``(x_start, x_end)``; ``dg`` returns the
    pair of partial gradients. When ``g_indicator_C`` is set the cost is
    ``+inf`` whenever the terminal state leaves C.
    """

    name: str
    geometry: geo.LevelSetC
    f: Callable
    df_dx: Callable
    df_du: Callable
    g: Callable
    dg: Callable
    C0: EndpointSet
    C1: EndpointSet
    U: ControlSet
    horizon: tuple
    M_bar: float
    delta: float
    n: int
    m: int
    phi_ext_grad: Optional[Callable] = None
    phi_ext_hess: Optional[Callable] = None
    g_indicator_C: bool = False
    box: Optional[tuple] = None
    affine: Optional[AffineRadialModel] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n
        if self.phi_ext_grad is None:
            object.__setattr__(self, "phi_ext_grad", lambda x: np.zeros(n))
        if self.phi_ext_hess is None:
            object.__setattr__(self, "phi_ext_hess", lambda x: np.zeros((n, n)))

    def f_phi(self, t, x, u):
        return np.asarray(self.f(t, x, np.atleast_1d(u)), dtype=float) - np.asarray(self.phi_ext_grad(x), dtype=float)

    def rhs_model(self):
        return self.affine if self.affine is not None else CallableModel(self)

    def with_params(self, **kw) -> "ProblemInstance":
        return replace(self, **kw)

    @property
    def t0(self) -> float:
        return float(self.horizon[0])

    @property
    def t1(self) -> float:
        return float(self.horizon[1])

    def grid(self, N: int) -> np.ndarray:
        return np.linspace(self.t0, self.t1, N + 1)

    def cost_g(self, x_start, x_end) -> float:
        from .errors import GInfinite
        if self.g_indicator_C and self.geometry.eval_psi(x_end) > self.geometry.bdry_tol:
            raise GInfinite("terminal state outside C")
        return float(self.g(np.asarray(x_start, dtype=float), np.asarray(x_end, dtype=float)))


# ---------------------------------------------------------------------------
# built-in instances


def _annulus_example(params: dict) -> ProblemInstance:
    eta = float(params.get("eta", 2.7))
    c1_offset = float(params.get("c1_offset", 0.0))
    rho_smooth = float(params.get("rho_smooth", 0.5))
    bdry_tol = float(params.get("bdry_tol", 1e-8))
    geom = geo.annulus(1.0, 2.0, eta=eta, rho_smooth=rho_smooth, bdry_tol=bdry_tol)
    A = np.array([[-1.0, -1.0], [1.0, -1.0]])
    B = np.array([[-1.0], [1.0]])
    c = np.array([1.0, -1.0])
    d = np.zeros(2)
    affine = AffineRadialModel(A, B, c, d, geom.radial)

    def f(t, x, u):
        u0 = float(np.atleast_1d(u)[0])
        return np.array([t - x[0] - x[1] - u0, -t + x[0] - x[1] + u0])

    def g(x0, x1):
        return 0.5 * (x1[0] ** 2 + x1[1] ** 2 - 1.0)

    def dg(x0, x1):
        return np.zeros(2), np.array([x1[0], x1[1]], dtype=float)

    # sup of ||f|| over C x U(t) x [0, pi/2] is sqrt(2)(2 + pi), attained at x = (2, 0), t = 0, u = pi
    m_bar = float(params.get("m_bar", math.sqrt(2.0) * (2.0 + math.pi)))
    U = BoxSet(lo=lambda t: np.array([t]), hi=lambda t: np.array([math.pi]))
    return ProblemInstance(
        name="annulus_example", geometry=geom, f=f,
        df_dx=lambda t, x, u: A, df_du=lambda t, x, u: B,
        g=g, dg=dg,
        C0=EndpointSet.singleton([1.0, 0.0]),
        C1=EndpointSet.ray([c1_offset, 0.0], [0.0, 1.0]),
        U=U, horizon=(0.0, math.pi / 2), M_bar=m_bar,
        delta=float(params.get("delta", 0.5)), n=2, m=1,
        g_indicator_C=True, box=((-2.5, -2.5), (2.5, 2.5)), affine=affine,
        params={"eta": eta, "c1_offset": c1_offset, "rho_smooth": rho_smooth,
                "m_bar": m_bar, "bdry_tol": bdry_tol},
    )


def _interior_drift(params: dict) -> ProblemInstance:
    """Large ball, constant drift: the penalty never activates."""
    radius = float(params.get("radius", 10.0))
    geom = geo.ball(radius, eta=0.9 * radius, rho_smooth=1.0)
    A = np.zeros((2, 2))
    B = np.array([[0.0], [1.0]])
    c = np.zeros(2)
    d = np.array([1.0, 0.5])
    affine = AffineRadialModel(A, B, c, d, geom.radial)

    def f(t, x, u):
        return d + B @ np.atleast_1d(u)

    U = BoxSet(lo=lambda t: np.array([-1.0]), hi=lambda t: np.array([1.0]))
    return ProblemInstance(
        name="interior_drift", geometry=geom, f=f,
        df_dx=lambda t, x, u: A, df_du=lambda t, x, u: B,
        g=lambda x0, x1: 0.5 * float(x1 @ x1),
        dg=lambda x0, x1: (np.zeros(2), np.asarray(x1, dtype=float)),
        C0=EndpointSet.singleton([0.0, 0.0]), C1=EndpointSet.whole(),
        U=U, horizon=(0.0, 1.0), M_bar=float(np.hypot(1.0, 1.5)), delta=0.5, n=2, m=1,
        box=((-radius - 1, -radius - 1), (radius + 1, radius + 1)), affine=affine,
        params={"radius": radius},
    )


_REGISTRY = {
    "annulus_example": _annulus_example,
    "interior_drift": _interior_drift,
}


def registered() -> list:
    return sorted(_REGISTRY)


def builtin(name: str, params: Optional[dict] = None) -> ProblemInstance:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise UnknownInstance(f"no instance named {name!r}; known: {', '.join(registered())}") from None
    return factory(dict(params or {}))


@dataclass(frozen=True)
class ClosedForm:
    x: Callable
    u: Callable
    xi: Callable
    p: Callable
    p_left: Callable
    lam: float
    nu_atoms: tuple
    nu_density: Callable


def closed_form_solution(name: str) -> ClosedForm:
    """Analytic optimum with multipliers, where one is known."""
    if name != "annulus_example":
        raise NoClosedForm(name)
    T = math.pi / 2

    def p_left(t):
        return 0.5 * np.array([math.sin(t), -math.cos(t)])

    def p(t):
        if t >= T:
            return np.array([0.5, -3.0 / 8.0])
        return p_left(t)

    return ClosedForm(
        x=lambda t: np.array([math.cos(t), math.sin(t)]),
        u=lambda t: np.array([t]),
        xi=lambda t: 1.0 / 6.0,
        p=p, p_left=p_left,
        lam=3.0 / 8.0,
        nu_atoms=((T, 1.0 / 16.0),),
        nu_density=lambda t: 0.0,
    )


# ---------------------------------------------------------------------------
# hypothesis validation


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    value: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _sample_control(U: ControlSet, t, rng):
    if isinstance(U, BoxSet):
        lo, hi = U.bounds(t)
        return lo + (hi - lo) * rng.random(lo.size)
    if hasattr(U, "sampler"):
        return np.atleast_1d(U.sampler(t, rng, 1)[0])
    if hasattr(U, "center"):
        c = np.atleast_1d(U.center(t))
        v = rng.normal(size=c.size)
        return c + U.radius(t) * rng.random() * v / np.linalg.norm(v)
    raise UnsupportedSetKind(U.kind)


def _rel_fd_error(fn, dfn, x, eps=1e-6):
    J = np.atleast_2d(np.asarray(dfn(x), dtype=float))
    fd = np.empty_like(J)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        fd[:, j] = (np.atleast_1d(fn(x + e)) - np.atleast_1d(fn(x - e))) / (2 * eps)
    scale = max(np.abs(J).max(), np.abs(fd).max(), 1.0)
    return float(np.abs(J - fd).max() / scale)


def validate_hypotheses(inst: ProblemInstance, sampler: Optional[geo.BoxSampler] = None,
                        seed: int = 0, n_samples: int = 200) -> ValidationReport:
    """Sample-based check of the standing hypotheses; failures become report entries."""
    geom = inst.geometry
    rng = np.random.default_rng(seed)
    if sampler is None:
        lo, hi = inst.box if inst.box is not None else (-np.ones(inst.n) * 10, np.ones(inst.n) * 10)
        sampler = geo.BoxSampler(geom, lo, hi, seed=seed)
    checks = []
    inside = sampler.inside(n_samples)
    bd = sampler.boundary(max(20, n_samples // 4))
    cpts = np.concatenate([inside, bd]) if len(bd) else inside
    ts = inst.t0 + (inst.t1 - inst.t0) * rng.random(len(cpts))

    # H1: Lipschitz ratio and derivative consistency of f
    ratios, fd_err = [], 0.0
    fnorm = 0.0
    for k in range(len(cpts) - 1):
        t = ts[k]
        x, y = cpts[k], cpts[k + 1]
        u, v = _sample_control(inst.U, t, rng), _sample_control(inst.U, t, rng)
        num = np.linalg.norm(inst.f(t, x, u) - inst.f(t, y, v))
        den = np.linalg.norm(np.concatenate([x - y, u - v]))
        if den > 0:
            ratios.append(num / den)
        fnorm = max(fnorm, float(np.linalg.norm(inst.f_phi(t, x, u))))
        if k < 40:
            fd_err = max(fd_err, _rel_fd_error(lambda z: inst.f(t, z, u), lambda z: inst.df_dx(t, z, u), x))
            fd_err = max(fd_err, _rel_fd_error(lambda w: inst.f(t, x, w), lambda w: inst.df_du(t, x, w), u))
    m_l = max(ratios) if ratios else 0.0
    checks.append(HypothesisCheck("H1_lipschitz", bool(np.isfinite(m_l)), m_l, "sampled Lipschitz ratio of f"))
    checks.append(HypothesisCheck("H1_derivatives", fd_err <= 1e-5, fd_err, "df_dx, df_du vs central differences"))
    checks.append(HypothesisCheck("M_bar_bound", fnorm <= inst.M_bar * (1 + 1e-12), fnorm,
                                  f"max sampled ||f_Phi|| vs M_bar={inst.M_bar:.6g}"))

    # H2.1: Hessian vs differences of the gradient
    herr = max((_rel_fd_error(geom.grad_psi, geom.hess_psi, p) for p in cpts[:40]), default=0.0)
    checks.append(HypothesisCheck("H2.1_smooth", herr <= 1e-5, herr, "hess_psi vs differences of grad_psi"))

    # H2.2: gradient margin on the boundary
    if len(bd):
        gmin = min(np.linalg.norm(geom.grad_psi(p)) for p in bd)
        ok = gmin > 2 * geom.eta
    else:
        gmin, ok = float("nan"), False
    checks.append(HypothesisCheck("H2.2_gradient", bool(ok), gmin, f"min boundary ||grad psi|| vs 2 eta={2 * geom.eta:.6g}"))

    # H2.3: coercivity on expanding spheres
    n = inst.n
    radii = [2.0 ** k for k in range(2, 9)]
    mins = []
    for R in radii:
        d = rng.normal(size=(64, n))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        mins.append(min(geom.eval_psi(R * v) for v in d))
    coercive = mins[-1] > 0 and mins[-1] > mins[-2] > mins[-3]
    checks.append(HypothesisCheck("H2.3_coercive", bool(coercive), mins[-1], "min psi on spheres of radius 4..256"))

    # M_psi convention
    checks.append(HypothesisCheck("M_psi_choice", geom.m_psi >= 4 * geom.eta / geom.rho_smooth - 1e-12,
                                  geom.m_psi, "m_psi >= 4 eta / rho"))

    # H4.1: C0 nonempty, closed, inside C
    c0 = inst.C0.sample(rng, 10)
    if c0.size:
        worst = max(geom.eval_psi(p) for p in c0)
        ok = worst <= geom.bdry_tol
    else:
        worst, ok = float("nan"), inst.C0.kind == "levelset"
    checks.append(HypothesisCheck("H4.1_C0", bool(ok), worst, "max psi over C0 samples"))

    # H4.2: U(t) nonempty and uniformly bounded
    tgrid = np.linspace(inst.t0, inst.t1, 101)
    try:
        for t in tgrid:
            inst.U.project(t, np.zeros(inst.m))
        bounds = [inst.U.bound(t) for t in tgrid]
        ok = all(np.isfinite(bounds))
        val = max(bounds)
    except Exception as exc:  # empty set or unsupported kind
        ok, val = False, float("nan")
    checks.append(HypothesisCheck("H4.2_U_bounded", bool(ok), val, "max_t sup ||U(t)||"))

    checks.append(HypothesisCheck("H4.3_C1", inst.C1.kind in ("singleton", "ray", "box", "levelset", "whole"),
                                  0.0, f"C1 kind {inst.C1.kind}"))
    # H4.5: pointedness holds automatically for intervals and boxes
    pointed = inst.U.kind in ("box", "ball")
    checks.append(HypothesisCheck("H4.5_CQ", pointed, 0.0,
                                  "asserted for box/ball U(t)" if pointed else "assumed, not checked"))

    # H5: Lipschitz ratio of g near endpoint sets (within C)
    gr = []
    for k in range(len(cpts) - 1):
        a, b = cpts[k], cpts[k + 1]
        try:
            ga = inst.cost_g(a, a)
            gb = inst.cost_g(b, b)
        except Exception:
            continue
        den = np.linalg.norm(np.concatenate([a - b, a - b]))
        if den > 0:
            gr.append(abs(ga - gb) / den)
    lg = max(gr) if gr else float("nan")
    checks.append(HypothesisCheck("H5_g_lipschitz", bool(np.isfinite(lg)), lg, "sampled Lipschitz ratio of g on C"))
    return ValidationReport(checks)
