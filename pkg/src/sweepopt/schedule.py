"""Penalty parameter sequence and the stage-dependent endpoint data."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import GammaTooSmall
from .geometry import LevelSetC
from .instance import EndpointSet


@dataclass(frozen=True)
class PenaltySchedule:
    gammas: tuple
    alphas: tuple
    rhos: tuple
    M_bar: float
    eta: float

    def __len__(self):
        return len(self.gammas)

    @property
    def threshold(self) -> float:
        """``2 M_bar / eta``: lower bound on every gamma and upper bound on the multiplier proxy."""
        return 2.0 * self.M_bar / self.eta

    def inner_set_margin(self, k: int) -> float:
        """psi-margin ``alpha_k`` of the shrunken set ``C(k) = {psi <= -alpha_k}``."""
        return self.alphas[k]

    def identity_residuals(self) -> np.ndarray:
        """Relative residuals of ``gamma e^{-alpha gamma} = 2 M_bar / eta``."""
        g = np.asarray(self.gammas)
        a = np.asarray(self.alphas)
        return np.abs(g * np.exp(-a * g) - self.threshold) / self.threshold


def alpha_of(gamma: float, M_bar: float, eta: float) -> float:
    return math.log(eta * gamma / (2.0 * M_bar)) / gamma


def make_schedule(M_bar: float, eta: float, gamma_0: Optional[float] = None, growth: float = 3.0,
                  count: int = 8) -> PenaltySchedule:
    """Geometric schedule ``gamma_k = gamma_0 growth^k`` (default ``gamma_0 = 4 M_bar / eta``)."""
    thr = 2.0 * M_bar / eta
    if gamma_0 is None:
        gamma_0 = 2.0 * thr
    if not gamma_0 > thr:
        raise GammaTooSmall(f"gamma_0={gamma_0:.6g} must exceed 2 M_bar / eta = {thr:.6g}")
    if not growth > 1.0:
        raise ValueError("growth must exceed 1")
    if count < 1:
        raise ValueError("count must be at least 1")
    gammas = tuple(gamma_0 * growth ** k for k in range(count))
    alphas = tuple(alpha_of(g, M_bar, eta) for g in gammas)
    rhos = tuple(a / eta for a in alphas)
    return PenaltySchedule(gammas, alphas, rhos, float(M_bar), float(eta))


def shift_initial_point(geom: LevelSetC, x0, rho_k: float) -> np.ndarray:
    """Move a boundary point inward by ``rho_k`` along the inner normal; interior points stay."""
    x0 = np.asarray(x0, dtype=float)
    if geom.eval_psi(x0) < -geom.bdry_tol:
        return x0.copy()
    g = geom.grad_psi(x0)
    return x0 - rho_k * g / np.linalg.norm(g)


def first_inner_start(geom: LevelSetC, schedule: PenaltySchedule, x0) -> Optional[int]:
    """First stage ``k`` whose shifted start lies in ``C(k) = {psi <= -alpha_k}``, or ``None``."""
    for k, (a, r) in enumerate(zip(schedule.alphas, schedule.rhos)):
        if geom.eval_psi(shift_initial_point(geom, x0, r)) <= -a:
            return k
    return None


def first_stage_where(flags) -> Optional[int]:
    """Index from which every flag holds, or ``None`` when the last one fails."""
    flags = list(flags)
    k = len(flags)
    while k > 0 and flags[k - 1]:
        k -= 1
    return None if k == len(flags) else k


def shifted_terminal_set(C1: EndpointSet, x_bar_1, x_gamma_1, geom: LevelSetC,
                         delta0: Optional[float] = None) -> EndpointSet:
    """``[(C1 ∩ B(x_bar_1, delta0)) - x_bar_1 + x_gamma_1] ∩ C``."""
    x_bar_1 = np.asarray(x_bar_1, dtype=float)
    shift = np.asarray(x_gamma_1, dtype=float) - x_bar_1
    out = C1.shifted(shift)
    ball = None if delta0 is None else (x_bar_1, float(delta0))
    return replace(out, ball=ball, within=geom)
