"""Theoretical step sizes and convergence-bound right-hand sides.

Three regimes are covered, matching the three convergence statements the
tests verify by dominance: the small-step regime (thm1) where the bound is
driven by the shuffling variance, the server-step regime (thm2) driven by
client sampling, and the global-step regime (thm3) where only the outermost
step contracts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .optimizer import StepSizes

THM1 = "thm1"
THM2 = "thm2"
THM3 = "thm3"
REGIMES = (THM1, THM2, THM3)


@dataclass(frozen=True)
class RegimeParams:
    """Problem constants plus variance levels for one bound regime."""

    regime: str
    L: float
    mu: float
    M: int
    N: int
    C: int
    sigma_star2: float = 0.0
    sigma_tilde_star2: float = 0.0
    dist0_sq: float = 0.0  # ||x_0 - x*||^2

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.mu <= 0 or self.L < self.mu:
            raise ValueError("need 0 < mu <= L")
        if self.M % self.C != 0:
            raise ValueError("C must divide M")
        if min(self.sigma_star2, self.sigma_tilde_star2, self.dist0_sq) < 0:
            raise ValueError("variances and distances must be nonnegative")

    @property
    def R(self) -> int:
        return self.M // self.C

    @property
    def kappa(self) -> float:
        return self.L / self.mu


def sigma_ds_upper(L: float, M: int, N: int, C: int, sigma_tilde_star2: float, sigma_star2: float) -> float:
    """Closed-form bound on the shuffling-induced variance sigma^2_DS."""
    return L * (M * N * N / (2.0 * C * C) + 2.0 * N * N) * sigma_tilde_star2 + L * N / 2.0 * sigma_star2


def sigma_cs_upper(L: float, M: int, C: int, sigma_tilde_star2: float) -> float:
    """Closed-form bound on the client-sampling variance sigma^2_CS."""
    return L * M / (2.0 * C * C) * sigma_tilde_star2


def theoretical_steps(rp: RegimeParams) -> StepSizes:
    """Largest step sizes permitted by the chosen regime's constraints."""
    L, N, R = rp.L, rp.N, rp.R
    if rp.regime == THM1:
        gamma = 1.0 / L
        eta = gamma * N
        theta = eta * R
    elif rp.regime == THM2:
        eta = 1.0 / (4.0 * L)
        gamma = min(1.0 / (8.0 * N * L * math.sqrt(rp.kappa)), eta / N)
        theta = eta * R
    else:
        theta = 1.0 / (16.0 * L)
        eta = theta / R
        gamma = eta / N
    return StepSizes(gamma=gamma, eta=eta, theta=theta)


def bound_rhs(rp: RegimeParams, steps: StepSizes, T: int) -> float:
    """Right-hand side of the regime's convergence bound after T meta-epochs.

    The variance proxies sigma^2_DS and sigma^2_CS enter through their
    closed-form upper bounds.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    mu, kappa, N, R = rp.mu, rp.kappa, rp.N, rp.R
    g, e, th = steps.gamma, steps.eta, steps.theta
    s2, st2 = rp.sigma_star2, rp.sigma_tilde_star2
    if rp.regime == THM1:
        contraction = (1.0 - g * mu) ** (N * R * T) * rp.dist0_sq
        stat = 2.0 * g * g / mu * sigma_ds_upper(rp.L, rp.M, N, rp.C, st2, s2)
        return contraction + stat
    if rp.regime == THM2:
        contraction = (1.0 - e * mu) ** (R * T) * rp.dist0_sq
        stat = 4.0 / mu * e * e * sigma_cs_upper(rp.L, rp.M, rp.C, st2)
        stat += 12.0 * kappa * kappa * g * g * N * N * st2
        stat += 12.0 * kappa * kappa * g * g * N * s2
        return contraction + stat
    contraction = (1.0 - th * mu / 2.0) ** T * rp.dist0_sq
    stat = 16.0 * g * g * kappa * N * N * st2
    stat += 16.0 * g * g * kappa * N * s2
    if rp.M > 1:
        stat += 16.0 * e * e * kappa / (N * N * R) * (rp.M - rp.C) / ((rp.M - 1) * rp.C) * st2
    return contraction + stat
