"""Diffusion noise schedules, subdivision/branching schedules, work accounting.

The variance-preserving schedule uses a linear rate beta(t) on [0, T], so
alpha(t) = exp(-1/2 * int_0^t beta) has a closed form. Subdivision schedules
partition [t_min, T] into K+1 equal denoising windows with geometrically
growing populations N_k = N_0 * b^k; work is counted in score-network
forward passes, with branching charged at `c_psi` units per parent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiffusionSchedule",
    "SubdivisionSchedule",
    "make_vp_schedule",
    "make_subdivision",
    "work_full",
    "work_ablation",
    "level_weights",
]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance-preserving forward SDE with linear beta(t).

    alpha(t) is the signal scale, sigma(t) the marginal noise scale; with
    unit-variance data marginal_var(t) = alpha^2 + sigma^2 = 1 for all t.
    `diffusion_coeff` is the SDE coefficient g(t) = sqrt(beta(t)), distinct
    from the marginal sigma(t).
    """

    kind: str
    beta_min: float
    beta_max: float
    T: float
    t_min: float
    n_steps: int

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * np.asarray(t) / self.T

    def beta_integral(self, t):
        t = np.asarray(t)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2 / self.T

    def alpha(self, t):
        return np.exp(-0.5 * self.beta_integral(t))

    def sigma(self, t):
        return np.sqrt(np.maximum(1.0 - self.alpha(t) ** 2, 0.0))

    def marginal_var(self, t):
        return self.alpha(t) ** 2 + self.sigma(t) ** 2

    def diffusion_coeff(self, t):
        return np.sqrt(self.beta(t))

    @property
    def dt(self) -> float:
        return (self.T - self.t_min) / self.n_steps


def make_vp_schedule(beta_min: float, beta_max: float, T: float, t_min: float,
                     n_steps: int) -> DiffusionSchedule:
    if beta_min <= 0 or beta_max <= 0 or T <= 0 or t_min <= 0:
        raise ValueError("schedule parameters must be positive")
    if beta_min > beta_max:
        raise ValueError(f"beta_min {beta_min} > beta_max {beta_max}")
    if t_min >= T:
        raise ValueError(f"t_min {t_min} must be < T {T}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return DiffusionSchedule("variance-preserving", float(beta_min), float(beta_max),
                             float(T), float(t_min), int(n_steps))


@dataclass(frozen=True)
class SubdivisionSchedule:
    """Branching schedule: populations N_k over K+1 denoising windows.

    `t_cuts` holds the K+2 window boundaries descending from T to t_min;
    level k runs its S = n_steps/(K+1) reverse steps on [t_cuts[k+1],
    t_cuts[k]] with N_k particles, then branches N_k -> b*N_k.
    """

    K: int
    b: int
    N_levels: tuple
    t_cuts: tuple
    S: int
    c_psi: float
    n_steps: int = field(default=0)

    @property
    def N(self) -> int:
        return self.N_levels[-1]

    def window(self, k: int):
        """(t_hi, t_lo) of level k; level 0 is the coarsest/noisiest."""
        return self.t_cuts[k], self.t_cuts[k + 1]


def make_subdivision(N: int, b: int, K: int, n_steps: int, c_psi: float,
                     T: float = 1.0, t_min: float = 1e-3) -> SubdivisionSchedule:
    if b < 1 or K < 0 or N < 1:
        raise ValueError("need b >= 1, K >= 0, N >= 1")
    if n_steps % (K + 1) != 0:
        raise ValueError(f"(K+1)={K + 1} must divide n_steps={n_steps}")
    n0, rem = divmod(N, b**K)
    if rem != 0 or n0 < 1:
        raise ValueError(f"b^K={b**K} must divide N={N}")
    levels = tuple(n0 * b**k for k in range(K + 1))
    cuts = tuple(np.linspace(T, t_min, K + 2).tolist())
    return SubdivisionSchedule(K=int(K), b=int(b), N_levels=levels, t_cuts=cuts,
                               S=n_steps // (K + 1), c_psi=float(c_psi),
                               n_steps=int(n_steps))


def work_full(sched: SubdivisionSchedule, N: int):
    """Score-net forward passes of the full hierarchical method.

    S * sum_k N_k denoising plus c_psi * sum_{k<K} N_k branching. The
    denoising part is exact integer arithmetic; with b=1 branching spawns
    no children and costs nothing.
    """
    _check_population(sched, N)
    levels = _levels_for(sched, N)
    denoise = sched.S * sum(levels)
    if sched.b == 1:
        return float(denoise)
    branch = sched.c_psi * sum(levels[:-1])
    return denoise + branch


def work_ablation(sched: SubdivisionSchedule, N: int, mode: str):
    """Work count with subdivision or branching removed.

    Both equal n_steps * N exactly: without branching, the only way to
    populate level k+1 is to denoise (b-1)*N_k fresh chains for (k+1)*S
    steps each, which cancels the per-level savings.
    """
    _check_population(sched, N)
    n_steps = sched.S * (sched.K + 1)
    if mode == "no_subdivision":
        return n_steps * N
    if mode == "no_branching":
        levels = _levels_for(sched, N)
        fresh = sum(levels[k] * (k + 1) for k in range(sched.K))
        return sched.S * sum(levels) + sched.S * (sched.b - 1) * fresh
    raise ValueError(f"unknown ablation mode {mode!r}")


def level_weights(sched: SubdivisionSchedule, weighting: str = "practical_b_pow"):
    """Per-level loss weights: practical b^-k or theoretical (b*sqrt(N_{k+1}))^-k."""
    if weighting == "practical_b_pow":
        return [float(sched.b) ** (-k) for k in range(sched.K + 1)]
    if weighting == "theoretical":
        n0 = sched.N_levels[0]
        return [(sched.b * np.sqrt(n0 * float(sched.b) ** (k + 1))) ** (-k)
                for k in range(sched.K + 1)]
    raise ValueError(f"unknown weighting {weighting!r}")


def _levels_for(sched: SubdivisionSchedule, N: int):
    n0, rem = divmod(N, sched.b**sched.K)
    if rem != 0 or n0 < 1:
        raise ValueError(f"schedule invalid for N={N}")
    return [n0 * sched.b**k for k in range(sched.K + 1)]


def _check_population(sched: SubdivisionSchedule, N: int):
    if N < 1:
        raise ValueError("N must be >= 1")
