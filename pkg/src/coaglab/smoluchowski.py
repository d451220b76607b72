"""Deterministic layer: the coagulation ODE system on a truncated mass range.

The density u_l(t) of mass-l particles evolves by

    du_l/dt = sum_{i=1}^{l-1} K(i, l-i) u_i u_{l-i}  -  2 sum_i K(l, i) u_l u_i,

the first sum creating mass l from smaller pairs and the second removing
mass l by coagulation with anything.  (Note the loss carries coefficient 2
and the gain coefficient 1: the gain sum runs over ordered pairs.  Other
texts use a 1/2-gain convention, which differs by the time rescaling
t -> 2t.)

On the window {1..L} the gain flux into masses above L is integrated into
the leaked totals of the DensityVector rather than dropped, so first-moment
conservation remains exactly testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernels import KernelSpec
from .state import DensityVector, NEG_CLAMP_TOL


class SolverError(ValueError):
    """Invalid solver configuration."""


@dataclass(frozen=True)
class SolverConfig:
    """Fixed-step RK4 by default; set atol for step-doubling adaptivity.

    A fixed step must satisfy dt <= 1/(6 sup K): the right-hand side is
    Lipschitz on the subprobability set with constant at most 6 sup K, and
    that bound keeps the explicit scheme comfortably stable.
    """

    truncation: int
    horizon: float
    grid: Sequence[float]
    dt: float | None = 1e-3
    atol: float | None = None

    def validate(self, kernel: KernelSpec) -> None:
        if self.truncation < 1:
            raise SolverError("truncation must be >= 1")
        if self.horizon < 0:
            raise SolverError("horizon must be nonnegative")
        g = list(self.grid)
        if g != sorted(g) or (g and (g[0] < 0 or g[-1] > self.horizon + 1e-15)):
            raise SolverError("grid must be sorted and lie within [0, horizon]")
        if self.atol is not None:
            if not 0.0 < self.atol <= 1e-6:
                raise SolverError("atol must lie in (0, 1e-6]")
        else:
            if self.dt is None or self.dt <= 0:
                raise SolverError("a positive dt is required for fixed-step mode")
            if kernel.sup_norm > 0 and self.dt > 1.0 / (6.0 * kernel.sup_norm):
                raise SolverError(
                    f"dt={self.dt} violates the stability bound 1/(6 supK)="
                    f"{1.0 / (6.0 * kernel.sup_norm):.6g}"
                )


@dataclass(frozen=True)
class DeterministicTrajectory:
    """Dense solver output: times (including every internal step) and states."""

    truncation: int
    times: np.ndarray
    states: list  # list[DensityVector], aligned with times
    kernel_desc: dict = field(default_factory=dict)
    dt: float | None = None
    atol: float | None = None

    def density_at(self, t: float) -> DensityVector:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or abs(self.times[i] - t) > 1e-12:
            raise KeyError(f"time {t} is not a trajectory node")
        return self.states[i]

    def values_matrix(self) -> np.ndarray:
        return np.stack([s.values for s in self.states])


def coagulation_operator(kernel: KernelSpec, u: np.ndarray) -> np.ndarray:
    """Gain-minus-loss operator on a length-L density array.

    Loss partners are truncated at L, matching the window the solver
    integrates on.  Satisfies ||out||_1 <= 3 supK ||u||_1^2.
    """
    L = u.size
    tab = kernel.rate_table(L)
    gain = _gain(kernel, u, u)
    loss = 2.0 * u * (tab[1:, 1:] @ u)
    return gain - loss


def self_pair_correction(kernel: KernelSpec, u: np.ndarray) -> np.ndarray:
    """Finite-size correction 2 K(l,l) u_l - K(l/2,l/2) u_{l/2}.

    The half-mass term is absent for odd l.  This is exactly the O(1/n)
    difference between the count-level drift and the mean-field operator:
    a particle cannot coagulate with itself, and same-mass pairs are
    counted N(N-1) rather than N^2 times.
    Satisfies ||out||_1 <= 3 supK ||u||_1.
    """
    L = u.size
    tab = kernel.rate_table(L)
    diag = np.diag(tab)[1:]                      # K(l, l), l = 1..L
    out = 2.0 * diag * u
    half = np.arange(2, L + 1, 2)                # even l have a half-mass term
    out[half - 1] -= diag[half // 2 - 1] * u[half // 2 - 1]
    return out


def _gain(kernel: KernelSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """gain[l] = sum_{i=1}^{l-1} K(i, l-i) u_i v_{l-i} for l = 1..L (1-based masses)."""
    L = u.size
    anti = kernel.antidiagonals(L)
    out = np.zeros(L)
    for l in range(2, L + 1):
        out[l - 1] = float(anti[l] @ (u[: l - 1] * v[l - 2 :: -1]))
    return out


def _rhs(kernel: KernelSpec, L: int, state: np.ndarray) -> np.ndarray:
    """Augmented RHS over (u_1..u_L, leaked_number, leaked_mass).

    The leak rates are the number and mass fluxes carried by gain terms
    landing beyond L:  sum_{i,j<=L, i+j>L} K u_i u_j  and the same sum
    weighted by (i+j).
    """
    u = state[:L]
    tab = kernel.rate_table(L)
    gain = _gain(kernel, u, u)
    ku = tab[1:, 1:] @ u
    loss = 2.0 * u * ku
    masses = np.arange(1.0, L + 1)
    pair_number = float(u @ ku)                  # sum_{i,j<=L} K u_i u_j
    pair_mass = 2.0 * float((masses * u) @ ku)   # same, weighted by i+j
    flux_number = pair_number - float(gain.sum())
    flux_mass = pair_mass - float(masses @ gain)
    out = np.empty(L + 2)
    out[:L] = gain - loss
    out[L] = flux_number
    out[L + 1] = flux_mass
    return out


def _rk4_step(f: Callable[[np.ndarray], np.ndarray], y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def solve(u0: DensityVector, kernel: KernelSpec, cfg: SolverConfig) -> DeterministicTrajectory:
    """Integrate the truncated system from u0 and record every step taken.

    Fixed-step mode subdivides each grid interval uniformly with steps of
    size at most cfg.dt so grid times are hit exactly.  Adaptive mode uses
    classical step doubling with the l1 difference of a full step versus
    two half steps as the error estimate.
    """
    cfg.validate(kernel)
    L = cfg.truncation
    if u0.truncation != L:
        raise SolverError("initial condition truncation differs from solver truncation")
    u0.validate()

    f = lambda y: _rhs(kernel, L, y)
    state = np.concatenate([u0.values, [u0.leaked_number, u0.leaked_mass]])
    times = [0.0]
    states = [_wrap(L, state)]

    targets = [t for t in cfg.grid if t > 0.0]
    if cfg.horizon > 0 and (not targets or targets[-1] < cfg.horizon):
        targets.append(cfg.horizon)
    t = 0.0
    for t_next in targets:
        span = t_next - t
        if span <= 0:
            continue
        if cfg.atol is None:
            nsteps = max(1, int(np.ceil(span / cfg.dt - 1e-12)))
            h = span / nsteps
            for _ in range(nsteps):
                state = _rk4_step(f, state, h)
                t += h
                times.append(t)
                states.append(_wrap(L, state))
            t = t_next  # suppress accumulated rounding in the time variable
            times[-1] = t_next
        else:
            state, t = _adaptive_span(f, state, t, t_next, cfg.atol, times, states, kernel)
    return DeterministicTrajectory(
        truncation=L,
        times=np.array(times),
        states=states,
        kernel_desc=kernel.describe(),
        dt=cfg.dt if cfg.atol is None else None,
        atol=cfg.atol,
    )


def _adaptive_span(f, state, t, t_end, atol, times, states, kernel):
    """Step-doubling RK4 over [t, t_end]: accept when |full - two halves|_1/15 < atol."""
    sup = kernel.sup_norm
    h = min(t_end - t, 1.0 / (6.0 * sup) if sup > 0 else t_end - t)
    h_min = (t_end - t) * 1e-12
    while t < t_end - 1e-15:
        h = min(h, t_end - t)
        full = _rk4_step(f, state, h)
        half = _rk4_step(f, _rk4_step(f, state, 0.5 * h), 0.5 * h)
        err = float(np.abs(full - half).sum()) / 15.0
        if err <= atol or h <= h_min:
            state = half
            t += h
            times.append(t)
            states.append(_wrap(len(state) - 2, state))
            if err < atol / 32.0:
                h *= 2.0
        else:
            h *= 0.5
    return state, t


def _wrap(L: int, state: np.ndarray) -> DensityVector:
    vals = state[:L].copy()
    # rounding-size negatives are clamped; anything larger is a real defect
    vals[(vals > -NEG_CLAMP_TOL) & (vals < 0.0)] = 0.0
    return DensityVector(
        truncation=L,
        values=vals,
        leaked_number=max(float(state[L]), 0.0),
        leaked_mass=max(float(state[L + 1]), 0.0),
    )


def constant_kernel_exact(l: int, t: float, c: float = 1.0) -> float:
    """Monodisperse-start solution for the constant kernel K = c:

        u_l(t) = (c t)^{l-1} / (1 + c t)^{l+1}.

    Its number density sums to 1/(1+ct) and its mass density to 1.
    """
    if l < 1:
        raise ValueError("mass index must be >= 1")
    x = c * t
    if l == 1:
        return 1.0 / (1.0 + x) ** 2
    # (x/(1+x))^{l-1} / (1+x)^2 never overflows, unlike separated powers
    return (x / (1.0 + x)) ** (l - 1) / (1.0 + x) ** 2


def constant_kernel_exact_vector(L: int, t: float, c: float = 1.0) -> np.ndarray:
    """Length-L array of constant_kernel_exact values."""
    return np.array([constant_kernel_exact(l, t, c) for l in range(1, L + 1)])
