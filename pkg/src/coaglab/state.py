"""State containers: mass histograms, density vectors, fluctuation vectors.

The microscopic state of a coagulation system with total mass n is the
map {mass l >= 1 -> particle count N_l}; everything observable downstream
(empirical densities, moments, martingale integrands) is a function of
these counts, so individual particle sites are never stored.

Densities live on a finite truncation window {1..L}.  Mass and particle
number that fall beyond the window are tracked explicitly as "leaked"
totals instead of being dropped, which keeps conservation checks exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

NEG_CLAMP_TOL = 1e-12   # ODE outputs may carry rounding-size negative entries
SUM_TOL = 1e-9          # slack for the subprobability / unit-mass inequalities


@dataclass(frozen=True)
class MassHistogram:
    """Counts of particles per mass with fixed total mass n.

    Invariants: sum_l l * counts[l] == n exactly (integer arithmetic),
    all stored counts positive, 1 <= particle count <= n.
    """

    n: int
    counts: Mapping[int, int]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("total mass n must be a positive integer")
        mass = 0
        particles = 0
        for l, c in self.counts.items():
            if l < 1 or c < 1 or c != int(c):
                raise ValueError(f"bad histogram entry {l}:{c}")
            mass += l * c
            particles += c
        if mass != self.n:
            raise ValueError(f"histogram mass {mass} != n = {self.n}")
        object.__setattr__(self, "counts", dict(self.counts))
        object.__setattr__(self, "_particles", particles)

    @classmethod
    def _trusted(cls, n: int, counts: dict, particles: int) -> "MassHistogram":
        """Skip validation for counts already checked by the caller."""
        self = object.__new__(cls)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "_particles", particles)
        return self

    @property
    def particle_count(self) -> int:
        return self._particles

    def moment(self, p: int) -> int:
        """sum_l l^p N_l, exact integer."""
        return sum((l ** p) * c for l, c in self.counts.items())

    def to_json(self) -> str:
        return json.dumps({"n": self.n, "counts": {str(l): c for l, c in sorted(self.counts.items())}})

    @classmethod
    def from_json(cls, text: str) -> "MassHistogram":
        obj = json.loads(text)
        return cls(n=int(obj["n"]), counts={int(l): int(c) for l, c in obj["counts"].items()})


def monodisperse_histogram(n: int) -> MassHistogram:
    """All n particles have mass 1."""
    return MassHistogram(n=n, counts={1: n})


@dataclass(frozen=True)
class DensityVector:
    """Nonnegative density on masses 1..L plus leaked tail totals.

    values[i] is the density at mass i+1.  leaked_number / leaked_mass
    account for particle number and mass located beyond L, so that
    sum(values) + leaked_number <= 1 and sum(l * values) + leaked_mass
    stays equal to the initial unit mass.
    """

    truncation: int
    values: np.ndarray
    leaked_number: float = 0.0
    leaked_mass: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.truncation,):
            raise ValueError(f"values must have length L={self.truncation}")
        if vals.size:
            mn = vals.min()
            if mn < 0.0:
                if mn < -NEG_CLAMP_TOL:
                    raise ValueError(f"negative density entry {mn:.3e}")
                vals = np.where(vals < 0.0, 0.0, vals)
        object.__setattr__(self, "values", vals)

    @classmethod
    def _trusted(cls, truncation, values, leaked_number=0.0, leaked_mass=0.0):
        """Skip validation for values known nonnegative (simulator hot path)."""
        self = object.__new__(cls)
        object.__setattr__(self, "truncation", truncation)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "leaked_number", leaked_number)
        object.__setattr__(self, "leaked_mass", leaked_mass)
        return self

    def validate(self, tol: float = SUM_TOL) -> None:
        """Check subprobability and unit-mass inequalities."""
        masses = np.arange(1, self.truncation + 1)
        if self.values.sum() + self.leaked_number > 1.0 + tol:
            raise ValueError("total number exceeds 1")
        if float(masses @ self.values) + self.leaked_mass > 1.0 + tol:
            raise ValueError("total mass exceeds 1")
        if self.leaked_number < -tol or self.leaked_mass < -tol:
            raise ValueError("negative leaked totals")

    def number_total(self) -> float:
        return float(self.values.sum()) + self.leaked_number

    def mass_total(self) -> float:
        masses = np.arange(1, self.truncation + 1)
        return float(masses @ self.values) + self.leaked_mass

    def to_json(self) -> str:
        return json.dumps(
            {
                "L": self.truncation,
                "values": list(self.values),
                "leaked_number": self.leaked_number,
                "leaked_mass": self.leaked_mass,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "DensityVector":
        obj = json.loads(text)
        return cls(
            truncation=int(obj["L"]),
            values=np.array(obj["values"], dtype=float),
            leaked_number=float(obj["leaked_number"]),
            leaked_mass=float(obj["leaked_mass"]),
        )


def delta_density(L: int, mass: int = 1) -> DensityVector:
    """Unit density concentrated at a single mass (monodisperse start for mass=1)."""
    vals = np.zeros(L)
    if not 1 <= mass <= L:
        raise ValueError("mass must lie within the truncation window")
    vals[mass - 1] = 1.0
    return DensityVector(truncation=L, values=vals)


@dataclass(frozen=True)
class FluctuationVector:
    """Signed deviation field sqrt(n) * (empirical density - reference)."""

    truncation: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.truncation,):
            raise ValueError(f"values must have length L={self.truncation}")
        object.__setattr__(self, "values", vals)


def histogram_to_density(h: MassHistogram, L: int) -> DensityVector:
    """Empirical density N_l / n on 1..L; tail classes feed the leaked totals."""
    if L < 1:
        raise ValueError("truncation must be >= 1")
    vals = np.zeros(L)
    leaked_number = 0
    leaked_mass = 0
    for l, c in h.counts.items():
        if l <= L:
            vals[l - 1] = c
        else:
            leaked_number += c
            leaked_mass += l * c
    return DensityVector(
        truncation=L,
        values=vals / h.n,
        leaked_number=leaked_number / h.n,
        leaked_mass=leaked_mass / h.n,
    )


def fluctuation_field(pi: DensityVector, u: DensityVector, n: int) -> FluctuationVector:
    """sqrt(n) * (pi - u), entrywise on the common truncation window."""
    if pi.truncation != u.truncation:
        raise ValueError("truncation mismatch between empirical and reference densities")
    root = math.sqrt(n)
    return FluctuationVector(truncation=pi.truncation, values=root * (pi.values - u.values))


def _as_array(v) -> np.ndarray:
    return np.asarray(getattr(v, "values", v), dtype=float)


def norm_l1(v) -> float:
    """sum_l |v_l|"""
    return float(np.abs(_as_array(v)).sum())


def norm_l1_weighted(v) -> float:
    """sum_l l * |v_l|  (mass-weighted l1 norm)"""
    arr = np.abs(_as_array(v))
    return float(np.arange(1, arr.size + 1) @ arr)


def norm_sup(v) -> float:
    """max_l |v_l|"""
    arr = np.abs(_as_array(v))
    return float(arr.max()) if arr.size else 0.0
