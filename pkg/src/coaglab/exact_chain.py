"""Exact finite-state reference for small systems.

For total mass n <= 12 the lumped coagulation chain lives on the integer
partitions of n (p(12) = 77 states), so its generator fits in a dense
matrix and transition probabilities can be computed to near machine
precision by uniformization.  This module is the ground truth against
which the event-driven samplers are validated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .kernels import KernelSpec

MAX_EXACT_N = 12
_POISSON_TAIL = 1e-12


@lru_cache(maxsize=None)
def partitions(n: int) -> tuple:
    """All integer partitions of n as decreasing tuples, lexicographically sorted."""

    def gen(remaining: int, cap: int):
        if remaining == 0:
            yield ()
            return
        for first in range(min(remaining, cap), 0, -1):
            for rest in gen(remaining - first, first):
                yield (first,) + rest

    return tuple(sorted(gen(n, n)))


def _counts(part: tuple) -> dict:
    c: dict[int, int] = {}
    for l in part:
        c[l] = c.get(l, 0) + 1
    return c


@dataclass(frozen=True)
class PartitionChain:
    """Dense generator of the lumped chain on partitions of n."""

    n: int
    kernel: KernelSpec
    states: tuple
    index: dict
    generator: np.ndarray

    def initial_distribution(self) -> np.ndarray:
        """Point mass at the all-ones (monodisperse) partition."""
        p = np.zeros(len(self.states))
        p[self.index[(1,) * self.n]] = 1.0
        return p


def build_chain(n: int, kernel: KernelSpec) -> PartitionChain:
    """Enumerate partitions of n and fill the merge-rate generator.

    A merge of two parts of sizes l < m fires at rate (2/n) K(l,m) N_l N_m
    and of two equal parts at rate (1/n) K(l,l) N_l (N_l - 1).
    """
    if n > MAX_EXACT_N:
        raise ValueError(f"exact chain limited to n <= {MAX_EXACT_N}")
    if n < 1:
        raise ValueError("n must be positive")
    states = partitions(n)
    index = {p: i for i, p in enumerate(states)}
    G = np.zeros((len(states), len(states)))
    for i, part in enumerate(states):
        counts = _counts(part)
        masses = sorted(counts)
        for x, a in enumerate(masses):
            Na = counts[a]
            for b in masses[x:]:
                if a == b:
                    rate = kernel.rate(a, a) * Na * (Na - 1) / n
                else:
                    rate = 2.0 * kernel.rate(a, b) * Na * counts[b] / n
                if rate == 0.0:
                    continue
                merged = list(part)
                merged.remove(a)
                merged.remove(b)
                merged.append(a + b)
                j = index[tuple(sorted(merged, reverse=True))]
                G[i, j] += rate
                G[i, i] -= rate
    return PartitionChain(n=n, kernel=kernel, states=states, index=index, generator=G)


def distribution_at(chain: PartitionChain, t: float, p0: np.ndarray | None = None) -> np.ndarray:
    """Distribution at time t by uniformization.

    p(t) = e^{-Lam t} sum_k (Lam t)^k / k!  p0 P^k  with P = I + G/Lam and
    Lam the largest exit rate; the series stops when the remaining Poisson
    tail is below 1e-12, which bounds the truncation error by the same
    amount in total variation.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    G = chain.generator
    p = chain.initial_distribution() if p0 is None else np.asarray(p0, dtype=float)
    lam = float(-G.diagonal().min())
    if lam == 0.0 or t == 0.0:
        return p.copy()
    P = np.eye(G.shape[0]) + G / lam
    x = lam * t
    weight = math.exp(-x)
    acc = weight * p
    vec = p
    covered = weight
    k = 0
    while covered < 1.0 - _POISSON_TAIL:
        k += 1
        vec = vec @ P
        weight *= x / k
        acc += weight * vec
        covered += weight
        if k > 100 + int(10 * x):  # defensive cap; never reached at these sizes
            break
    return acc


def exact_expectations(
    chain: PartitionChain, t: float, observable: Callable[[tuple], float]
) -> float:
    """E[observable(partition at time t)] for the monodisperse start."""
    p = distribution_at(chain, t)
    vals = np.array([observable(s) for s in chain.states])
    return float(p @ vals)


def count_observable(l: int) -> Callable[[tuple], float]:
    """N_l: number of parts of size l."""
    return lambda part: float(sum(1 for x in part if x == l))


def moment_observable(p: int, n: int) -> Callable[[tuple], float]:
    """sum_l l^p N_l / n  (the p-th moment of the empirical density)."""
    return lambda part: sum(x ** p for x in part) / n


def parts_observable() -> Callable[[tuple], float]:
    """Number of particles."""
    return lambda part: float(len(part))
