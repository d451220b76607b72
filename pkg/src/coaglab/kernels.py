"""Coagulation rate kernels.

A kernel assigns a merge rate K(l, m) to every pair of particle masses.
Every kernel here is symmetric, bounded, and vanishes whenever either
argument is zero; those three properties are what the simulation and the
limit equations rely on, so they are enforced at construction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Tuple

import numpy as np


class KernelError(ValueError):
    """Invalid kernel construction (asymmetric table, negative rate, ...)."""


_MEMO_CEILING = 512  # dense rate tables are cached up to this mass


@dataclass(frozen=True)
class KernelSpec:
    """Immutable coagulation kernel with a known supremum.

    kind is one of "constant", "capped-brownian", "lookup-table".  sup_norm
    is an exact supremum of rate() over all mass pairs; the thinning
    sampler divides by it, so it must never under-estimate.
    """

    kind: str
    c: float = 0.0                     # constant kernel rate
    prefactor: float = 0.0             # capped-brownian C0
    cap: float = 0.0                   # capped-brownian bound
    table: Mapping[Tuple[int, int], float] = field(default_factory=dict)
    default: float = 0.0               # lookup-table fallback value
    sup_norm: float = 0.0

    def __getstate__(self):
        # memo tables are rebuilt on demand; keep pickles (worker jobs) small
        return {k: v for k, v in self.__dict__.items() if not k.startswith("_")}

    def __setstate__(self, state):
        self.__dict__.update(state)

    def rate(self, l: int, m: int) -> float:
        """Merge rate of a mass-l and a mass-m particle; 0 if either is 0."""
        if l <= 0 or m <= 0:
            return 0.0
        if self.kind == "constant":
            return self.c
        if self.kind == "capped-brownian":
            a = l ** (1.0 / 3.0)
            b = m ** (1.0 / 3.0)
            return min(self.prefactor * (a + b) * (1.0 / a + 1.0 / b), self.cap)
        if (l, m) in self.table:
            return self.table[(l, m)]
        return self.default

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def rate_table(self, max_mass: int) -> np.ndarray:
        """Dense (max_mass+1) x (max_mass+1) table; row/column 0 is zero.

        Tables up to the memo ceiling are cached on the instance because
        rate() sits in inner loops of the solver and the samplers.
        """
        cache = self.__dict__.setdefault("_tables", {})
        have = cache.get("size", -1)
        if have >= max_mass:
            return cache["table"][: max_mass + 1, : max_mass + 1]
        size = max(max_mass, min(_MEMO_CEILING, max(have, 64)))
        tab = np.zeros((size + 1, size + 1))
        if self.kind == "constant":
            tab[1:, 1:] = self.c
        elif self.kind == "capped-brownian":
            # scalar pow, so table entries match rate() bit for bit
            r = np.array([float(l) ** (1.0 / 3.0) for l in range(1, size + 1)])
            tab[1:, 1:] = np.minimum(
                self.prefactor * np.add.outer(r, r) * np.add.outer(1.0 / r, 1.0 / r),
                self.cap,
            )
        else:
            tab[1:, 1:] = self.default
            for (l, m), v in self.table.items():
                if l <= size and m <= size:
                    tab[l, m] = v
        cache["size"] = size
        cache["table"] = tab
        return tab[: max_mass + 1, : max_mass + 1]

    def rate_table_list(self, max_mass: int) -> list:
        """rate_table as nested lists (faster scalar indexing in samplers)."""
        cache = self.__dict__.setdefault("_table_lists", {})
        if max_mass not in cache:
            cache[max_mass] = self.rate_table(max_mass).tolist()
        return cache[max_mass]

    def antidiagonals(self, max_mass: int) -> list:
        """antidiagonals(L)[l] = array of K(i, l-i) for i = 1..l-1.

        These slices drive the gain convolution of the ODE solver and the
        linearized operators; caching them avoids refancying the rate
        table on every right-hand-side evaluation.
        """
        cache = self.__dict__.setdefault("_antidiag", {})
        if max_mass not in cache:
            tab = self.rate_table(max_mass)
            rows = [np.empty(0), np.empty(0)]
            for l in range(2, max_mass + 1):
                i = np.arange(1, l)
                rows.append(np.ascontiguousarray(tab[i, l - i]))
            cache[max_mass] = rows
        return cache[max_mass]

    def describe(self) -> dict:
        """JSON-serializable declaration, inverse of from_config()."""
        memo = self.__dict__.get("_describe")
        if memo is not None:
            return memo
        if self.kind == "constant":
            memo = {"kind": "constant", "c": self.c}
        elif self.kind == "capped-brownian":
            memo = {"kind": "capped-brownian", "c0": self.prefactor, "cap": self.cap}
        else:
            memo = {
                "kind": "lookup-table",
                "entries": [[l, m, v] for (l, m), v in sorted(self.table.items())],
                "default": self.default,
            }
        self.__dict__["_describe"] = memo
        return memo


def constant_kernel(c: float) -> KernelSpec:
    """K(l, m) = c for occupied pairs."""
    if c < 0:
        raise KernelError("constant kernel rate must be nonnegative")
    return KernelSpec(kind="constant", c=float(c), sup_norm=float(c))


def capped_brownian_kernel(c0: float, cap: float) -> KernelSpec:
    """K(l, m) = min(c0 (l^{1/3}+m^{1/3})(l^{-1/3}+m^{-1/3}), cap).

    The uncapped form equals c0 (2 + r^{1/3} + r^{-1/3}) in the mass ratio
    r = l/m, so it is unbounded as r grows and the supremum over all pairs
    is exactly the cap (for any cap > 0 the cap is attained or the kernel
    is constant at the cap).
    """
    if c0 < 0 or cap < 0:
        raise KernelError("capped-brownian parameters must be nonnegative")
    return KernelSpec(
        kind="capped-brownian", prefactor=float(c0), cap=float(cap), sup_norm=float(cap)
    )


def lookup_table_kernel(
    entries: Mapping[Tuple[int, int], float], default: float = 0.0
) -> KernelSpec:
    """Kernel from explicit (l, m) -> rate entries plus a fallback value.

    Entries are symmetrized; providing both (l, m) and (m, l) with
    different values is rejected here, not at evaluation time.
    """
    if default < 0:
        raise KernelError("lookup-table default must be nonnegative")
    table: dict[Tuple[int, int], float] = {}
    for (l, m), v in entries.items():
        l, m, v = int(l), int(m), float(v)
        if v < 0:
            raise KernelError(f"negative rate for pair ({l},{m})")
        if l <= 0 or m <= 0:
            if v != 0.0:
                raise KernelError(f"pair ({l},{m}) touches mass 0 and must have rate 0")
            continue
        for key in ((l, m), (m, l)):
            if key in table and table[key] != v:
                raise KernelError(f"asymmetric entries for pair {key}")
            table[key] = v
    sup = max([float(default)] + list(table.values()))
    return KernelSpec(kind="lookup-table", table=table, default=float(default), sup_norm=sup)


def from_config(decl: Mapping) -> KernelSpec:
    """Build a kernel from its run-config declaration."""
    kind = decl.get("kind")
    if kind == "constant":
        return constant_kernel(decl["c"])
    if kind in ("capped-brownian", "capped_brownian"):
        return capped_brownian_kernel(decl["c0"], decl["cap"])
    if kind in ("lookup-table", "lookup_table"):
        entries = {(int(l), int(m)): float(v) for l, m, v in decl.get("entries", [])}
        return lookup_table_kernel(entries, decl.get("default", 0.0))
    raise KernelError(f"unknown kernel kind: {kind!r}")
