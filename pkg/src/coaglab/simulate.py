"""Exact event-driven simulation of the mean-field coagulation chain.

With total mass n, an (ordered) pair of distinct particles with masses
l, m merges at rate K(l, m)/n.  The chain is simulated on the lumped state
of mass counts {l -> N_l}, which is itself Markov: an unordered class pair
(l, m), l < m, fires at rate (2/n) K(l,m) N_l N_m and a same-class pair at
rate (1/n) K(l,l) N_l (N_l - 1).

Two exact samplers are provided:

* "direct": Gillespie over active class pairs (reference; O(classes^2)
  per event),
* "thinning": a uniform candidate pair among P(P-1) ordered particles is
  proposed at rate supK P(P-1)/n and accepted with probability
  K(l,m)/supK (default; O(1) expected per event).

Waiting times use inverse-CDF exponential sampling.  Replica r derives its
stream seed from (master_seed, r) through a SplitMix64-style mixer, so
ensembles are bitwise reproducible regardless of scheduling.

When martingale tracking is on, the running integrals of the exact drift
and quadratic-variation densities are accumulated as exact
piecewise-constant sums (the integrands only change at merge events).
"""

from __future__ import annotations

import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .kernels import KernelSpec
from .state import DensityVector, MassHistogram, histogram_to_density

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def replica_seed(master_seed: int, replica: int) -> int:
    """Deterministic 64-bit stream seed for a replica index.

    SplitMix64 output function evaluated at state master + (r+1) * golden;
    the canonical splittable-stream construction, so replica streams are
    fixed by (master_seed, r) alone and never by scheduling.
    """
    z = (master_seed + (replica + 1) * _GOLDEN) & _M64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _M64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _M64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SimConfig:
    """One replica's worth of simulation parameters.

    grid holds the snapshot times (sorted, nonnegative); nothing is
    simulated past the last grid time.  truncation is the window for
    density snapshots and, when tracking is on, for the drift/QV vectors.
    """

    n: int
    kernel: KernelSpec
    grid: Sequence[float]
    truncation: int
    seed: int
    strategy: str = "thinning"
    track_martingale: bool = False
    accumulator_mode: str = "incremental"
    initial_counts: dict | None = None

    def validate(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        g = list(self.grid)
        if not g or g != sorted(g) or g[0] < 0:
            raise ValueError("grid must be a nonempty sorted list of nonnegative times")
        if self.strategy not in ("thinning", "direct"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.accumulator_mode not in ("incremental", "full"):
            raise ValueError(f"unknown accumulator mode {self.accumulator_mode!r}")


@dataclass(frozen=True)
class Snapshot:
    """State at one grid time (cadlag: after the last event at time <= t)."""

    t: float
    density: DensityVector
    moments: tuple                       # (m0..m4) = sum_l l^p N_l, exact integers
    martingale: np.ndarray | None = None
    drift_integral: np.ndarray | None = None
    qv_integral: np.ndarray | None = None


@dataclass(frozen=True)
class Trajectory:
    """One replica's snapshots plus identifying metadata."""

    n: int
    kernel_desc: dict
    seed: int
    truncation: int
    strategy: str
    grid: tuple
    snapshots: list
    final_histogram: MassHistogram
    event_count: int


@dataclass(frozen=True)
class MartingaleAccumulator:
    """Running exact integrals of the drift and QV densities up to a time."""

    truncation: int
    time: float
    drift_integral: np.ndarray
    qv_integral: np.ndarray
    initial_density: DensityVector


# ------------------------------------------------------------------ exact densities

def _integrands_from_counts(counts: dict, n: int, kernel: KernelSpec, L: int):
    """Exact drift and QV densities of the lumped chain, per mass l <= L.

    With G(l) = sum_{i<l} K(i, l-i) N_i (N_{l-i} - [2i=l]) and
    B(l) = sum_i K(i, l) N_l (N_i - [i=l]):

        drift(l) = (G - 2B) / n^2
        qv(l)    = (G + 2B + 2 K(l,l) N_l (N_l - 1)) / n^2

    qv is n times the carre-du-champ of the empirical density at l: the
    sum of rate * (jump size)^2 over every possible merge.  The last term
    is the same-class merge, whose jump moves N_l by 2 and therefore
    contributes four times the single-delta weight.
    """
    inv_n2 = 1.0 / (n * n)
    rate = kernel.rate
    G = [0.0] * (L + 1)
    ksum = [0.0] * (L + 1)
    for a, Na in counts.items():
        for b, Nb in counts.items():
            s = a + b
            if s <= L:
                G[s] += rate(a, b) * Na * Nb
        for l in range(1, L + 1):
            ksum[l] += rate(a, l) * Na
    drift = np.zeros(L)
    qv = np.zeros(L)
    for l in range(1, L + 1):
        Nl = counts.get(l, 0)
        g = G[l]
        if not l & 1:
            h = l >> 1
            g -= rate(h, h) * counts.get(h, 0)
        kll = rate(l, l)
        B = Nl * (ksum[l] - kll)
        drift[l - 1] = (g - 2.0 * B) * inv_n2
        qv[l - 1] = (g + 2.0 * B + 2.0 * kll * Nl * (Nl - 1)) * inv_n2
    return drift, qv


def drift_integrand(h: MassHistogram, kernel: KernelSpec, L: int) -> np.ndarray:
    """Exact generator action on the empirical density, entries 1..L."""
    return _integrands_from_counts(h.counts, h.n, kernel, L)[0]


def qv_integrand(h: MassHistogram, kernel: KernelSpec, L: int) -> np.ndarray:
    """n times the carre-du-champ of the empirical density, entries 1..L.

    Bounded by 4 supK (the constant 4 is sharp, approached by states
    concentrated on a single mass class).
    """
    return _integrands_from_counts(h.counts, h.n, kernel, L)[1]


def total_rate(h: MassHistogram, kernel: KernelSpec) -> float:
    """Total jump rate (1/n) sum_{l,m} K(l,m) (N_l N_m - [l=m] N_l)."""
    rate = kernel.rate
    items = list(h.counts.items())
    lam = 0.0
    for i, (a, Na) in enumerate(items):
        lam += rate(a, a) * Na * (Na - 1)
        for b, Nb in items[i + 1 :]:
            lam += 2.0 * rate(a, b) * Na * Nb
    return lam / h.n


# ------------------------------------------------------------------ the stepper

class Simulation:
    """Mutable single-replica simulation state with an exact step operation.

    Passing an rng reuses that generator (reseeded to `seed`); trajectories
    are a function of (config, seed) only.
    """

    def __init__(self, config: SimConfig, seed: int | None = None, rng: random.Random | None = None):
        if "_validated" not in config.__dict__:
            config.validate()
            config.__dict__["_validated"] = True
        self.config = config
        self.n = config.n
        self.kernel = config.kernel
        self.seed = config.seed if seed is None else seed
        if rng is None:
            self.rng = random.Random(self.seed)
        else:
            rng.seed(self.seed)
            self.rng = rng
        if config.initial_counts:
            counts = dict(config.initial_counts)
            MassHistogram(n=config.n, counts=counts)  # validates mass and positivity
        else:
            counts = {1: config.n}
        self.counts = counts
        self.time = 0.0
        self.event_count = 0
        self._L = config.truncation
        self._sup = config.kernel.sup_norm
        self._lam_unit = self._sup / config.n
        kernel = config.kernel
        self._tab = None if kernel.is_constant else kernel.rate_table_list(min(config.n, 512))
        if config.strategy == "thinning":
            self.masses = [l for l, c in counts.items() for _ in range(c)]
            self._step_impl = self._step_thinning
            self._advance_impl = self._advance_thinning
        else:
            self.masses = None
            self._step_impl = self._step_direct
            self._advance_impl = self._advance_direct
        self._track = config.track_martingale
        if self._track:
            self._init_accumulator()

    # -- accumulator ------------------------------------------------

    def _init_accumulator(self):
        L = self._L
        kernel = self.kernel
        self._rows = {}
        self._initial_density = histogram_to_density(self.histogram(), L)
        self._t_acc = 0.0
        self._drift_int = np.zeros(L)
        self._qv_int = np.zeros(L)
        self._kdiag = np.array([kernel.rate(l, l) for l in range(1, L + 1)])
        # conv[l] = sum_{i+j=l} K(i,j) N_i N_j over ordered pairs (plain product)
        self._conv = [0.0] * (L + 1)
        items = list(self.counts.items())
        for a, Na in items:
            for b, Nb in items:
                if a + b <= L:
                    self._conv[a + b] += kernel.rate(a, b) * Na * Nb
        # ksum[l] = sum_i K(i, l) N_i over every active mass i
        ks = np.zeros(L)
        for a, Na in items:
            ks += Na * self._rate_row(a)
        self._ksum = ks
        self._refresh_integrands()

    def _rate_row(self, m: int) -> np.ndarray:
        """K(m, 1..L) as an array, cached per mass."""
        rows = self._rows
        row = rows.get(m)
        if row is None:
            kern = self.kernel
            row = np.array([kern.rate(m, l) for l in range(1, self._L + 1)])
            rows[m] = row
        return row

    def _refresh_integrands(self):
        if self.config.accumulator_mode == "full":
            self._drift_now, self._qv_now = _integrands_from_counts(
                self.counts, self.n, self.kernel, self._L
            )
            return
        L = self._L
        counts = self.counts
        conv = self._conv
        ksum = self._ksum
        kdiag = self._kdiag
        inv_n2 = 1.0 / (self.n * self.n)
        drift = np.empty(L)
        qv = np.empty(L)
        for l in range(1, L + 1):
            Nl = counts.get(l, 0)
            g = conv[l]
            if not l & 1:
                h = l >> 1
                g -= kdiag[h - 1] * counts.get(h, 0)
            kll = kdiag[l - 1]
            B = Nl * (ksum[l - 1] - kll)
            drift[l - 1] = (g - 2.0 * B) * inv_n2
            qv[l - 1] = (g + 2.0 * B + 2.0 * kll * Nl * (Nl - 1)) * inv_n2
        self._drift_now = drift
        self._qv_now = qv

    def _apply_delta(self, m: int, d: int):
        """Shift N_m by d, updating counts and the incremental sums."""
        counts = self.counts
        Nm = counts.get(m, 0)
        if self._track:
            L = self._L
            conv = self._conv
            kern_row = self._rate_row(m)
            for l in range(m + 1, L + 1):
                other = l - m
                if other == m:
                    conv[l] += kern_row[m - 1] * (2.0 * Nm * d + d * d)
                else:
                    conv[l] += 2.0 * d * kern_row[other - 1] * counts.get(other, 0)
            self._ksum += d * kern_row
        if Nm + d:
            counts[m] = Nm + d
        else:
            del counts[m]

    def _accumulate_to(self, t: float):
        elapsed = t - self._t_acc
        if elapsed > 0.0:
            self._drift_int += elapsed * self._drift_now
            self._qv_int += elapsed * self._qv_now
            self._t_acc = t

    def _commit_event(self, t: float, a: int, b: int):
        if self._track:
            self._accumulate_to(t)
            self._apply_delta(a, -1)
            self._apply_delta(b, -1)
            self._apply_delta(a + b, +1)
            self._refresh_integrands()
        else:
            counts = self.counts
            ca = counts[a]
            if ca == 1:
                del counts[a]
            else:
                counts[a] = ca - 1
            cb = counts[b]
            if cb == 1:
                del counts[b]
            else:
                counts[b] = cb - 1
            counts[a + b] = counts.get(a + b, 0) + 1
        self.time = t
        self.event_count += 1

    # -- stepping ----------------------------------------------------

    def step(self, max_time: float | None = None):
        """Execute the next merge event; return (time, l, m) or None.

        None means either absorption (no pair can merge: fewer than two
        particles, or all pairwise rates vanish) or, when max_time is
        given, that the next event falls beyond it; in both cases the
        clock advances to max_time and the state is unchanged.  Cutting
        the exponential wait at max_time and redrawing afterwards leaves
        the law of the process unchanged (memorylessness).
        """
        return self._step_impl(max_time)

    def _step_thinning(self, max_time):
        ru = self.rng.random
        masses = self.masses
        sup = self._sup
        tab = self._tab
        if tab is not None:
            tsize = len(tab) - 1
            rate = self.kernel.rate
        lam_unit = self._lam_unit
        log = math.log
        t = self.time
        while True:
            P = len(masses)
            if P < 2 or sup == 0.0:
                if max_time is not None and max_time > t:
                    self.time = max_time
                return None
            lam = lam_unit * P * (P - 1)
            t = t - log(1.0 - ru()) / lam
            if max_time is not None and t > max_time:
                self.time = max_time
                return None
            # floor-of-uniform index draws; bias O(P / 2^53) is far below
            # any statistical resolution at these ensemble sizes
            i = int(ru() * P)
            j = int(ru() * (P - 1))
            if j >= i:
                j += 1
            a = masses[i]
            b = masses[j]
            if tab is not None:
                k_ab = tab[a][b] if (a <= tsize and b <= tsize) else rate(a, b)
                if ru() * sup >= k_ab:
                    self.time = t  # rejected candidate: time still advances
                    continue
            self._commit_event(t, a, b)
            masses[i] = a + b
            last = masses.pop()
            if j < len(masses):
                masses[j] = last
            return (t, a, b)

    def _advance_thinning(self, max_time: float):
        """Run thinning events until max_time; equivalent to repeated step().

        One-time local binding of the hot names; the event bookkeeping is
        inlined for the untracked case (a unit test pins equality with the
        step-by-step path).
        """
        rng = self.rng
        ru = rng.random
        masses = self.masses
        sup = self._sup
        tab = self._tab
        if tab is not None:
            tsize = len(tab) - 1
            rate = self.kernel.rate
        lam_unit = self._lam_unit
        log = math.log
        track = self._track
        counts = self.counts
        events = 0
        t = self.time
        while True:
            P = len(masses)
            if P < 2 or sup == 0.0:
                t = max_time
                break
            lam = lam_unit * P * (P - 1)
            t = t - log(1.0 - ru()) / lam
            if t > max_time:
                t = max_time
                break
            i = int(ru() * P)
            j = int(ru() * (P - 1))
            if j >= i:
                j += 1
            a = masses[i]
            b = masses[j]
            if tab is not None:
                k_ab = tab[a][b] if (a <= tsize and b <= tsize) else rate(a, b)
                if ru() * sup >= k_ab:
                    continue
            s = a + b
            if track:
                self._accumulate_to(t)
                self._apply_delta(a, -1)
                self._apply_delta(b, -1)
                self._apply_delta(s, +1)
                self._refresh_integrands()
            else:
                ca = counts[a]
                if ca == 1:
                    del counts[a]
                else:
                    counts[a] = ca - 1
                cb = counts[b]
                if cb == 1:
                    del counts[b]
                else:
                    counts[b] = cb - 1
                counts[s] = counts.get(s, 0) + 1
            events += 1
            masses[i] = s
            last = masses.pop()
            if j < len(masses):
                masses[j] = last
        if t > self.time:
            self.time = t
        self.event_count += events

    def _advance_direct(self, max_time: float):
        while self._step_direct(max_time) is not None:
            pass

    def advance_to(self, max_time: float):
        """Execute every event with time <= max_time, then set the clock there."""
        self._advance_impl(max_time)

    def _step_direct(self, max_time):
        rng = self.rng
        counts = self.counts
        tab = self._tab
        tsize = len(tab) - 1 if tab is not None else 0
        rate = self.kernel.rate
        const_val = self.kernel.c if tab is None else 0.0
        inv_n = 1.0 / self.n
        classes = sorted(counts)
        pairs = []
        lam = 0.0
        for x, a in enumerate(classes):
            Na = counts[a]
            if tab is None:
                k_aa = const_val
            else:
                k_aa = tab[a][a] if a <= tsize else rate(a, a)
            w = k_aa * Na * (Na - 1) * inv_n
            if w > 0.0:
                lam += w
                pairs.append((a, a, lam))
            for b in classes[x + 1 :]:
                if tab is None:
                    k_ab = const_val
                else:
                    k_ab = tab[a][b] if (a <= tsize and b <= tsize) else rate(a, b)
                w = 2.0 * k_ab * Na * counts[b] * inv_n
                if w > 0.0:
                    lam += w
                    pairs.append((a, b, lam))
        if lam == 0.0:
            if max_time is not None and max_time > self.time:
                self.time = max_time
            return None
        t = self.time - math.log(1.0 - rng.random()) / lam
        if max_time is not None and t > max_time:
            self.time = max_time
            return None
        pick = rng.random() * lam
        for a, b, cum in pairs:
            if pick < cum:
                break
        self._commit_event(t, a, b)
        return (t, a, b)

    # -- observation --------------------------------------------------

    def histogram(self) -> MassHistogram:
        counts = self.counts
        mass = 0
        particles = 0
        for l, c in counts.items():
            mass += l * c
            particles += c
        if mass != self.n:
            raise RuntimeError(f"mass conservation violated: {mass} != {self.n}")
        return MassHistogram._trusted(self.n, dict(counts), particles)

    def accumulator(self) -> MartingaleAccumulator:
        if not self._track:
            raise ValueError("martingale tracking is disabled for this run")
        return MartingaleAccumulator(
            truncation=self._L,
            time=self._t_acc,
            drift_integral=self._drift_int.copy(),
            qv_integral=self._qv_int.copy(),
            initial_density=self._initial_density,
        )

    def snapshot(self, t: float) -> Snapshot:
        counts = self.counts
        n = self.n
        L = self._L
        vals = np.zeros(L)
        m = [0, 0, 0, 0, 0]
        leaked_number = 0
        leaked_mass = 0
        for l, c in counts.items():
            if l <= L:
                vals[l - 1] = c
            else:
                leaked_number += c
                leaked_mass += l * c
            cl = c * l
            cl2 = cl * l
            m[0] += c
            m[1] += cl
            m[2] += cl2
            m[3] += cl2 * l
            m[4] += cl2 * l * l
        if m[1] != n:  # total mass is conserved event by event, exactly
            raise RuntimeError(f"mass conservation violated: {m[1]} != {n}")
        density = DensityVector._trusted(
            L, vals / n, leaked_number / n, leaked_mass / n
        )
        if not self._track:
            return Snapshot(t=t, density=density, moments=tuple(m))
        self._accumulate_to(t)
        mart = np.sqrt(n) * (density.values - self._initial_density.values - self._drift_int)
        return Snapshot(
            t=t,
            density=density,
            moments=tuple(m),
            martingale=mart,
            drift_integral=self._drift_int.copy(),
            qv_integral=self._qv_int.copy(),
        )


_PROCESS_RNG = random.Random()  # reused (reseeded) by run(); replicas never share draws


def run(config: SimConfig, seed: int | None = None) -> Trajectory:
    """Simulate one replica and record a snapshot at every grid time.

    The trajectory is a pure function of (config, seed): the process-local
    generator is reseeded for every call.
    """
    sim = Simulation(config, seed=seed, rng=_PROCESS_RNG)
    advance = sim.advance_to
    snapshot = sim.snapshot
    snapshots = []
    for t_snap in config.grid:
        advance(t_snap)
        snapshots.append(snapshot(t_snap))
    return Trajectory(
        n=config.n,
        kernel_desc=config.kernel.describe(),
        seed=sim.seed,
        truncation=config.truncation,
        strategy=config.strategy,
        grid=tuple(config.grid),
        snapshots=snapshots,
        final_histogram=sim.histogram(),
        event_count=sim.event_count,
    )


def _run_chunk(args) -> list:
    config, master_seed, indices = args
    return [run(config, seed=replica_seed(master_seed, r)) for r in indices]


def run_ensemble(config: SimConfig, replicas: int, workers: int = 1) -> Iterator[Trajectory]:
    """Yield replica trajectories 0..replicas-1 in index order.

    config.seed acts as the master seed; replica r runs with the stream
    seed replica_seed(master, r), so outputs are independent of worker
    count and scheduling.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    config.validate()
    if workers <= 1 or replicas == 1:
        master = config.seed
        for r in range(replicas):
            yield run(config, seed=replica_seed(master, r))
        return
    chunk = max(1, replicas // (workers * 8))
    jobs = [
        (config, config.seed, range(start, min(start + chunk, replicas)))
        for start in range(0, replicas, chunk)
    ]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for batch in pool.map(_run_chunk, jobs):
            yield from batch
