"""Ensemble statistics and bound verification.

The reducer streams replica trajectories in index order through one-pass
central-moment accumulators (numerically stable Pebay/Welford updates up
to fourth order), so summaries are bit-identical for identical replica
sets regardless of how the replicas were produced.

Reports compare the reduced statistics against the theory: growth bounds
for density moments, predicted means/variances/shape of the fluctuation
field, and stability of its norm curves across system sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .fluctuation import CovarianceMatrix
from .kernels import KernelSpec
from .simulate import Trajectory
from .state import DensityVector

MOMENT_GROWTH_COEFF = {2: 2.0, 3: 3.0, 4: 14.0 / 3.0}  # (2^p - 2)/(p - 1)


class _Moments:
    """One-pass mean/M2/M3/M4 accumulator over arrays of a fixed shape."""

    def __init__(self, shape, order: int = 2):
        self.count = 0
        self.order = order
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)
        self.m3 = np.zeros(shape) if order >= 3 else None
        self.m4 = np.zeros(shape) if order >= 4 else None

    def update(self, x: np.ndarray):
        self.count += 1
        k = self.count
        delta = x - self.mean
        delta_n = delta / k
        term1 = delta * delta_n * (k - 1)
        if self.order >= 4:
            self.m4 += (
                term1 * delta_n * delta_n * (k * k - 3 * k + 3)
                + 6.0 * delta_n * delta_n * self.m2
                - 4.0 * delta_n * self.m3
            )
        if self.order >= 3:
            self.m3 += term1 * delta_n * (k - 2) - 3.0 * delta_n * self.m2
        self.m2 += term1
        self.mean += delta_n

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self.m2 / (self.count - 1)

    def se_mean(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.variance() / self.count)

    def skewness(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = (self.m3 / self.count) / np.power(self.m2 / self.count, 1.5)
        return np.where(self.m2 > 0, g, 0.0)

    def excess_kurtosis(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = (self.m4 / self.count) / np.square(self.m2 / self.count) - 3.0
        return np.where(self.m2 > 0, g, 0.0)


class _Covariance:
    """One-pass covariance accumulator for a fixed list of index pairs."""

    def __init__(self, npairs: int):
        self.count = 0
        self.mean_a = np.zeros(npairs)
        self.mean_b = np.zeros(npairs)
        self.c = np.zeros(npairs)

    def update(self, xa: np.ndarray, xb: np.ndarray):
        self.count += 1
        k = self.count
        da = xa - self.mean_a
        self.mean_a += da / k
        db = xb - self.mean_b
        self.mean_b += db / k
        self.c += da * (xb - self.mean_b)

    def covariance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.c)
        return self.c / (self.count - 1)


@dataclass
class EnsembleSummary:
    """Reduced statistics of an ensemble of replica trajectories."""

    n: int
    replicas: int
    truncation: int
    grid: tuple
    kernel_desc: dict
    strategy: str
    pi_mean: np.ndarray            # (times, L)
    pi_var: np.ndarray
    moment_mean: np.ndarray        # (times, 5): p = 0..4 of the empirical density
    moment_se: np.ndarray
    leaked_number_mean: np.ndarray
    leaked_mass_mean: np.ndarray
    mass_functional_max_abs: float
    xi_mean: np.ndarray | None = None
    xi_se: np.ndarray | None = None
    xi_var: np.ndarray | None = None
    xi_skew: np.ndarray | None = None
    xi_exkurt: np.ndarray | None = None
    xi_cov_pairs: tuple = ()
    xi_cov: np.ndarray | None = None           # (times, npairs)
    xi_norm1_sq_mean: np.ndarray | None = None  # E ||xi||_1^2 per time
    xi_norm11_mean: np.ndarray | None = None    # E sum l |xi_l| per time
    l1_error_mean: np.ndarray | None = None     # E ||pi - u||_1 per time
    l1_error_se: np.ndarray | None = None
    mart_mean: np.ndarray | None = None
    mart_se: np.ndarray | None = None
    mart_var: np.ndarray | None = None
    qv_mean: np.ndarray | None = None
    qv_se: np.ndarray | None = None


def reduce_ensemble(
    trajectories: Iterable[Trajectory],
    reference: Sequence[DensityVector] | None = None,
    cov_pairs: Sequence[tuple] = ((1, 2), (1, 3), (2, 3)),
) -> EnsembleSummary:
    """Stream replicas (in index order) into one-pass accumulators.

    reference, when given, holds the deterministic density at each grid
    time; fluctuation statistics are accumulated for
    xi = sqrt(n) (pi - reference).  Replicas with inconsistent metadata
    are rejected.
    """
    it = iter(trajectories)
    try:
        first = next(it)
    except StopIteration:
        raise ValueError("empty ensemble") from None
    meta = (first.n, first.kernel_desc, first.truncation, first.grid, first.strategy)
    T = len(first.grid)
    L = first.truncation
    if reference is not None:
        if len(reference) != T:
            raise ValueError("reference trajectory length differs from the grid")
        for u in reference:
            if u.truncation != L:
                raise ValueError("reference truncation differs from ensemble truncation")
        ref = np.stack([u.values for u in reference])
        masses = np.arange(1.0, L + 1)
    track = first.snapshots[0].martingale is not None

    pi_acc = _Moments((T, L), order=2)
    mom_acc = _Moments((T, 5), order=2)
    leak_acc = _Moments((T, 2), order=1)
    if reference is not None:
        xi_acc = _Moments((T, L), order=4)
        pairs = tuple((int(a), int(b)) for a, b in cov_pairs if a <= L and b <= L)
        cov_acc = _Covariance(T * len(pairs)) if pairs else None
        norm_acc = _Moments((T, 2), order=1)
        err_acc = _Moments((T,), order=2)
    root_n = math.sqrt(first.n)
    if track:
        mart_acc = _Moments((T, L), order=2)
        qv_acc = _Moments((T, L), order=2)

    def consume(traj: Trajectory):
        if (traj.n, traj.kernel_desc, traj.truncation, traj.grid, traj.strategy) != meta:
            raise ValueError("inconsistent replica metadata in ensemble")
        pi = np.stack([s.density.values for s in traj.snapshots])
        moments = np.array([s.moments for s in traj.snapshots], dtype=float) / traj.n
        for s in traj.snapshots:
            if s.moments[1] != traj.n:
                raise ValueError("replica violates exact mass conservation")
        pi_acc.update(pi)
        mom_acc.update(moments)
        leak_acc.update(
            np.array([[s.density.leaked_number, s.density.leaked_mass] for s in traj.snapshots])
        )
        if reference is not None:
            xi = root_n * (pi - ref)
            xi_acc.update(xi)
            if cov_acc is not None:
                xa = np.concatenate([xi[:, a - 1] for a, _ in pairs])
                xb = np.concatenate([xi[:, b - 1] for _, b in pairs])
                cov_acc.update(xa, xb)
            abs_xi = np.abs(xi)
            norm_l1 = abs_xi.sum(axis=1)
            norm_acc.update(np.stack([norm_l1 ** 2, abs_xi @ masses], axis=1))
            err_acc.update(np.abs(pi - ref).sum(axis=1))
        if track:
            mart_acc.update(np.stack([s.martingale for s in traj.snapshots]))
            qv_acc.update(np.stack([s.qv_integral for s in traj.snapshots]))

    consume(first)
    count = 1
    for traj in it:
        consume(traj)
        count += 1

    summary = EnsembleSummary(
        n=first.n,
        replicas=count,
        truncation=L,
        grid=first.grid,
        kernel_desc=first.kernel_desc,
        strategy=first.strategy,
        pi_mean=pi_acc.mean,
        pi_var=pi_acc.variance(),
        moment_mean=mom_acc.mean,
        moment_se=mom_acc.se_mean(),
        leaked_number_mean=leak_acc.mean[:, 0],
        leaked_mass_mean=leak_acc.mean[:, 1],
        mass_functional_max_abs=0.0,  # sum_l l*N_l == n is asserted per replica above
    )
    if reference is not None:
        summary.xi_mean = xi_acc.mean
        summary.xi_se = xi_acc.se_mean()
        summary.xi_var = xi_acc.variance()
        summary.xi_skew = xi_acc.skewness()
        summary.xi_exkurt = xi_acc.excess_kurtosis()
        summary.xi_cov_pairs = pairs
        if cov_acc is not None and pairs:
            summary.xi_cov = cov_acc.covariance().reshape(len(pairs), T).T
        summary.xi_norm1_sq_mean = norm_acc.mean[:, 0]
        summary.xi_norm11_mean = norm_acc.mean[:, 1]
        summary.l1_error_mean = err_acc.mean
        summary.l1_error_se = err_acc.se_mean()
    if track:
        summary.mart_mean = mart_acc.mean
        summary.mart_se = mart_acc.se_mean()
        summary.mart_var = mart_acc.variance()
        summary.qv_mean = qv_acc.mean
        summary.qv_se = qv_acc.se_mean()
    return summary


def check_moment_bounds(summary: EnsembleSummary, kernel: KernelSpec, z: float = 3.0) -> dict:
    """Empirical moment curves against (1 + C(p) supK t)^{p-1}, C(p) = (2^p-2)/(p-1).

    The bound holds for the true expectation, so the empirical mean gets
    z standard errors of statistical slack.
    """
    sup = kernel.sup_norm
    times = np.asarray(summary.grid)
    checks = []
    passed = True
    for p, coeff in MOMENT_GROWTH_COEFF.items():
        bound = np.power(1.0 + coeff * sup * times, p - 1)
        observed = summary.moment_mean[:, p]
        se = summary.moment_se[:, p]
        ok = observed <= bound + z * se
        passed &= bool(ok.all())
        checks.append(
            {
                "p": p,
                "coeff": coeff,
                "times": times.tolist(),
                "observed": observed.tolist(),
                "bound": bound.tolist(),
                "se": se.tolist(),
                "ok": ok.tolist(),
            }
        )
    return {"kind": "moment-growth", "passed": passed, "checks": checks}


def clt_report(
    summary: EnsembleSummary,
    predicted: Sequence[CovarianceMatrix],
    masses: Sequence[int] = (1, 2, 3),
    rel_tol: float = 0.15,
    mean_z: float = 3.0,
    var_z: float = 3.0,
    shape_z: float = 5.0,
) -> dict:
    """Finite-dimensional Gaussian-limit checks of the fluctuation field.

    Per selected mass and grid time: mean within mean_z standard errors of
    zero; variance within max(rel_tol * prediction, var_z chi-square-style
    standard errors) of the predicted diagonal; skewness and excess
    kurtosis within shape_z of their null sampling scales sqrt(6/R) and
    sqrt(24/R); selected covariances compared like the variances.
    """
    if summary.xi_var is None:
        raise ValueError("summary has no fluctuation statistics (no reference density)")
    if len(predicted) != len(summary.grid):
        raise ValueError("one predicted covariance per grid time is required")
    R = summary.replicas
    var_se_rel = math.sqrt(2.0 / max(R - 1, 1))
    skew_band = shape_z * math.sqrt(6.0 / R)
    kurt_band = shape_z * math.sqrt(24.0 / R)
    rows = []
    passed = True
    for j, t in enumerate(summary.grid):
        sigma = predicted[j].matrix
        for l in masses:
            pred = float(sigma[l - 1, l - 1])
            mean = float(summary.xi_mean[j, l - 1])
            se = float(summary.xi_se[j, l - 1])
            var = float(summary.xi_var[j, l - 1])
            skew = float(summary.xi_skew[j, l - 1])
            kurt = float(summary.xi_exkurt[j, l - 1])
            mean_ok = abs(mean) <= mean_z * se or (mean == 0.0 and se == 0.0)
            var_tol = max(rel_tol * pred, var_z * var_se_rel * pred)
            var_ok = abs(var - pred) <= var_tol if pred > 0 else var <= 1e-12
            skew_ok = abs(skew) <= skew_band
            kurt_ok = abs(kurt) <= kurt_band
            ok = mean_ok and var_ok and skew_ok and kurt_ok
            passed &= ok
            rows.append(
                {
                    "t": t,
                    "mass": l,
                    "mean": mean,
                    "mean_se": se,
                    "var": var,
                    "var_predicted": pred,
                    "skew": skew,
                    "skew_band": skew_band,
                    "exkurt": kurt,
                    "kurt_band": kurt_band,
                    "mean_ok": mean_ok,
                    "var_ok": var_ok,
                    "skew_ok": skew_ok,
                    "kurt_ok": kurt_ok,
                }
            )
        if summary.xi_cov is not None:
            for k, (a, b) in enumerate(summary.xi_cov_pairs):
                pred = float(sigma[a - 1, b - 1])
                scale = math.sqrt(float(sigma[a - 1, a - 1] * sigma[b - 1, b - 1]))
                obs = float(summary.xi_cov[j, k])
                se = math.sqrt((scale ** 2 + pred ** 2) / max(R - 1, 1))
                ok = abs(obs - pred) <= max(rel_tol * scale, var_z * se)
                passed &= ok
                rows.append(
                    {"t": t, "pair": [a, b], "cov": obs, "cov_predicted": pred, "cov_ok": ok}
                )
    return {
        "kind": "fluctuation-gaussian-limit",
        "passed": passed,
        "replicas": R,
        "rel_tol": rel_tol,
        "rows": rows,
        "mass_functional_max_abs": summary.mass_functional_max_abs,
    }


def fluctuation_norm_report(summaries: Sequence[EnsembleSummary], factor: float = 2.0) -> dict:
    """Stability of E||xi||_1^2 and E sum l|xi_l| across system sizes.

    The limit theory makes both curves bounded uniformly in n; this check
    asks that each curve varies by at most `factor` across the provided
    summaries, time point by time point (skipping t = 0 where all curves
    vanish identically).
    """
    if not summaries:
        raise ValueError("no summaries supplied")
    grid = summaries[0].grid
    for s in summaries:
        if s.grid != grid:
            raise ValueError("summaries must share a snapshot grid")
        if s.xi_norm1_sq_mean is None:
            raise ValueError("summaries lack fluctuation norms (no reference density)")
    rows = []
    passed = True
    for j, t in enumerate(grid):
        sq = [float(s.xi_norm1_sq_mean[j]) for s in summaries]
        wt = [float(s.xi_norm11_mean[j]) for s in summaries]
        row = {"t": t, "norm1_sq": sq, "norm11": wt}
        if t > 0:
            sq_ok = max(sq) <= factor * min(sq) if min(sq) > 0 else max(sq) == 0.0
            wt_ok = max(wt) <= factor * min(wt) if min(wt) > 0 else max(wt) == 0.0
            row["ok"] = sq_ok and wt_ok
            passed &= row["ok"]
        rows.append(row)
    return {
        "kind": "fluctuation-norm-stability",
        "passed": passed,
        "sizes": [s.n for s in summaries],
        "rows": rows,
    }


def lln_scaling_report(errors_by_n: dict, ratio_band: float = 3.0) -> dict:
    """Decay of E||pi - u||_1 with n: strict decrease, sqrt(n)-rate stability."""
    ns = sorted(errors_by_n)
    errs = [float(errors_by_n[n]) for n in ns]
    scaled = [e * math.sqrt(n) for n, e in zip(ns, errs)]
    decreasing = all(a > b for a, b in zip(errs, errs[1:]))
    band_ok = max(scaled) <= ratio_band * min(scaled) if min(scaled) > 0 else False
    return {
        "kind": "lln-scaling",
        "passed": decreasing and band_ok,
        "n": ns,
        "error": errs,
        "sqrt_n_error": scaled,
        "decreasing": decreasing,
        "sqrt_n_band_ok": band_ok,
    }
