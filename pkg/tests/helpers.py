"""Shared test utilities: independent oracles and random-input generators.

The oracles here deliberately re-derive quantities from first principles
(jump enumeration, closed-form densities, small hand-built ODE systems)
so that tests compare two genuinely different computations.
"""

from __future__ import annotations

import numpy as np

from coaglab.acceptance import random_histogram, random_signed, random_subprob  # noqa: F401


def brute_force_drift_qv(counts: dict, n: int, kernel, L: int):
    """Enumerate every possible merge of the count state.

    Each unordered class pair (a, b) fires at rate 2 K N_a N_b / n
    (a < b) or K N_a (N_a - 1) / n (a == b) and shifts the empirical
    density by -1/n at a and b and +1/n at a+b.  The drift is the
    rate-weighted sum of shifts; the QV density is n times the
    rate-weighted sum of squared shifts.
    """
    drift = np.zeros(L + 1)
    qv = np.zeros(L + 1)
    items = sorted(counts.items())
    for x, (a, Na) in enumerate(items):
        for b, Nb in items[x:]:
            if a == b:
                rate = kernel.rate(a, a) * Na * (Na - 1) / n
            else:
                rate = 2.0 * kernel.rate(a, b) * Na * Nb / n
            if rate == 0.0:
                continue
            shift = np.zeros(L + 1)
            if a <= L:
                shift[a] -= 1.0 / n
            if b <= L:
                shift[b] -= 1.0 / n
            if a + b <= L:
                shift[a + b] += 1.0 / n
            drift += rate * shift
            qv += n * rate * shift * shift
    return drift[1:], qv[1:]


def constant_kernel_density(L: int, t: float) -> np.ndarray:
    """Monodisperse constant-kernel density, written out independently."""
    out = np.empty(L)
    for l in range(1, L + 1):
        out[l - 1] = (t ** (l - 1)) / (1.0 + t) ** (l + 1) if l > 1 else 1.0 / (1.0 + t) ** 2
    return out


def ou_reference_covariance(t: float, steps: int = 1500) -> np.ndarray:
    """Hand-built 4-dimensional covariance oracle for the constant kernel.

    The components (xi_1, xi_2, xi_3, S) with S the total-number
    functional close under the limiting linear dynamics:

        dxi_1 = (-2 u1 S - 2 M0 xi_1) dt + noise
        dxi_2 = (2 u1 xi_1 - 2 u2 S - 2 M0 xi_2) dt + noise
        dxi_3 = (2 u1 xi_2 + 2 u2 xi_1 - 2 u3 S - 2 M0 xi_3) dt + noise
        dS    = -2 M0 S dt + noise

    with M0 = 1/(1+t) and the noise covariance rate assembled from the
    per-merge increments (f(i+j) - f(i) - f(j)) summed over the density.
    Returns the 4x4 covariance at time t, integrated by RK4 from zero.
    """
    big = 160  # effectively infinite support for the geometric-tail density

    def u_vec(s: float) -> np.ndarray:
        return constant_kernel_density(big, s)

    idx = np.arange(1, big + 1)

    def brackets() -> np.ndarray:
        # rows: functionals delta_1, delta_2, delta_3, total-number
        c = np.zeros((4, big, big))
        for k, l in enumerate((1, 2, 3)):
            c[k] -= (idx[:, None] == l)
            c[k] -= (idx[None, :] == l)
            c[k] += (idx[:, None] + idx[None, :] == l)
        c[3] = -1.0
        return c

    C = brackets()

    def drift_matrix(s: float) -> np.ndarray:
        u = u_vec(s)
        m0 = 1.0 / (1.0 + s)
        u1, u2, u3 = u[0], u[1], u[2]
        return np.array(
            [
                [-2 * m0, 0.0, 0.0, -2 * u1],
                [2 * u1, -2 * m0, 0.0, -2 * u2],
                [2 * u2, 2 * u1, -2 * m0, -2 * u3],
                [0.0, 0.0, 0.0, -2 * m0],
            ]
        )

    def noise_matrix(s: float) -> np.ndarray:
        u = u_vec(s)
        W = np.outer(u, u)
        N = np.empty((4, 4))
        for a in range(4):
            for b in range(a, 4):
                N[a, b] = N[b, a] = float(np.sum(W * C[a] * C[b]))
        return N

    h = t / steps
    sigma = np.zeros((4, 4))

    def rhs(s, S):
        D = drift_matrix(s)
        return D @ S + S @ D.T + noise_matrix(s)

    s = 0.0
    for _ in range(steps):
        k1 = rhs(s, sigma)
        k2 = rhs(s + h / 2, sigma + h / 2 * k1)
        k3 = rhs(s + h / 2, sigma + h / 2 * k2)
        k4 = rhs(s + h, sigma + h * k3)
        sigma = sigma + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        s += h
    return sigma
