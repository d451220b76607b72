"""Gaussian fluctuation predictions around the deterministic density.

The rescaled deviation field converges to a linear diffusion

    d xi_t = A(u_t, xi_t) dt + Q(u_t)^{1/2} dB_t,     xi_0 = 0,

where A is the symmetrized linearization of the coagulation operator and
Q is the local noise covariance accumulated by individual merge events.
Two independent routes compute second moments of the limit field:

* covariance_evolution: the matrix ODE  dS/dt = A S + S A' + Q(u_t)
  (one solve predicts every pairwise covariance on the window), and
* dual_backward_solve: the backward equation  d f_s/ds = -A*(u_s, f_s)
  with final condition g, whose noise integral int_0^t Q(u_s; f_s) ds is
  the variance of <xi_t, g>.

Agreement of the two routes is a strong end-to-end check on signs and
factors in A versus its adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import KernelSpec
from .smoluchowski import DeterministicTrajectory, _gain


@dataclass(frozen=True)
class CovarianceMatrix:
    """Symmetric PSD covariance of the fluctuation field on masses 1..L."""

    truncation: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (self.truncation, self.truncation):
            raise ValueError("covariance matrix shape mismatch")
        object.__setattr__(self, "matrix", m)

    def validate(self, tol: float = 1e-9) -> None:
        m = self.matrix
        if not np.allclose(m, m.T, atol=1e-12 * (1.0 + np.abs(m).max())):
            raise ValueError("covariance matrix is not symmetric")
        trace = float(np.trace(m))
        smallest = float(np.linalg.eigvalsh(m)[0]) if self.truncation else 0.0
        if smallest < -tol * max(trace, 1e-300):
            raise ValueError(f"covariance not PSD: min eigenvalue {smallest:.3e}")

    def variance_of(self, g: np.ndarray) -> float:
        g = _pad(g, self.truncation)
        return float(g @ self.matrix @ g)


@dataclass(frozen=True)
class DualSolution:
    """Backward dual trajectory and the variance it predicts for <xi_t, g>."""

    truncation: int
    times: np.ndarray            # ascending nodes of [0, t]
    test_functions: np.ndarray   # test_functions[k] = f at times[k]
    variance: float

    @property
    def initial_function(self) -> np.ndarray:
        return self.test_functions[0]


def _pad(g: np.ndarray, L: int) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.size > L:
        raise ValueError(f"test function support {g.size} exceeds window {L}")
    if g.size == L:
        return g
    return np.concatenate([g, np.zeros(L - g.size)])


def linearized_operator(kernel: KernelSpec, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """A(u, v): symmetric bilinear derivative of the coagulation operator.

        A(u,v)(l) = sum_{i<l} K(i, l-i) (u_i v_{l-i} + u_{l-i} v_i)
                    - 2 sum_{i<=L} K(l, i) (u_l v_i + v_l u_i)

    The loss sum runs over the partner index; both arguments share the
    truncation window.  ||A(u,v)||_1 <= 6 supK ||u||_1 ||v||_1 and
    A(u, u) = 2 * (coagulation operator at u).
    """
    if u.size != v.size:
        raise ValueError("operands must share a truncation window")
    L = u.size
    tab = kernel.rate_table(L)[1:, 1:]
    gain = _gain(kernel, u, v) + _gain(kernel, v, u)
    loss = 2.0 * (u * (tab @ v) + v * (tab @ u))
    return gain - loss


def linearized_matrix(kernel: KernelSpec, u: np.ndarray) -> np.ndarray:
    """Matrix of v -> A(u, v) on the window (columns act on v)."""
    L = u.size
    tab = kernel.rate_table(L)
    A = np.zeros((L, L))
    for d in range(1, L):
        a = np.arange(d + 1, L + 1)          # row masses; column mass b = a - d
        A[a - 1, a - d - 1] += 2.0 * tab[d, a - d] * u[d - 1]
    A -= 2.0 * u[:, None] * tab[1:, 1:]
    A[np.diag_indices(L)] -= 2.0 * (tab[1:, 1:] @ u)
    return A


def adjoint_operator(kernel: KernelSpec, u: np.ndarray, f: np.ndarray) -> np.ndarray:
    """A*(u, f)(l) = 2 sum_i K(l, i) (f_{l+i} - f_l - f_i) u_i.

    u lives on {1..L}, f on {1..L_f} with f == 0 beyond L_f; the output has
    the length of f.  Dual to the linearized operator:
    <A(u,v), f> = <v, A*(u,f)> whenever no mass leaks past the windows.
    Satisfies ||out||_inf <= 6 supK ||u||_1 ||f||_inf.
    """
    L = u.size
    Lf = f.size
    tab = kernel.rate_table(max(L, Lf))
    rows = tab[1 : Lf + 1, 1 : L + 1]                       # K(l, i)
    fpad = np.concatenate([f, np.zeros(L)])
    shift = np.lib.stride_tricks.sliding_window_view(fpad[1:], L)[:Lf]  # shift[l-1, i-1] = f_{l+i}
    term_gain = (rows * shift) @ u
    term_self = f * (rows @ u)
    term_partner = rows @ (u * f[:L] if Lf >= L else u * _pad(f, L))
    return 2.0 * (term_gain - term_self - term_partner)


def noise_form(kernel: KernelSpec, u: np.ndarray, f: np.ndarray) -> float:
    """Q(u; f) = sum_{i,j} K(i,j) u_i u_j (f_{i+j} - f_i - f_j)^2.

    Sums run over the window of u; f_{i+j} is 0 beyond the window of f.
    Nonnegative, bounded by 9 supK ||u||_1^2 ||f||_inf^2, and identically
    zero for additive f (f_l = c*l): mass carries no fluctuation noise.
    """
    L = u.size
    tab = kernel.rate_table(L)[1:, 1:]
    fL = _pad(f, max(f.size, 2 * L))
    idx = np.arange(1, L + 1)
    bracket = fL[np.add.outer(idx, idx) - 1] - fL[idx - 1][:, None] - fL[idx - 1][None, :]
    W = tab * np.outer(u, u)
    return float(np.sum(W * bracket * bracket))


def noise_matrix(kernel: KernelSpec, u: np.ndarray) -> np.ndarray:
    """Coordinate form Q_ab(u) with f' Q f == noise_form(u, f) for f on the window.

    Derived by expanding the squared bracket: with W_ij = K(i,j) u_i u_j,

        Q_ab = 2 W_ab + delta_ab (g_a + 2 r_a) - 2 W_{b, a-b} - 2 W_{a, b-a}

    where g is the gain convolution of W, r its row sums, and the shifted
    terms apply when the index difference is a valid mass.
    """
    L = u.size
    tab = kernel.rate_table(L)
    W = tab[1:, 1:] * np.outer(u, u)
    g = _gain(kernel, u, u)
    r = W.sum(axis=1)
    Q = 2.0 * W.copy()
    Q[np.diag_indices(L)] += g + 2.0 * r
    for d in range(1, L):
        a = np.arange(d + 1, L + 1)
        vals = 2.0 * W[a - d - 1, d - 1]     # W[b, a-b] with b = a-d
        Q[a - 1, a - d - 1] -= vals
        Q[a - d - 1, a - 1] -= vals
    return Q


def _interpolator(u_traj: DeterministicTrajectory):
    times = u_traj.times
    mat = u_traj.values_matrix()

    def u_at(t: float) -> np.ndarray:
        i = int(np.searchsorted(times, t))
        if i < len(times) and abs(times[i] - t) < 1e-13:
            return mat[i]
        if i == 0 or i >= len(times):
            raise ValueError(f"time {t} outside trajectory range")
        w = (t - times[i - 1]) / (times[i] - times[i - 1])
        return (1.0 - w) * mat[i - 1] + w * mat[i]

    return u_at


def covariance_evolution(
    kernel: KernelSpec, u_traj: DeterministicTrajectory, times: list[float]
) -> list[CovarianceMatrix]:
    """Integrate dS/dt = A_t S + S A_t' + Q(u_t) from S(0) = 0.

    Marches with RK4 over the trajectory's own node grid (u at RK4 stage
    midpoints is linearly interpolated) and returns S at each requested
    time, which must be a trajectory node.
    """
    node_times = u_traj.times
    for t in times:
        if not np.any(np.abs(node_times - t) < 1e-12):
            raise ValueError(f"requested time {t} is not on the trajectory grid")
    L = u_traj.truncation
    u_at = _interpolator(u_traj)

    def rhs(t: float, S: np.ndarray) -> np.ndarray:
        u = u_at(t)
        A = linearized_matrix(kernel, u)
        return A @ S + S @ A.T + noise_matrix(kernel, u)

    out: list[CovarianceMatrix] = []
    want = sorted(times)
    S = np.zeros((L, L))
    t_prev = 0.0
    while want and abs(want[0]) < 1e-12:
        out.append(CovarianceMatrix(L, S.copy()))
        want = want[1:]
    for t0, t1 in zip(node_times[:-1], node_times[1:]):
        if not want:
            break
        h = t1 - t0
        k1 = rhs(t0, S)
        k2 = rhs(t0 + 0.5 * h, S + 0.5 * h * k1)
        k3 = rhs(t0 + 0.5 * h, S + 0.5 * h * k2)
        k4 = rhs(t1, S + h * k3)
        S = S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t_prev = t1
        while want and abs(want[0] - t1) < 1e-12:
            S = 0.5 * (S + S.T)              # keep exact symmetry against roundoff
            out.append(CovarianceMatrix(L, S.copy()))
            want = want[1:]
    if want:
        raise ValueError(f"trajectory ended at {t_prev} before requested time {want[0]}")
    # out is aligned with sorted(times); restore the caller's ordering
    ranks = np.argsort(np.argsort(times), kind="stable")
    return [out[r] for r in ranks]


def dual_backward_solve(
    kernel: KernelSpec,
    g: np.ndarray,
    t: float,
    u_traj: DeterministicTrajectory,
    dual_truncation: int | None = None,
) -> DualSolution:
    """Solve d f_s/ds = -A*(u_s, f_s) backward from f_t = g on [0, t].

    Returns the dual trajectory together with the predicted variance
    int_0^t Q(u_s; f_s) ds of <xi_t, g>; the predicted mean is <xi_0, f_0>,
    which vanishes for the zero initial fluctuation.

    The dual window defaults to twice the solver window: the backward flow
    propagates support upward through pair interactions, and doubling
    keeps that leakage negligible for compactly supported g.
    """
    node_times = u_traj.times
    if t > node_times[-1] + 1e-12:
        raise ValueError(f"requested time {t} beyond trajectory horizon {node_times[-1]}")
    hit = np.where(np.abs(node_times - t) < 1e-12)[0]
    if hit.size == 0:
        raise ValueError(f"requested time {t} is not on the trajectory grid")
    end = int(hit[0])
    L = u_traj.truncation
    Lf = dual_truncation or 2 * L
    f = _pad(g, Lf)
    u_at = _interpolator(u_traj)

    def rhs(s: float, y: np.ndarray):
        u = u_at(s)
        fs = y[:Lf]
        df = -adjoint_operator(kernel, u, fs)
        dq = -noise_form(kernel, u, fs)
        return np.concatenate([df, [dq]])

    y = np.concatenate([f, [0.0]])
    fs_out = np.empty((end + 1, Lf))
    fs_out[end] = f
    for k in range(end, 0, -1):
        s1, s0 = node_times[k], node_times[k - 1]
        h = s0 - s1                          # negative step
        k1 = rhs(s1, y)
        k2 = rhs(s1 + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(s1 + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(s0, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        fs_out[k - 1] = y[:Lf]
    return DualSolution(
        truncation=Lf,
        times=node_times[: end + 1].copy(),
        test_functions=fs_out,
        variance=float(y[Lf]),
    )
