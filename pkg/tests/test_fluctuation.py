import numpy as np
import pytest

from coaglab.fluctuation import (
    CovarianceMatrix,
    adjoint_operator,
    covariance_evolution,
    dual_backward_solve,
    linearized_matrix,
    linearized_operator,
    noise_form,
    noise_matrix,
)
from coaglab.kernels import capped_brownian_kernel, constant_kernel
from coaglab.smoluchowski import SolverConfig, coagulation_operator, solve
from coaglab.state import delta_density, norm_l1, norm_sup
from helpers import ou_reference_covariance, random_signed, random_subprob

K1 = constant_kernel(1.0)
KB = capped_brownian_kernel(1.0, 10.0)


def test_linearized_on_point_masses():
    u = np.zeros(4); u[0] = 1.0          # concentrated at mass 1
    v = np.zeros(4); v[1] = 1.0          # concentrated at mass 2
    out = linearized_operator(K1, u, v)
    # gain at mass 3 counts both ordered decompositions (1,2) and (2,1)
    assert np.allclose(out, [-2.0, -2.0, 2.0, 0.0])
    assert not linearized_operator(K1, u, np.zeros(4)).any()


def test_linearized_identity_bilinearity_symmetry():
    rng = np.random.default_rng(21)
    for kernel in (K1, KB):
        for _ in range(100):
            u = random_subprob(rng, 24)
            v = random_signed(rng, 24)
            w = random_signed(rng, 24)
            # diagonal identity: A(u, u) = 2 * coagulation operator
            assert np.allclose(
                linearized_operator(kernel, u, u),
                2.0 * coagulation_operator(kernel, u),
                atol=1e-12,
            )
            # argument symmetry and bilinearity
            assert np.allclose(
                linearized_operator(kernel, u, v), linearized_operator(kernel, v, u), atol=1e-12
            )
            a, b = 0.7, -1.3
            assert np.allclose(
                linearized_operator(kernel, u, a * v + b * w),
                a * linearized_operator(kernel, u, v) + b * linearized_operator(kernel, u, w),
                atol=1e-10,
            )
            assert norm_l1(linearized_operator(kernel, u, v)) <= 6 * kernel.sup_norm * norm_l1(u) * norm_l1(v) + 1e-12


def test_linearized_matrix_matches_operator():
    rng = np.random.default_rng(4)
    for kernel in (K1, KB):
        u = random_subprob(rng, 20)
        A = linearized_matrix(kernel, u)
        for _ in range(20):
            v = random_signed(rng, 20)
            assert np.allclose(A @ v, linearized_operator(kernel, u, v), atol=1e-12)


def test_adjoint_hand_example():
    u = np.zeros(3); u[0] = 1.0
    f = np.zeros(3); f[1] = 1.0          # indicator of mass 2
    out = adjoint_operator(K1, u, f)
    assert np.allclose(out, [2.0, -2.0, 0.0])
    assert not adjoint_operator(constant_kernel(0.0), u, f).any()


def test_adjoint_bound_and_duality():
    rng = np.random.default_rng(8)
    L = 24
    for kernel in (K1, KB):
        for _ in range(100):
            u = np.concatenate([random_subprob(rng, L // 2), np.zeros(L - L // 2)])
            v = np.concatenate([random_signed(rng, L // 2), np.zeros(L - L // 2)])
            f = random_signed(rng, L, scale=2.0)
            af = adjoint_operator(kernel, u, f)
            assert norm_sup(af) <= 6 * kernel.sup_norm * norm_l1(u) * norm_sup(f) + 1e-12
            lhs = float(linearized_operator(kernel, u, v) @ f)
            rhs = float(v @ af)
            assert lhs == pytest.approx(rhs, abs=1e-12 * (1 + abs(lhs)))


def test_noise_form_examples_and_bound():
    u = np.zeros(4); u[0] = 1.0
    f = np.zeros(4); f[1] = 1.0
    assert noise_form(K1, u, f) == pytest.approx(1.0, abs=1e-15)
    assert noise_form(K1, u, np.zeros(4)) == 0.0
    rng = np.random.default_rng(17)
    for kernel in (K1, KB):
        for _ in range(100):
            uu = random_subprob(rng, 24)
            ff = random_signed(rng, 24, scale=3.0)
            q = noise_form(kernel, uu, ff)
            assert 0.0 <= q <= 9 * kernel.sup_norm * norm_l1(uu) ** 2 * norm_sup(ff) ** 2 + 1e-12


def test_noise_form_additive_blind_spot():
    rng = np.random.default_rng(2)
    masses = np.arange(1.0, 49.0)
    for _ in range(50):
        u = random_subprob(rng, 24)
        f = masses.copy()  # integer-linear: exactly zero in floating point
        assert noise_form(K1, u, f) == 0.0
        c = float(rng.uniform(-2, 2))
        assert abs(noise_form(K1, u, c * masses)) <= 1e-20


def test_noise_matrix_point_mass_and_agreement():
    u = np.zeros(3); u[0] = 1.0
    Q = noise_matrix(K1, u)
    assert Q[0, 0] == 4.0 and Q[0, 1] == Q[1, 0] == -2.0 and Q[1, 1] == 1.0
    assert not noise_matrix(K1, np.zeros(3)).any()
    rng = np.random.default_rng(9)
    for kernel in (K1, KB):
        for _ in range(100):
            uu = random_subprob(rng, 16)
            ff = random_signed(rng, 16)
            QQ = noise_matrix(kernel, uu)
            assert float(ff @ QQ @ ff) == pytest.approx(noise_form(kernel, uu, ff), abs=1e-12)
            assert np.allclose(QQ, QQ.T)


from functools import lru_cache

_KERNELS = {"constant": K1, "capped": KB}


@lru_cache(maxsize=None)
def _u_trajectory(kernel_name, t, L=64, dt=1e-3):
    kernel = _KERNELS[kernel_name]
    cfg = SolverConfig(truncation=L, horizon=t, grid=(t,), dt=dt)
    return solve(delta_density(L), kernel, cfg)


def test_covariance_trivial_cases():
    traj = _u_trajectory("constant", 0.5, L=16)
    out = covariance_evolution(K1, traj, [0.0])
    assert not out[0].matrix.any()
    k0 = constant_kernel(0.0)
    traj0 = solve(delta_density(8), k0, SolverConfig(truncation=8, horizon=1.0, grid=(1.0,), dt=0.05))
    sig = covariance_evolution(k0, traj0, [1.0])[0]
    assert not sig.matrix.any()
    with pytest.raises(ValueError):
        covariance_evolution(K1, traj, [0.123456])  # not a node


def test_covariance_against_hand_built_reference():
    """Independent 4-dimensional closed system (xi_1, xi_2, xi_3, total number)."""
    t = 1.0
    traj = _u_trajectory("constant", t, dt=5e-4)
    sig = covariance_evolution(K1, traj, [t])[0]
    sig.validate()
    ref = ou_reference_covariance(t)
    # diagonal entries for masses 1..3
    for i in range(3):
        assert sig.matrix[i, i] == pytest.approx(ref[i, i], rel=2e-5)
    # pair covariances
    assert sig.matrix[0, 1] == pytest.approx(ref[0, 1], rel=2e-5)
    assert sig.matrix[1, 2] == pytest.approx(ref[1, 2], rel=2e-5)
    # total-number functional variance: indicator of the whole window
    ones = np.ones(sig.truncation)
    assert sig.variance_of(ones) == pytest.approx(ref[3, 3], rel=2e-5)
    # frozen rationals from the scalar system: Var xi_1(1) and Var S(1)
    assert sig.matrix[0, 0] == pytest.approx(5.0 / 24.0, rel=2e-6)
    assert sig.variance_of(ones) == pytest.approx(7.0 / 48.0, rel=2e-6)


def test_covariance_mass_row_conserved_and_psd():
    t = 1.0
    traj = _u_trajectory("constant", t)
    sig = covariance_evolution(K1, traj, [t])[0]
    masses = np.arange(1.0, sig.truncation + 1)
    # the mass functional is deterministic, so its variance must stay 0
    assert abs(float(masses @ sig.matrix @ masses)) <= 1e-8 * np.trace(sig.matrix)
    sig.validate()


def test_dual_solve_trivial_and_linear():
    t = 0.5
    k0 = constant_kernel(0.0)
    traj0 = solve(delta_density(8), k0, SolverConfig(truncation=8, horizon=t, grid=(t,), dt=0.05))
    dual = dual_backward_solve(k0, np.array([1.0, 0.0]), t, traj0)
    assert dual.variance == 0.0
    assert np.allclose(dual.test_functions[0], dual.test_functions[-1])

    # additive functionals carry no noise: the adjoint bracket vanishes on
    # the infinite lattice, so the predicted variance is zero; away from
    # the dual window's upper boundary layer the function stays linear
    traj = _u_trajectory("constant", t, L=32)
    g = np.arange(1.0, 65.0)
    dual = dual_backward_solve(K1, g, t, traj)
    assert abs(dual.variance) <= 1e-12
    assert np.allclose(dual.test_functions[0][:16], g[:16], atol=1e-9)
    # operator-level identity on indices safe from the window edge (the
    # three sums are evaluated separately, so cancellation is to rounding)
    u = traj.density_at(t).values
    af = adjoint_operator(K1, u, g)
    assert np.abs(af[:32]).max() <= 1e-12


def test_dual_solve_matches_lyapunov_and_growth_bound():
    t = 1.0
    for name, kernel in (("constant", K1), ("capped", KB)):
        traj = _u_trajectory(name, t)
        sig = covariance_evolution(kernel, traj, [t])[0]
        for support in ([1], [3], [1, 2, 3, 4, 5]):
            g = np.zeros(max(support))
            for l in support:
                g[l - 1] = 1.0
            dual = dual_backward_solve(kernel, g, t, traj)
            lyap = sig.variance_of(g)
            assert dual.variance == pytest.approx(lyap, rel=1e-5)
            # backward growth bound on the sup norm
            sups = np.abs(dual.test_functions).max(axis=1)
            bounds = norm_sup(g) * np.exp(6 * kernel.sup_norm * (t - dual.times)) + 1e-12
            assert (sups <= bounds).all()
    with pytest.raises(ValueError):
        dual_backward_solve(K1, np.ones(3), 2.0, _u_trajectory("constant", 1.0, L=16))


def test_covariance_matrix_validation():
    good = CovarianceMatrix(2, np.array([[1.0, 0.2], [0.2, 1.0]]))
    good.validate()
    with pytest.raises(ValueError):
        CovarianceMatrix(2, np.array([[1.0, 0.5], [0.4, 1.0]])).validate()
    with pytest.raises(ValueError):
        CovarianceMatrix(2, np.array([[1.0, 2.0], [2.0, 1.0]])).validate()  # eigenvalue -1
