import numpy as np
import pytest

from coaglab.kernels import capped_brownian_kernel, constant_kernel
from coaglab.smoluchowski import (
    SolverConfig,
    SolverError,
    coagulation_operator,
    constant_kernel_exact,
    constant_kernel_exact_vector,
    self_pair_correction,
    solve,
)
from coaglab.state import delta_density, norm_l1
from helpers import random_subprob

K1 = constant_kernel(1.0)


def test_operator_on_monodisperse():
    out = coagulation_operator(K1, np.array([1.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out, [-2.0, 1.0, 0.0, 0.0])
    assert not coagulation_operator(K1, np.zeros(5)).any()


def test_operator_norm_and_lipschitz_bounds():
    rng = np.random.default_rng(11)
    for kernel in (K1, capped_brownian_kernel(1.0, 10.0)):
        sup = kernel.sup_norm
        for _ in range(100):
            u = random_subprob(rng, 32)
            v = random_subprob(rng, 32)
            ku, kv = coagulation_operator(kernel, u), coagulation_operator(kernel, v)
            assert norm_l1(ku) <= 3 * sup * norm_l1(u) ** 2 + 1e-12
            lip = 3 * sup * (norm_l1(u) + norm_l1(v)) * norm_l1(u - v)
            assert norm_l1(ku - kv) <= lip + 1e-12


def test_self_pair_correction():
    out = self_pair_correction(K1, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(out, [2.0, -1.0, 0.0])
    # odd mass with no half-mass partner
    u = np.zeros(5)
    u[2] = 0.7  # mass 3
    out = self_pair_correction(K1, u)
    assert out[2] == 2 * 0.7 and np.count_nonzero(out) == 1
    rng = np.random.default_rng(5)
    for _ in range(100):
        u = random_subprob(rng, 24)
        assert norm_l1(self_pair_correction(K1, u)) <= 3 * norm_l1(u) + 1e-12


def test_closed_form_basics():
    assert constant_kernel_exact(1, 0.0) == 1.0
    assert constant_kernel_exact(2, 1.0) == pytest.approx(1 / 8, abs=1e-15)
    total = sum(constant_kernel_exact(l, 1.0) for l in range(1, 201))
    assert total == pytest.approx(0.5, abs=1e-12)
    # mass density sums to one for every time
    for t in (0.3, 1.0, 2.5):
        mass = sum(l * constant_kernel_exact(l, t) for l in range(1, 600))
        assert mass == pytest.approx(1.0, abs=1e-10)


def test_closed_form_satisfies_the_equation():
    """Finite-difference derivative of the closed form equals gain - loss."""
    L = 80
    for t in (0.3, 1.0, 1.7):
        u = constant_kernel_exact_vector(L, t)
        rhs = coagulation_operator(K1, u)
        h = 1e-5
        for l in (1, 2, 3, 7, 15):
            du = (
                constant_kernel_exact(l, t + h)
                - constant_kernel_exact(l, t - h)
            ) / (2 * h)
            assert du == pytest.approx(rhs[l - 1], abs=1e-8)


def test_solve_zero_kernel_is_constant():
    traj = solve(
        delta_density(8),
        constant_kernel(0.0),
        SolverConfig(truncation=8, horizon=2.0, grid=(0.5, 2.0), dt=0.25),
    )
    for t in (0.5, 2.0):
        assert np.array_equal(traj.density_at(t).values, delta_density(8).values)


def test_solve_matches_closed_form():
    cfg = SolverConfig(truncation=64, horizon=2.0, grid=(0.5, 1.0, 2.0), dt=1e-3)
    traj = solve(delta_density(64), K1, cfg)
    for t in (0.5, 1.0, 2.0):
        exact = constant_kernel_exact_vector(64, t)
        assert np.abs(traj.density_at(t).values - exact).max() <= 1e-10
    u1 = traj.density_at(1.0)
    assert np.allclose(u1.values[:3], [0.25, 0.125, 0.0625], atol=1e-12)


def test_number_density_ode():
    # total number solves M0' = -M0^2 for the unit constant kernel
    cfg = SolverConfig(truncation=64, horizon=2.0, grid=(0.5, 1.0, 2.0), dt=1e-3)
    traj = solve(delta_density(64), K1, cfg)
    for t in (0.5, 1.0, 2.0):
        d = traj.density_at(t)
        assert d.number_total() == pytest.approx(1.0 / (1.0 + t), abs=1e-9)


def test_mass_consistency_and_monotone_number():
    cfg = SolverConfig(truncation=24, horizon=3.0, grid=tuple(np.linspace(0.2, 3.0, 12)), dt=2e-3)
    traj = solve(delta_density(24), capped_brownian_kernel(1.0, 10.0), cfg)
    numbers = []
    for state in traj.states:
        assert abs(state.mass_total() - 1.0) <= 1e-10
        state.validate()
        numbers.append(state.number_total())
    assert all(a >= b - 1e-12 for a, b in zip(numbers, numbers[1:]))
    # truncation is deliberately tight here, so mass must visibly leak
    assert traj.states[-1].leaked_mass > 1e-6


def test_convergence_order():
    def err(dt):
        cfg = SolverConfig(truncation=64, horizon=1.0, grid=(1.0,), dt=dt)
        traj = solve(delta_density(64), K1, cfg)
        return np.abs(traj.density_at(1.0).values - constant_kernel_exact_vector(64, 1.0)).max()

    assert err(0.1) / err(0.05) >= 8.0


def test_uniqueness_surrogate_step_sizes_agree():
    a = solve(delta_density(32), K1, SolverConfig(truncation=32, horizon=1.0, grid=(1.0,), dt=2e-3))
    b = solve(delta_density(32), K1, SolverConfig(truncation=32, horizon=1.0, grid=(1.0,), dt=1e-3))
    assert norm_l1(a.density_at(1.0).values - b.density_at(1.0).values) <= 1e-9


def test_adaptive_mode():
    cfg = SolverConfig(truncation=48, horizon=1.0, grid=(0.5, 1.0), dt=None, atol=1e-8)
    traj = solve(delta_density(48), K1, cfg)
    exact = constant_kernel_exact_vector(48, 1.0)
    assert np.abs(traj.density_at(1.0).values - exact).max() <= 1e-6
    for state in traj.states:
        assert abs(state.mass_total() - 1.0) <= 10 * 1e-8 + 1e-12


def test_config_validation():
    with pytest.raises(SolverError):
        SolverConfig(truncation=8, horizon=1.0, grid=(1.0,), dt=0.5).validate(K1)  # dt > 1/6
    with pytest.raises(SolverError):
        SolverConfig(truncation=8, horizon=1.0, grid=(1.0,), dt=None, atol=1e-3).validate(K1)
    with pytest.raises(SolverError):
        SolverConfig(truncation=8, horizon=1.0, grid=(2.0,), dt=1e-2).validate(K1)
    with pytest.raises(SolverError):
        solve(delta_density(9), K1, SolverConfig(truncation=8, horizon=1.0, grid=(1.0,), dt=1e-2))
