import math

import numpy as np
import pytest

from coaglab.kernels import (
    KernelError,
    capped_brownian_kernel,
    constant_kernel,
    from_config,
    lookup_table_kernel,
)


def test_constant_kernel_values():
    k = constant_kernel(1.0)
    assert k.rate(1, 2) == 1.0
    assert k.rate(7, 7) == 1.0
    assert k.sup_norm == 1.0
    assert constant_kernel(2.5).sup_norm == 2.5


def test_zero_mass_row_always_zero():
    for k in (constant_kernel(3.0), capped_brownian_kernel(1.0, 100.0),
              lookup_table_kernel({(1, 1): 3.0}, default=1.0)):
        for m in range(0, 50):
            assert k.rate(0, m) == 0.0
            assert k.rate(m, 0) == 0.0


def test_capped_brownian_equal_masses_is_four():
    k = capped_brownian_kernel(1.0, 100.0)
    for l in (1, 8, 27, 1000):
        assert math.isclose(k.rate(l, l), 4.0, rel_tol=1e-12)


def test_capped_brownian_cap_binds():
    k = capped_brownian_kernel(1.0, 5.0)
    assert k.sup_norm == 5.0
    # the uncapped form grows past the cap as the mass ratio grows
    uncapped = lambda l, m: (l ** (1 / 3) + m ** (1 / 3)) * (l ** (-1 / 3) + m ** (-1 / 3))
    grew = False
    m = 1
    while m < 10 ** 6:
        m *= 4
        if uncapped(1, m) > 5.0:
            grew = True
            assert k.rate(1, m) == 5.0
    assert grew


def test_lookup_table_kernel():
    k = lookup_table_kernel({(1, 1): 3.0}, default=0.0)
    assert k.sup_norm == 3.0
    assert k.rate(1, 1) == 3.0
    assert k.rate(2, 5) == 0.0
    # symmetrized storage
    k2 = lookup_table_kernel({(1, 2): 0.5})
    assert k2.rate(2, 1) == 0.5


def test_lookup_table_asymmetry_rejected_at_construction():
    with pytest.raises(KernelError):
        lookup_table_kernel({(1, 2): 1.0, (2, 1): 2.0})


def test_negative_rates_rejected():
    with pytest.raises(KernelError):
        constant_kernel(-1.0)
    with pytest.raises(KernelError):
        lookup_table_kernel({(1, 1): -0.5})


def test_symmetry_bounded_on_random_pairs():
    rng = np.random.default_rng(7)
    kernels = [
        constant_kernel(2.5),
        capped_brownian_kernel(1.3, 7.0),
        lookup_table_kernel({(1, 2): 3.0, (4, 4): 1.0}, default=0.25),
    ]
    for k in kernels:
        for _ in range(10_000):
            l, m = int(rng.integers(0, 10_000)), int(rng.integers(0, 10_000))
            v = k.rate(l, m)
            assert v == k.rate(m, l)
            assert 0.0 <= v <= k.sup_norm


def test_rate_table_matches_rate():
    k = capped_brownian_kernel(0.7, 3.0)
    tab = k.rate_table(30)
    for l in range(31):
        for m in range(31):
            assert tab[l, m] == k.rate(l, m)
    anti = k.antidiagonals(30)
    for l in range(2, 31):
        expect = [k.rate(i, l - i) for i in range(1, l)]
        assert np.array_equal(anti[l], expect)
    assert k.rate_table_list(10) == k.rate_table(10).tolist()


def test_from_config_round_trip():
    for decl in (
        {"kind": "constant", "c": 1.5},
        {"kind": "capped-brownian", "c0": 1.0, "cap": 10.0},
        {"kind": "lookup-table", "entries": [[1, 2, 0.5]], "default": 0.1},
    ):
        k = from_config(decl)
        assert from_config(k.describe()).describe() == k.describe()
    with pytest.raises(KernelError):
        from_config({"kind": "nope"})
