"""Desk-scale acceptance suite.

Each test runs one verification campaign at its contract scale, prints a
single PASS/FAIL line, and asserts the campaign's verdict.  Statistical
campaigns use fixed seeds, so outcomes are reproducible; the tolerance
bands are sized so that a correct implementation sits well inside them
while any systematic defect at the tested scale overshoots them by far.

One stated bound is carried as an executable deviation record: the
quadratic-variation density admits the sharp constant 4, not 3 (same-class
merges move a count by two, contributing a squared jump of four); the test
asserting the constant-3 form is expected to fail and is marked so,
strictly.
"""

import pytest

from coaglab import acceptance
from coaglab.kernels import constant_kernel
from coaglab.simulate import qv_integrand
from coaglab.state import MassHistogram


def _report(rep: dict) -> str:
    line = f"criterion {rep['criterion']} [{rep['name']}]: " \
           f"{'PASS' if rep['passed'] else 'FAIL'} ({rep['seconds']:.1f}s)"
    print(line)
    return line


@pytest.mark.acceptance
def test_criterion_1_exactness_vs_oracle():
    rep = acceptance.oracle_agreement(replicas=100_000)
    _report(rep)
    assert rep["passed"], rep["failures"]
    assert rep["n_checks"] == 112  # 2 kernels x {2,3,4,5} x 2 strategies x 2 times x every mass


@pytest.mark.acceptance
def test_criterion_2_hydrodynamic_limit():
    rep = acceptance.hydrodynamic_scaling(ns=(100, 1000, 10_000), replicas=200, t=1.0, L=64)
    _report(rep)
    assert rep["decreasing"], rep
    assert rep["sqrt_n_band_ok"], rep
    assert rep["passed"]


@pytest.mark.acceptance
def test_criterion_3_solver_accuracy():
    rep = acceptance.solver_accuracy(times=(0.5, 1.0, 2.0), L=64, dt=1e-3, max_err=1e-8)
    _report(rep)
    assert rep["max_abs_error"] <= 1e-8, rep
    assert rep["improvement_ratio"] >= 8.0, rep
    assert rep["passed"]


@pytest.mark.acceptance
def test_criterion_4_clt_variance():
    rep = acceptance.clt_variance(
        n=10_000, replicas=2000, t=1.0, masses=(1, 2, 3), rel_tol=0.15
    )
    _report(rep)
    bad = [r for r in rep["rows"] if not all(v for k, v in r.items() if k.endswith("_ok"))]
    assert rep["passed"], bad


@pytest.mark.acceptance
def test_criterion_5_route_crosscheck():
    rep = acceptance.route_crosscheck(t=1.0, tolerance=1e-5)
    _report(rep)
    assert rep["passed"], rep["rows"]
    supports = {tuple(r["g_support"]) for r in rep["rows"]}
    assert supports == {(1,), (2,), (3,), (1, 2, 3, 4, 5)}


@pytest.mark.acceptance
def test_criterion_6_martingale_diagnostics():
    rep = acceptance.martingale_diagnostics(
        n=1000, replicas=2000, times=(0.5, 1.0), masses=(1, 2, 4), qv_rel_tol=0.10
    )
    _report(rep)
    assert rep["passed"], rep["rows"]


@pytest.mark.acceptance
def test_criterion_7_displayed_bound_suite():
    rep = acceptance.bound_suite(cases=1000)
    _report(rep)
    for item in rep["items"]:
        assert item["violations"] == 0, item
    assert rep["passed"]
    # executable record of the stated-constant deviation: concentrated
    # count states push the QV density above 3 supK, approaching 4 supK
    assert not rep["qv_stated_holds"]
    assert 3.0 < rep["qv_worst_over_sup"] <= 4.0


@pytest.mark.acceptance
def test_criterion_7_qv_bound_counterexample_is_exact():
    """The monodisperse state at n gives a QV density of exactly 4(n-1)/n."""
    k = constant_kernel(1.0)
    for n in (5, 10, 100):
        h = MassHistogram(n=n, counts={1: n})
        top = qv_integrand(h, k, 2)[0]
        assert top == pytest.approx(4.0 * (n - 1) / n, abs=1e-12)
    assert qv_integrand(MassHistogram(n=5, counts={1: 5}), k, 2)[0] > 3.0


@pytest.mark.acceptance
@pytest.mark.xfail(
    strict=True,
    reason="stated constant 3 is unattainable for the exact QV density: "
    "same-class merges move a mass count by two, so concentrated states "
    "reach 4(n-1)/n times the kernel supremum (see notes/decisions.md)",
)
def test_criterion_7_qv_bound_with_stated_constant():
    rep = acceptance.bound_suite(cases=1000)
    assert rep["qv_stated_holds"]


@pytest.mark.acceptance
def test_criterion_8_moment_growth():
    rep = acceptance.moment_growth(n=1000, replicas=500)
    _report(rep)
    ps = sorted(c["p"] for c in rep["checks"])
    assert ps == [2, 3, 4]
    coeffs = {c["p"]: c["coeff"] for c in rep["checks"]}
    assert coeffs == {2: 2.0, 3: 3.0, 4: pytest.approx(14.0 / 3.0)}
    assert rep["passed"], rep["checks"]


@pytest.mark.acceptance
def test_criterion_9_conservation_invariants():
    rep = acceptance.conservation_checks()
    _report(rep)
    assert rep["passed"], rep["rows"]
    names = {r["check"] for r in rep["rows"]}
    assert {"mass-conservation-per-event-thinning",
            "mass-conservation-per-event-direct",
            "mass-functional-exactly-zero",
            "noise-form-additive-blind-spot"} <= names
