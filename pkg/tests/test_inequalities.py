import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochbsde.inequalities import (
    bihari_check,
    bihari_eta,
    bihari_ode_oracle,
    bmo_diagnostic,
    default_probe_nodes,
    gronwall_check,
    make_saturated_bihari,
    make_saturated_gronwall,
    random_gronwall_data,
    saturation_functional,
)
from stochbsde.paths import TimeGrid, remaining_integral, simulate_brownian
from stochbsde.sfuncs import ThetaCalculus, identity_rho, make_h


@pytest.fixture(scope="module")
def ens():
    return simulate_brownian(TimeGrid.uniform(1.0, 40), 5000, 1, seed=8)


def test_deterministic_saturation_is_exponential(ens):
    inst = make_saturated_gronwall(ens, 2.0, 1.5, 0.0)
    exact = 2.0 * np.exp(1.5 * (1.0 - ens.grid.nodes))
    assert np.max(np.abs(inst.mu - exact)) < 1e-6
    assert inst.hypothesis["passed"]


def test_pure_integral_saturation(ens):
    inst = make_saturated_gronwall(ens, 0.0, 0.0, 1.0)
    assert np.max(np.abs(inst.mu - (1.0 - ens.grid.nodes))) < 1e-6


def test_saturation_recursion_holds_with_equality():
    # X_i = X_{i+1} + beta X_{i+1} dt + f dt up to O(dt^2) per step; exact for beta = 0
    dt = np.full(4, 0.25)
    X = saturation_functional(np.zeros((1, 5)), np.ones((1, 5)), np.array([2.0]), dt)
    assert np.allclose(X[0], [3.0, 2.75, 2.5, 2.25, 2.0])


@pytest.mark.parametrize("estimator", ["nested_mc", "regression"])
def test_gronwall_conclusion_on_deterministic_case(ens, estimator):
    inst = make_saturated_gronwall(ens, 2.0, 1.5, 0.0)
    rep = gronwall_check(inst, estimator, n_outer=20, inner_paths=64)
    assert rep.passed
    # saturated: the bound is attained, so margins sit at zero up to rounding
    assert all(abs(r["worst_margin"]) < 1e-9 * r["mean_bound"] for r in rep.rows)


@pytest.mark.parametrize("index", [0, 1, 2])
def test_gronwall_on_random_instances(ens, index):
    eta, beta, f, params = random_gronwall_data(11, index)
    inst = make_saturated_gronwall(ens, eta, beta, f)
    assert inst.hypothesis["passed"]
    rep = gronwall_check(inst, "nested_mc", n_outer=40, inner_paths=128, seed=index)
    assert rep.passed
    assert [r["node"] for r in rep.rows] == default_probe_nodes(40)


def test_random_data_respects_budget_and_is_reproducible(ens):
    for idx in range(10):
        eta, beta, f, params = random_gronwall_data(3, idx, budget=0.7)
        assert remaining_integral(beta(ens), ens.grid)[:, 0].max() <= 0.7 + 1e-12
        assert np.all(f(ens) >= 0) and np.all(eta(ens) > 0)
        assert random_gronwall_data(3, idx, budget=0.7)[3] == params


def test_strong_form_rows(ens):
    ok = make_saturated_gronwall(ens, 1.0, 1.0, 0.0, h=0.0)
    rep = gronwall_check(ok, "regression")
    assert any(r.get("strong") for r in rep.rows) and rep.passed
    bad = make_saturated_gronwall(ens, 1.0, 1.0, 0.0, h=50.0)
    assert not bad.hypothesis["strong_passed"]
    assert not gronwall_check(bad, "regression").passed


def test_gronwall_rejects_bad_inputs(ens):
    with pytest.raises(ValueError):
        make_saturated_gronwall(ens, 1.0, -1.0, 0.0)
    with pytest.raises(OverflowError):
        make_saturated_gronwall(ens, 1.0, 1e5, 0.0)
    with pytest.raises(ValueError):
        gronwall_check(make_saturated_gronwall(ens, 1.0, 1.0, 0.0), "kernel")


@settings(max_examples=15, deadline=None)
@given(b1=st.floats(0.0, 2.0), db=st.floats(0.0, 1.0))
def test_saturated_mu_monotone_in_beta(b1, db):
    e = simulate_brownian(TimeGrid.uniform(1.0, 10), 200, 1, seed=1)
    lo = make_saturated_gronwall(e, 1.0, b1, 0.5)
    hi = make_saturated_gronwall(e, 1.0, b1 + db, 0.5)
    assert np.all(hi.mu >= lo.mu - 1e-12)


def test_bihari_identity_matches_gronwall(ens):
    inst = make_saturated_bihari(ens, 0.5, lambda e: e.abs_brownian, identity_rho())
    rep = bihari_check(inst)
    assert rep.passed and inst.hypothesis["passed"]
    for r in rep.rows:
        assert abs(r["bound"] - 0.5 * math.exp(r["K"])) < 1e-6


def test_bihari_h_matches_ode_oracle(ens):
    h = make_h(0.1)
    inst = make_saturated_bihari(ens, 0.05, 1.0, h)
    oracle = bihari_ode_oracle(0.05, 1.0, h, 1.0)
    bound = ThetaCalculus(h).bihari_bound(0.05, 1.0)
    assert abs(bound - oracle) < 1e-4
    assert abs(float(inst.mu[:, 0].max()) - oracle) < 1e-4
    assert bihari_check(inst).passed


def test_bihari_zero_start_stays_zero(ens):
    inst = make_saturated_bihari(ens, 0.0, lambda e: e.abs_brownian, make_h(0.1))
    assert np.all(inst.mu == 0.0)
    rep = bihari_check(inst)
    assert rep.passed and all(r["zero_fraction"] == 1.0 for r in rep.rows)


def test_bihari_c_ladder(ens):
    mus = [float(make_saturated_bihari(ens, c, 1.0, make_h(0.1)).mu[:, 0].max()) for c in (0.01, 0.05, 0.2, 1.0)]
    assert np.all(np.diff(mus) > 0)


def test_bihari_rejects_negative_inputs(ens):
    with pytest.raises(ValueError):
        make_saturated_bihari(ens, -1.0, 1.0, identity_rho())
    with pytest.raises(ValueError):
        make_saturated_bihari(ens, 1.0, -1.0, identity_rho())


def test_bmo_of_constant_is_zero(ens):
    rep = bmo_diagnostic(ens, np.full(ens.n_paths, 3.0))
    assert rep.value == pytest.approx(0.0, abs=1e-12) and rep.passed


def test_bmo_of_indicator_is_bounded(ens):
    eta = (ens.brownian[:, -1, 0] > 0).astype(float)
    rep = bmo_diagnostic(ens, eta)
    # conditional variance of an indicator is at most 1/4 near maturity; regression noise stays well below 1
    assert 0.1 < rep.value <= 1.0 and rep.passed
    tau = np.full(ens.n_paths, 20)
    assert bmo_diagnostic(ens, eta, stopping=tau).value >= rep.value


def test_bmo_rejects_unbounded_terminal(ens):
    eta = np.ones(ens.n_paths)
    eta[0] = 1e9
    with pytest.raises(ValueError):
        bmo_diagnostic(ens, eta)


def test_bihari_eta_is_clipped_and_bounded(ens):
    inst = make_saturated_bihari(ens, 0.05, lambda e: e.abs_brownian, make_h(0.1))
    eta, M = bihari_eta(inst)
    assert np.all(eta >= 0) and np.all(eta <= M)
    assert bmo_diagnostic(ens, eta, bound=M).passed
