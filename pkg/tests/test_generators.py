import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochbsde.generators import (
    GeneratorSpec,
    assert_z_free,
    check_A,
    check_all,
    check_H1,
    check_H2,
    check_H3,
    check_H4,
    example46_weights,
    generator_preset,
    make_example46,
    make_linear,
    make_sign,
    make_square,
    make_zero,
    nondomination_probe,
    weight_budgets,
)
from stochbsde.paths import AdaptedProcess, TimeGrid, permute_future_test, running_integral, simulate_brownian
from stochbsde.sfuncs import make_h


@pytest.fixture(scope="module")
def ens():
    return simulate_brownian(TimeGrid.uniform(1.0, 50), 3000, 1, seed=1)


@pytest.mark.parametrize("name", ["zero", "linear:1,0.5", "linear:-1,0", "example46:1,0.1"])
def test_presets_pass_every_checker(ens, name):
    rep = check_all(generator_preset(name), ens, n_samples=10_000, seed=3)
    assert rep.passed
    assert all(r.violations == 0 for r in rep.reports())


def test_square_is_caught_by_monotonicity(ens):
    r = check_H2(make_square(), ens, 10_000, seed=0)
    assert not r.passed and r.violations > 0
    w = r.witness
    y1, y2 = np.array(w["y1"]), np.array(w["y2"])
    # the witness reproduces a violation: (y1 - y2)(y1^2 - y2^2) > 0 with u = 0
    assert float(np.sum((y1 - y2) * (y1**2 - y2**2))) > 0


def test_sign_is_caught_by_continuity(ens):
    r = check_H1(make_sign(), ens, 10_000, seed=0)
    assert not r.passed and r.witness is not None
    # the origin is a deterministic base point and the jump there never shrinks
    assert r.worst_margin == pytest.approx(1.0)


def test_sign_is_monotone(ens):
    # the planted discontinuity does not break monotonicity
    assert check_H2(make_sign(), ens, 5000, seed=1).passed


def test_lipschitz_detects_understated_weight(ens):
    honest = make_linear(1, 1, 0.0, 2.0)
    understated = GeneratorSpec(**{**honest.__dict__, "v": lambda e: np.ones((e.n_paths, e.grid.n_nodes))})
    assert check_H4(honest, ens, 5000).passed
    assert not check_H4(understated, ens, 5000).passed


def test_growth_condition_detects_missing_forcing(ens):
    g = make_linear(1, 1, 0.0, 0.0, forcing=1.0)
    assert check_A(g, ens, n_samples=5000).passed
    zero_f = lambda e: np.zeros((e.n_paths, e.grid.n_nodes))
    assert not check_A(g, ens, f_process=zero_f, n_samples=5000).passed


def test_growth_integral_of_linear_generator(ens):
    # sup_{|y| <= r} |a y| = |a| r, so E int_0^T psi_r dt = |a| r T
    r = check_H3(make_linear(1, 1, 2.0, 0.0), ens, r_ladder=(1.0, 3.0), n_paths=50)
    assert r.passed
    assert r.details["estimates"] == pytest.approx([2.0, 6.0], rel=1e-12)


def test_example46_substitutions(ens):
    g = make_example46(1.0, 0.1)
    bg = g.bind(ens)
    h = make_h(0.1)
    rows = np.arange(20)
    node = 10
    y = np.column_stack([np.linspace(-1, 1, 20), np.linspace(2, -2, 20)])
    z = np.stack([np.full((20, 1), 0.3), np.full((20, 1), -0.4)], axis=1)
    out = bg(node, y, z, rows)
    u_bar, v_bar = (f(ens)[rows, node] for f in example46_weights(1.0))
    absB = np.abs(ens.brownian[rows, node, 0])
    expect1 = u_bar * (h(np.abs(y[:, 1])) - np.exp(y[:, 0])) + v_bar * 0.4 + absB
    expect2 = u_bar * (h(np.abs(y[:, 0])) - np.exp(y[:, 1])) + v_bar * 0.3 + absB
    assert np.allclose(out, np.column_stack([expect1, expect2]), rtol=1e-13, atol=1e-13)


def test_example46_budgets_stop_at_half_M(ens):
    M = 1.0
    u_bar, v_bar = example46_weights(M)
    dt = ens.grid.dt
    ub, vb = u_bar(ens), v_bar(ens)
    step_u = np.max(ens.abs_brownian[:, :-1] * dt, axis=1)
    step_v = np.max(ens.abs_brownian[:, :-1] ** 2 * dt, axis=1)
    assert np.all(ub[:, :-1] @ dt <= M / 2 + step_u + 1e-12)
    assert np.all(vb[:, :-1] ** 2 @ dt <= M / 2 + step_v + 1e-12)
    b = weight_budgets(make_example46(M, 0.1), ens)
    assert b["v_l2_max"] <= M / 2 + step_v.max() + 1e-12


def test_example46_weights_adapted(ens):
    u_bar, _ = example46_weights(1.0)
    proc = AdaptedProcess.from_builder(ens.with_increments(ens.increments[:200]), u_bar)
    assert permute_future_test(proc, 25, seed=4)


def test_example46_rejects_bad_parameters():
    with pytest.raises(ValueError):
        make_example46(0.0, 0.1)
    with pytest.raises(ValueError):
        make_example46(1.0, 0.5)


def test_nondomination_flags_small_times(ens):
    M = 1.0
    rep = nondomination_probe(ens, M, lambda t: M / (4 * t), lambda t: math.sqrt(M / (4 * t)))
    small = [i for i in rep.u_flagged_nodes if rep.times[i] <= 0.5]
    assert small
    # M / (2t) is never exceeded before the budget is spent
    safe = nondomination_probe(ens, M, lambda t: M / (2 * t), lambda t: math.sqrt(M / (2 * t)))
    assert not safe.u_flagged_nodes
    ints = [r["integral"] for r in rep.refinement]
    # (M/2) * harmonic sum: each tenfold refinement adds about (M/2) ln 10
    assert np.allclose(np.diff(ints), 0.5 * math.log(10), atol=0.05)


def test_z_free_detection(ens):
    assert_z_free(make_linear(1, 1, 1.0, 0.0), ens)
    with pytest.raises(ValueError):
        assert_z_free(make_linear(1, 1, 1.0, 1.0), ens)


def test_presets_and_dimension_guard(ens):
    assert generator_preset("linear:1,0.5").params == {"a": 1.0, "b": 0.5, "forcing": False}
    assert make_zero().name == "zero"
    with pytest.raises(ValueError):
        generator_preset("cubic")
    with pytest.raises(ValueError):
        make_example46(1.0, 0.1, d=2).bind(ens)


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), y=st.floats(-5, 5), z=st.floats(-5, 5))
def test_linear_generator_values(a, b, y, z):
    e = simulate_brownian(TimeGrid.uniform(1.0, 4), 3, 1, 0)
    g = make_linear(1, 1, a, b, forcing=0.25)
    out = g.bind(e)(2, np.full((3, 1), y), np.full((3, 1, 1), z))
    assert np.allclose(out, a * y + b * z + 0.25)


def test_forcing_process_follows_ensemble(ens):
    forcing = AdaptedProcess.from_builder(ens, lambda e: running_integral(e.abs_brownian, e.grid))
    g = make_linear(1, 1, 0.0, 0.0, forcing=forcing)
    other = simulate_brownian(ens.grid, 10, 1, seed=9)
    out = g.bind(other)(5, np.zeros((10, 1)), np.zeros((10, 1, 1)))
    assert np.allclose(out[:, 0], running_integral(other.abs_brownian, other.grid)[:, 5])
