import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochbsde.paths import (
    AdaptedProcess,
    PathEnsemble,
    StoppingTimeField,
    TimeGrid,
    hitting_time,
    norms,
    permute_future_test,
    running_integral,
    simulate_brownian,
)


@pytest.fixture(scope="module")
def big():
    return simulate_brownian(TimeGrid.uniform(1.0, 100), 100_000, 1, seed=1)


def test_grid_invariants():
    g = TimeGrid.uniform(2.0, 7)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.0
    assert np.all(np.diff(g.nodes) > 0)
    with pytest.raises(ValueError):
        TimeGrid.from_nodes([0.0, 0.5, 0.4, 1.0])
    with pytest.raises(ValueError):
        TimeGrid.from_nodes([0.1, 0.5, 1.0])


def test_variance_of_terminal_value(big):
    assert 0.98 <= big.brownian[:, -1, 0].var() <= 1.02


def test_seeded_determinism():
    g = TimeGrid.uniform(1.0, 20)
    a = simulate_brownian(g, 5000, 2, seed=4)
    b = simulate_brownian(g, 5000, 2, seed=4, threads=3)
    assert np.array_equal(a.increments, b.increments)
    c = simulate_brownian(g, 5000, 2, seed=5)
    assert not np.array_equal(a.increments, c.increments)


def test_coordinates_uncorrelated():
    e = simulate_brownian(TimeGrid.uniform(1.0, 100), 100_000, 2, seed=2)
    corr = np.corrcoef(e.brownian[:, -1, 0], e.brownian[:, -1, 1])[0, 1]
    assert abs(corr) < 0.02


def test_increments_uncorrelated_across_steps(big):
    n = big.n_paths
    inc = big.increments[:, :, 0]
    for i, j in [(0, 1), (10, 50), (98, 99)]:
        r = np.corrcoef(inc[:, i], inc[:, j])[0, 1]
        assert abs(r) < 3 / np.sqrt(n)


def test_rejects_empty_ensembles():
    g = TimeGrid.uniform(1.0, 10)
    with pytest.raises(ValueError):
        simulate_brownian(g, 0, 1, 0)
    with pytest.raises(ValueError):
        simulate_brownian(g, 10, 0, 0)


def test_hitting_time_constant_integrand():
    e = simulate_brownian(TimeGrid.uniform(1.0, 100), 50, 1, 0)
    tau = hitting_time(e, np.ones((50, 101)), 0.5)
    assert np.all(tau.stop_index == 50)
    never = hitting_time(e, np.zeros((50, 101)), 0.5)
    assert np.all(never.stop_index == 100)


def test_hitting_time_pathwise_resummation(big):
    small = big.with_increments(big.increments[:2000])
    M = 1.0
    tau = hitting_time(small, small.abs_brownian, M / 2).stop_index
    run = running_integral(small.abs_brownian, small.grid)
    for p in range(small.n_paths):
        s = tau[p]
        if s > 0:
            assert run[p, s - 1] < M / 2
        if s < small.grid.n_steps:
            assert run[p, s] >= M / 2 - 1e-12


def test_hitting_time_rejects_negative():
    e = simulate_brownian(TimeGrid.uniform(1.0, 10), 5, 1, 0)
    with pytest.raises(ValueError):
        hitting_time(e, -np.ones((5, 11)), 0.5)


@settings(max_examples=25, deadline=None)
@given(lo=st.floats(0.01, 1.0), extra=st.floats(0.0, 1.0))
def test_hitting_time_monotone_in_level(lo, extra):
    e = simulate_brownian(TimeGrid.uniform(1.0, 50), 200, 1, 3)
    a = hitting_time(e, e.abs_brownian, lo).stop_index
    b = hitting_time(e, e.abs_brownian, lo + extra).stop_index
    assert np.all(b >= a)


def test_norms_of_zero_and_constant():
    e = simulate_brownian(TimeGrid.uniform(1.0, 20), 100, 1, 0)
    zero_y = AdaptedProcess(e, np.zeros((100, 21, 1)))
    zero_z = AdaptedProcess(e, np.zeros((100, 21, 1, 1)))
    r = norms(zero_y, zero_z)
    assert r.s2_norm == r.m2_norm == r.h2_norm == r.bmo_norm == 0.0
    one_z = AdaptedProcess(e, np.ones((100, 21, 1, 1)))
    r = norms(zero_y, one_z)
    assert r.m2_norm == pytest.approx(1.0) and r.h2_norm == pytest.approx(1.0)


def test_s2_norm_of_brownian_motion_doob_bracket(big):
    Y = AdaptedProcess(big, big.brownian)
    Z = AdaptedProcess(big, np.zeros((big.n_paths, 101, 1, 1)))
    s2sq = norms(Y, Z).s2_norm ** 2
    # E B_T^2 <= E sup B^2 <= 4 E B_T^2 (Doob)
    assert 1.0 * 0.98 <= s2sq <= 4.0 * 1.02


@settings(max_examples=10, deadline=None)
@given(lam=st.floats(-3.0, 3.0).filter(lambda x: abs(x) > 1e-3))
def test_norm_scaling(lam):
    e = simulate_brownian(TimeGrid.uniform(1.0, 10), 300, 1, 6)
    Y = AdaptedProcess(e, e.brownian)
    Z = AdaptedProcess(e, e.brownian[:, :, :, None])
    base = norms(Y, Z)
    scaled = norms(Y, AdaptedProcess(e, lam * e.brownian[:, :, :, None]))
    assert scaled.m2_norm == pytest.approx(abs(lam) * base.m2_norm, rel=1e-10)
    assert scaled.h2_norm == pytest.approx(abs(lam) * base.h2_norm, rel=1e-10)
    assert scaled.bmo_norm == pytest.approx(lam**2 * base.bmo_norm, rel=1e-6, abs=1e-12)


def test_norms_reject_mismatched_ensembles():
    a = simulate_brownian(TimeGrid.uniform(1.0, 10), 10, 1, 0)
    b = simulate_brownian(TimeGrid.uniform(1.0, 10), 10, 1, 1)
    with pytest.raises(ValueError):
        norms(AdaptedProcess(a, a.brownian), AdaptedProcess(b, b.brownian[:, :, :, None]))


def test_adaptedness_probe():
    e = simulate_brownian(TimeGrid.uniform(1.0, 20), 100, 1, 0)
    B = AdaptedProcess.from_builder(e, lambda en: en.brownian)
    run = AdaptedProcess.from_builder(e, lambda en: running_integral(en.abs_brownian, en.grid))
    terminal = AdaptedProcess.from_builder(e, lambda en: np.repeat(en.brownian[:, -1:], en.grid.n_nodes, axis=1))
    for i in range(0, 21, 5):
        assert permute_future_test(B, i, seed=1)
        assert permute_future_test(run, i, seed=1)
    assert not permute_future_test(terminal, 10, seed=1)


def test_stopping_time_before_mask():
    e = simulate_brownian(TimeGrid.uniform(1.0, 4), 3, 1, 0)
    tau = StoppingTimeField(e, np.array([0, 2, 4]))
    assert tau.before().tolist() == [[False] * 5, [True, True, False, False, False], [True] * 4 + [False]]


def test_coarsen_matches_direct_sum():
    e = simulate_brownian(TimeGrid.uniform(1.0, 8), 10, 1, 0)
    c = e.coarsen(4)
    assert c.grid.n_steps == 2
    assert np.allclose(c.brownian[:, -1], e.brownian[:, -1])
    assert isinstance(c, PathEnsemble)
