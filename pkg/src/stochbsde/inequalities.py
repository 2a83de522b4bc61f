"""Empirical checks of the stochastic Gronwall and Bihari inequalities.

Instances are *saturated*: ``mu`` is built so the hypothesis holds with (near)
equality, which makes the conclusion's bound as tight as the instance allows.

Gronwall. With ``beta``, ``f`` frozen on each step, the backward recursion

    X_N = eta,   X_i = e^{beta_i dt} X_{i+1} + f_i (e^{beta_i dt} - 1) / beta_i

is a path functional and ``mu_i = E[X_i | F_i]`` saturates the hypothesis
(exactly ``c e^{b (T - t)}`` for constant data). Since
``X_i <= e^{R_i} (eta + sum_{j>=i} f_j dt)`` with ``R_i`` the path's remaining
``beta`` budget, the conclusion's margin is a conditional mean of a nonnegative
quantity whenever ``K >= R_i`` on every simulated path.

Bihari. ``mu_i = Phi(E[mu_{i+1} | F_i], beta_i dt)`` with ``Phi`` the flow of
``m' = rho(m)``; for deterministic ``beta`` this is the bound itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import _rng
from .conditional import CondExpEstimator, ConditionalOperator, inner_ensemble
from .paths import PathEnsemble, hitting_time, remaining_integral
from .sfuncs import RhoFunction, ThetaCalculus

Factory = Callable[[PathEnsemble], np.ndarray]

# absolute slack for margins that are zero up to rounding
ROUNDING_FLOOR = 1e-12


def _phi(beta_dt: np.ndarray, dt) -> np.ndarray:
    """``(e^{beta dt} - 1) / beta``, equal to ``dt`` where ``beta = 0``."""
    safe = np.where(beta_dt == 0.0, 1.0, beta_dt)
    return np.where(beta_dt == 0.0, dt, np.expm1(safe) / safe * dt)


def saturation_functional(beta: np.ndarray, f: np.ndarray, eta: np.ndarray, dt: np.ndarray) -> np.ndarray:
    """Pathwise ``X`` of shape ``(n, N + 1)`` from the exponential backward recursion."""
    n, n_nodes = beta.shape
    X = np.empty((n, n_nodes))
    X[:, -1] = eta
    for i in range(n_nodes - 2, -1, -1):
        bdt = beta[:, i] * dt[i]
        X[:, i] = np.exp(bdt) * X[:, i + 1] + f[:, i] * _phi(bdt, dt[i])
    return X


@dataclass
class GronwallInstance:
    ensemble: PathEnsemble
    beta_fn: Factory = field(repr=False)
    f_fn: Factory = field(repr=False)
    eta_fn: Factory = field(repr=False)
    h_fn: Optional[Factory] = field(default=None, repr=False)
    beta: np.ndarray = field(default=None, repr=False)
    f: np.ndarray = field(default=None, repr=False)
    eta: np.ndarray = field(default=None, repr=False)
    X: np.ndarray = field(default=None, repr=False)
    mu: np.ndarray = field(default=None, repr=False)
    mu_se: np.ndarray = field(default=None, repr=False)
    hypothesis: dict = field(default_factory=dict)


def _as_factory(x) -> Factory:
    if callable(x):
        return x
    value = float(x)
    return lambda ens: np.full((ens.n_paths, ens.grid.n_nodes), value)


def _eta_factory(x) -> Factory:
    if callable(x):
        return x
    value = float(x)
    return lambda ens: np.full(ens.n_paths, value)


def make_saturated_gronwall(ensemble: PathEnsemble, eta, beta, f, h=None,
                            estimator: Optional[CondExpEstimator] = None) -> GronwallInstance:
    """Build ``mu_i = E[X_i | F_i]`` by regression and probe the hypothesis at every node.

    ``eta``, ``beta``, ``f`` (and optional ``h``) are constants or functions of an
    ensemble returning ``(n,)`` for ``eta`` and ``(n, n_nodes)`` otherwise.
    """
    est = estimator or CondExpEstimator()
    beta_fn, f_fn, eta_fn = _as_factory(beta), _as_factory(f), _eta_factory(eta)
    h_fn = None if h is None else _as_factory(h)
    b, ff, e = beta_fn(ensemble), f_fn(ensemble), eta_fn(ensemble)
    if np.any(b < 0) or np.any(ff < 0) or np.any(e < 0):
        raise ValueError("beta, f and eta must be nonnegative")
    dt = ensemble.grid.dt
    with np.errstate(over="ignore", invalid="ignore"):
        X = saturation_functional(b, ff, e, dt)
    if not np.all(np.isfinite(X)):
        raise OverflowError("saturation recursion blew up; reduce the beta budget")
    op = ConditionalOperator(est, ensemble)
    N = ensemble.grid.n_steps
    mu = np.empty_like(X)
    mu_se = np.zeros_like(X)
    mu[:, N] = e
    for i in range(N):
        r = op.regress(i, X[:, i])
        mu[:, i], mu_se[:, i] = r.values, r.se
    inst = GronwallInstance(ensemble, beta_fn, f_fn, eta_fn, h_fn, b, ff, e, X, mu, mu_se)
    inst.hypothesis = _gronwall_hypothesis(inst, op)
    return inst


def _gronwall_hypothesis(inst: GronwallInstance, op: ConditionalOperator) -> dict:
    """``E[eta + int_t^T (beta mu + f) ds | F_t] - mu_t >= -3 se`` at every node."""
    N = inst.ensemble.grid.n_steps
    integrand = remaining_integral(inst.beta * inst.mu + inst.f, inst.ensemble.grid)
    worst, fractions = np.inf, []
    strong = []
    for i in range(N):
        r = op.regress(i, inst.eta + integrand[:, i] - inst.mu[:, i])
        se = np.hypot(r.se, inst.mu_se[:, i])
        ok = r.values >= -3.0 * se - ROUNDING_FLOOR * (1.0 + np.abs(inst.mu[:, i]))
        fractions.append(float(ok.mean()))
        if np.any(se > 0):
            worst = min(worst, float(np.min(r.values[se > 0] / se[se > 0])))
    out = {"fractions": fractions, "min_fraction": min(fractions), "worst_margin_in_se": worst if np.isfinite(worst) else None}
    if inst.h_fn is not None:
        h = inst.h_fn(inst.ensemble)
        sup_mu = np.maximum.accumulate(inst.mu[:, ::-1], axis=1)[:, ::-1]
        hrem = remaining_integral(h, inst.ensemble.grid)
        for i in range(N):
            r = op.regress(i, inst.eta + integrand[:, i] - sup_mu[:, i] - hrem[:, i])
            ok = r.values >= -3.0 * r.se - ROUNDING_FLOOR * (1.0 + np.abs(sup_mu[:, i]))
            strong.append(float(ok.mean()))
        out["strong_fractions"] = strong
    eps = _eps(inst.ensemble.n_paths)
    out["epsilon"] = eps
    out["passed"] = out["min_fraction"] >= 1.0 - eps
    if strong:
        out["strong_passed"] = min(strong) >= 1.0 - eps
    return out


def _eps(n: int) -> float:
    p = 0.00135
    return p + 3.0 * math.sqrt(p * (1.0 - p) / n)


@dataclass
class InequalityReport:
    rows: List[dict]
    passed: bool
    epsilon: float
    settings: dict

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def default_probe_nodes(n_steps: int) -> list:
    return sorted({int(round(q * n_steps)) for q in (0.0, 0.25, 0.5, 0.75, 0.9)})


def gronwall_check(inst: GronwallInstance, estimator: str = "nested_mc", probe_nodes=None, n_outer: int = 200,
                   inner_paths: int = 512, seed: int = 0) -> InequalityReport:
    """Conclusion ``mu_t <= e^{K_t} E[eta + int_t^T f ds | F_t]`` at probe nodes.

    ``K_t`` is the largest remaining ``beta`` budget over every simulated path
    (outer ensemble and, for the nested estimator, all inner paths). Per path the
    margin passes at ``>= -3`` standard errors.
    """
    if estimator not in ("nested_mc", "regression"):
        raise ValueError("estimator must be 'nested_mc' or 'regression'")
    ens = inst.ensemble
    grid = ens.grid
    dt = grid.dt
    probe_nodes = default_probe_nodes(grid.n_steps) if probe_nodes is None else list(probe_nodes)
    beta_rem = remaining_integral(inst.beta, grid)
    f_rem = remaining_integral(inst.f, grid)
    rows = []
    op = ConditionalOperator(CondExpEstimator(), ens) if estimator == "regression" else None
    outer = np.arange(min(n_outer, ens.n_paths))
    for i in probe_nodes:
        if estimator == "nested_mc":
            inner = inner_ensemble(ens, i, outer, inner_paths, seed)
            b, ff, e = inst.beta_fn(inner), inst.f_fn(inner), inst.eta_fn(inner)
            X = saturation_functional(b, ff, e, dt)[:, i]
            b_rem = remaining_integral(b, grid)[:, i]
            K = float(max(beta_rem[:, i].max(), b_rem.max()))
            rhs = e + remaining_integral(ff, grid)[:, i]
            D = (math.exp(K) * rhs - X).reshape(outer.size, inner_paths)
            margin = D.mean(axis=1)
            se = D.std(axis=1, ddof=1) / math.sqrt(inner_paths)
            mu = X.reshape(outer.size, inner_paths).mean(axis=1)
            bound = math.exp(K) * rhs.reshape(outer.size, inner_paths).mean(axis=1)
        else:
            K = float(beta_rem[:, i].max())
            r = op.regress(i, math.exp(K) * (inst.eta + f_rem[:, i]) - inst.X[:, i])
            margin, se = r.values.ravel(), r.se.ravel()
            mu = inst.mu[:, i]
            bound = mu + margin
        ok = margin >= -3.0 * se - ROUNDING_FLOOR * (1.0 + np.abs(bound))
        rows.append({
            "node": int(i), "t": float(grid.nodes[i]), "K": K, "fraction": float(ok.mean()),
            "worst_margin": float(margin.min()), "mean_mu": float(mu.mean()), "mean_bound": float(np.mean(bound)),
            "max_se": float(se.max()), "min_margin_in_se": float(np.min(margin[se > 0] / se[se > 0])) if np.any(se > 0) else None,
        })
    if inst.h_fn is not None:
        rows.extend(_strong_rows(inst, probe_nodes, beta_rem, f_rem))
    # nested margins are means of nonnegative draws, so every path must pass;
    # regression margins are allowed the usual epsilon fraction
    need = 1.0 if estimator == "nested_mc" else 1.0 - _eps(ens.n_paths)
    passed = all(r["fraction"] >= need for r in rows if "strong" not in r)
    passed = passed and all(r["fraction"] >= 1.0 - _eps(ens.n_paths) for r in rows if "strong" in r)
    settings = {"estimator": estimator, "n_outer": int(outer.size), "inner_paths": inner_paths, "seed": seed}
    return InequalityReport(rows, passed, _eps(ens.n_paths), settings)


def _strong_rows(inst: GronwallInstance, probe_nodes, beta_rem, f_rem) -> list:
    """``E[sup_{[t,T]} mu + int_t^T h | F_t] <= e^{K_t} E[eta + int_t^T f | F_t]`` by regression."""
    ens = inst.ensemble
    op = ConditionalOperator(CondExpEstimator(), ens)
    sup_mu = np.maximum.accumulate(inst.mu[:, ::-1], axis=1)[:, ::-1]
    hrem = remaining_integral(inst.h_fn(ens), ens.grid)
    out = []
    for i in probe_nodes:
        K = float(beta_rem[:, i].max())
        r = op.regress(i, math.exp(K) * (inst.eta + f_rem[:, i]) - sup_mu[:, i] - hrem[:, i])
        margin, se = r.values.ravel(), r.se.ravel()
        ok = margin >= -3.0 * se - ROUNDING_FLOOR * (1.0 + np.abs(sup_mu[:, i]))
        out.append({"node": int(i), "t": float(ens.grid.nodes[i]), "K": K, "strong": True,
                    "fraction": float(ok.mean()), "worst_margin": float(margin.min())})
    return out


@dataclass
class BihariInstance:
    ensemble: PathEnsemble
    c: float
    beta: np.ndarray = field(repr=False)
    rho: RhoFunction
    mu: np.ndarray = field(repr=False)
    mu_se: np.ndarray = field(repr=False)
    hypothesis: dict = field(default_factory=dict)


def make_saturated_bihari(ensemble: PathEnsemble, c: float, beta, rho: RhoFunction,
                          estimator: Optional[CondExpEstimator] = None, substeps: int = 16) -> BihariInstance:
    """``mu_i = Phi(E[mu_{i+1} | F_i], beta_i dt)`` with ``mu_N = c``; a flow from 0 stays 0."""
    if c < 0:
        raise ValueError("c must be nonnegative")
    est = estimator or CondExpEstimator()
    b = _as_factory(beta)(ensemble)
    if np.any(b < 0):
        raise ValueError("beta must be nonnegative")
    dt = ensemble.grid.dt
    N = ensemble.grid.n_steps
    op = ConditionalOperator(est, ensemble)
    mu = np.empty(b.shape)
    mu_se = np.zeros(b.shape)
    predicted = np.zeros(b.shape)
    mu[:, N] = c
    for i in range(N - 1, -1, -1):
        r = op.regress(i, mu[:, i + 1])
        predicted[:, i] = r.values
        start = np.maximum(r.values, 0.0)
        mu[:, i] = rho.flow(start, b[:, i] * dt[i], substeps)
        mu_se[:, i] = r.se
    inst = BihariInstance(ensemble, float(c), b, rho, mu, mu_se)
    # E[c + sum_{j>=i} beta_j rho(mu_j) dt | F_i] by the same backward regressions as mu,
    # so both sides share one chain of projections
    fractions = [1.0] * N
    rhs_next = np.full(ensemble.n_paths, float(c))
    for i in range(N - 1, -1, -1):
        r = op.regress(i, rhs_next - mu[:, i + 1])
        margin = b[:, i] * dt[i] * rho(mu[:, i]) + r.values + predicted[:, i] - mu[:, i]
        ok = margin >= -3.0 * r.se - ROUNDING_FLOOR * (1.0 + mu[:, i])
        fractions[i] = float(ok.mean())
        rhs_next = mu[:, i] + margin
    eps = _eps(ensemble.n_paths)
    inst.hypothesis = {"fractions": fractions, "min_fraction": min(fractions), "epsilon": eps,
                       "passed": min(fractions) >= 1.0 - eps}
    return inst


def bihari_check(inst: BihariInstance, probe_nodes=None, tolerance: float = 1e-8) -> InequalityReport:
    """Conclusion ``mu_t <= Theta^{-1}(Theta(c) + K_t)``; for ``c = 0`` also ``|mu| <= 3 se``."""
    ens = inst.ensemble
    grid = ens.grid
    probe_nodes = default_probe_nodes(grid.n_steps) if probe_nodes is None else list(probe_nodes)
    calc = ThetaCalculus(inst.rho, tolerance)
    beta_rem = remaining_integral(inst.beta, grid)
    rows = []
    for i in probe_nodes:
        K = float(beta_rem[:, i].max())
        bound = calc.bihari_bound(inst.c, K)
        mu, se = inst.mu[:, i], inst.mu_se[:, i]
        # quadrature tolerance in Theta moves the bound by at most ~ rho(bound) * tolerance
        slack = tolerance * (1.0 + float(inst.rho(bound)))
        ok = bound - mu >= -3.0 * se - slack
        row = {"node": int(i), "t": float(grid.nodes[i]), "K": K, "bound": bound, "fraction": float(ok.mean()),
               "max_mu": float(mu.max()), "worst_margin": float(np.min(bound - mu)), "max_se": float(se.max())}
        if inst.c == 0.0:
            row["zero_fraction"] = float((np.abs(mu) <= 3.0 * se).mean())
        rows.append(row)
    eps = _eps(ens.n_paths)
    passed = all(r["fraction"] >= 1.0 - eps and r.get("zero_fraction", 1.0) >= 1.0 - eps for r in rows)
    return InequalityReport(rows, passed, eps, {"tolerance": tolerance})


def bihari_ode_oracle(c: float, beta: float, rho: RhoFunction, horizon: float, n_steps: int = 200_000) -> float:
    """Classical RK4 for ``m' = beta rho(m)`` from ``c`` over ``horizon``, with its own stepping."""
    hstep = horizon / n_steps
    m = float(c)
    r = lambda x: float(rho(max(x, 0.0)))
    for _ in range(n_steps):
        k1 = beta * r(m)
        k2 = beta * r(m + 0.5 * hstep * k1)
        k3 = beta * r(m + 0.5 * hstep * k2)
        k4 = beta * r(m + hstep * k3)
        m += hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return m


def bihari_eta(inst: BihariInstance):
    """``eta = int_0^T beta rho(mu) ds`` clipped to ``M = A (1 + C) ||int beta||`` and ``M``.

    ``C = e^{A ||int beta||} (c + A ||int beta||)`` bounds ``mu`` a priori.
    """
    A = inst.rho.linear_bound_A
    budget = float(np.max(remaining_integral(inst.beta, inst.ensemble.grid)[:, 0]))
    C = math.exp(A * budget) * (inst.c + A * budget)
    M = A * (1.0 + C) * budget
    eta = remaining_integral(inst.beta * inst.rho(inst.mu), inst.ensemble.grid)[:, 0]
    return np.minimum(eta, M), M


@dataclass
class BMOReport:
    value: float
    M_hat: float
    bound: float
    se: float
    passed: bool
    per_node: list

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def bmo_diagnostic(ensemble: PathEnsemble, eta, estimator: Optional[CondExpEstimator] = None,
                   stopping=None, bound: Optional[float] = None, unbounded_ratio: float = 1e6) -> BMOReport:
    """``max_tau E[(eta - m_tau)^2 | F_tau]`` with ``m_j = E[eta | F_j]``.

    The martingale's squared increments telescope, so the conditional sum of
    ``(m_{j+1} - m_j)^2`` past ``tau`` equals the single remainder above; estimating
    it directly avoids accumulating one regression error per step.

    Candidates are all grid nodes plus ``stopping`` (stop indices) if given. The
    value is compared with ``M^2`` where ``M`` is ``bound`` or the empirical max of
    ``|eta|``.
    """
    eta = np.asarray(eta, dtype=float)
    M_hat = float(np.max(np.abs(eta)))
    if not np.isfinite(M_hat) or M_hat > unbounded_ratio * max(1.0, float(np.median(np.abs(eta)))):
        raise ValueError("eta looks unbounded")
    M = M_hat if bound is None else float(bound)
    op = ConditionalOperator(estimator or CondExpEstimator(), ensemble)
    N = ensemble.grid.n_steps
    m = np.empty((ensemble.n_paths, N + 1))
    m[:, N] = eta
    for i in range(N):
        m[:, i] = op.expect(i, eta)
    per_node = []
    best, best_se = 0.0, 0.0
    est_all = np.zeros_like(m)
    se_all = np.zeros_like(m)
    for i in range(N):
        r = op.regress(i, (eta - m[:, i]) ** 2)
        est_all[:, i], se_all[:, i] = r.values, r.se
        j = int(np.argmax(r.values))
        per_node.append(float(r.values[j]))
        if r.values[j] > best:
            best, best_se = float(r.values[j]), float(r.se[j])
    if stopping is not None:
        idx = np.asarray(stopping)
        rows = np.arange(ensemble.n_paths)
        val = est_all[rows, idx]
        j = int(np.argmax(val))
        if val[j] > best:
            best, best_se = float(val[j]), float(se_all[rows, idx][j])
    passed = best <= M**2 + 3.0 * best_se + ROUNDING_FLOOR
    return BMOReport(best, M_hat, M**2, best_se, passed, per_node)


# ------------------------------------------------------------ random instances


def random_gronwall_data(seed: int, index: int, budget: float = 1.0):
    """Random bounded-budget ``(eta, beta, f)`` factories for instance ``index``.

    ``beta = b (1 + sin(w B + p)) / 2`` with ``b T <= budget``, optionally stopped
    when ``int |B|`` reaches a random level; ``eta`` and ``f`` are nonnegative
    smooth functionals of the path.
    """
    g = _rng.substream(seed, _rng.INSTANCES, index)
    b = budget * g.uniform(0.2, 1.0)
    w, p = g.uniform(0.5, 3.0), g.uniform(0.0, 2 * math.pi)
    stop_level = g.uniform(0.2, 1.0) if g.random() < 0.5 else None
    a_eta, s_eta = g.uniform(0.0, 2.0), g.uniform(0.1, 1.0)
    a_f, w_f = g.uniform(0.0, 1.0), g.uniform(0.5, 2.0)

    def beta(ens):
        B = ens.brownian[:, :, 0]
        out = b / ens.grid.horizon * 0.5 * (1.0 + np.sin(w * B + p))
        if stop_level is not None:
            out = out * hitting_time(ens, ens.abs_brownian, stop_level).before()
        return out

    def f(ens):
        return a_f * np.cos(w_f * ens.brownian[:, :, 0]) ** 2

    def eta(ens):
        return s_eta + a_eta * np.abs(ens.brownian[:, -1, 0])

    params = {"b": b, "w": w, "p": p, "stop_level": stop_level, "a_eta": a_eta, "s_eta": s_eta, "a_f": a_f, "w_f": w_f}
    return eta, beta, f, params
