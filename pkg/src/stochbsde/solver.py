"""Backward Monte Carlo solver for ``y_t = xi + int_t^T g(s, y, z) ds - int_t^T z dB``.

One backward sweep with ``z`` frozen inside ``g`` is

    m_i = E[y_{i+1} | F_i],   Z_i = E[(y_{i+1} - m_i) dB_i^T | F_i] / dt_i,
    y_i = m_i + dt_i g(t_i, y_i, z_i)   (implicit, damped fixed point).

Picard iteration repeats sweeps, feeding each sweep the previous ``Z``. Every
sweep records its fitted regression maps, so the returned ``Y`` and ``Z`` can be
recomputed on any ensemble from the state at each node alone.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import _rng
from .conditional import CondExpEstimator, ConditionalOperator, inner_ensemble
from .generators import BoundGenerator, GeneratorSpec, assert_z_free
from .paths import AdaptedProcess, PathEnsemble, StoppingTimeField, hitting_time, running_integral

DAMPING = 0.5
INNER_MAX_ITER = 1000
MIN_DAMPING = 1.0 / 64
INNER_TOL = 1e-10


class InnerSolveError(RuntimeError):
    def __init__(self, step: int, residual: float):
        super().__init__(f"implicit step did not converge at step {step} (residual {residual:.3g})")
        self.step = step


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal values ``(n_paths, k)``; with ``stop`` they sit at a stopping time.

    ``builder`` and ``stop_builder`` recompute the values and stop indices on
    another ensemble; they drive the measurability probes.
    """

    values: np.ndarray
    builder: Optional[Callable[[PathEnsemble], np.ndarray]] = field(default=None, repr=False)
    stop: Optional[StoppingTimeField] = None
    stop_builder: Optional[Callable[[PathEnsemble], np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if not np.all(np.isfinite(v)):
            raise ValueError("terminal values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_builder(cls, ensemble: PathEnsemble, builder, stop_builder=None) -> "TerminalCondition":
        stop = None if stop_builder is None else StoppingTimeField(ensemble, stop_builder(ensemble))
        return cls(builder(ensemble), builder, stop, stop_builder)

    def second_moment(self) -> float:
        return float(np.mean(np.sum(self.values**2, axis=1)))


@dataclass
class Partition:
    """Stopping-time blocks ``T_0 = 0 <= T_1 <= ... <= T_N = T`` of the ``v^2`` budget."""

    M: float
    N: int
    C: float
    c_universal: float
    boundaries: List[StoppingTimeField]
    block_budgets: np.ndarray
    overshoot: np.ndarray
    contraction_ok: bool

    def summary(self) -> dict:
        return {
            "M": self.M,
            "N": self.N,
            "C": self.C,
            "c_universal": self.c_universal,
            "contraction_ok": self.contraction_ok,
            "max_block_budget": float(self.block_budgets.max()),
            "budget_ok_fraction": self.budget_ok_fraction(),
        }

    def budget_ok_fraction(self) -> float:
        ok = self.block_budgets <= self.M / self.N + self.overshoot[:, None] + 1e-12 * max(1.0, self.M)
        return float(ok.all(axis=1).mean())


@dataclass
class PicardReport:
    history: List[dict]
    converged: bool
    tol: float
    n_iter: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)

    def z_differences(self) -> np.ndarray:
        return np.array([h["m2_dz"] for h in self.history])

    def y_differences(self) -> np.ndarray:
        return np.array([h["s2_dy"] for h in self.history])


@dataclass
class SolutionPair:
    Y: AdaptedProcess
    Z: AdaptedProcess
    diagnostics: dict = field(default_factory=dict)


@dataclass
class _Sweep:
    """Fitted maps of one backward sweep; ``frozen`` is the sweep that supplied ``z``."""

    generator: Optional[BoundGenerator]
    mean_maps: list
    z_maps: list
    frozen: Optional[int]


def _inner_solve(step, m, dt, g_of_y):
    # explicit Euler predictor, then a damped fixed point; a row whose step
    # shrinks by less than 20% gets its damping halved, which restores
    # contraction when dt times the local slope of g is large
    y = m + dt * g_of_y(m)
    damping = np.full(y.shape[:1] + (1,) * (y.ndim - 1), DAMPING)
    prev = np.full(damping.shape, np.inf)
    for _ in range(INNER_MAX_ITER):
        target = m + dt * g_of_y(y)
        new = (1.0 - damping) * y + damping * target
        err = np.abs(new - y)
        y = new
        if np.all(err <= INNER_TOL * (1.0 + np.abs(y))):
            return y
        row_err = err.reshape(err.shape[0], -1).max(axis=1).reshape(damping.shape)
        slow = row_err > 0.8 * prev
        damping = np.where(slow, np.maximum(damping * 0.5, MIN_DAMPING), damping)
        prev = row_err
    res = float(np.max(np.abs(m + dt * g_of_y(y) - y))) if y.size else 0.0
    if res <= INNER_TOL * (1.0 + float(np.max(np.abs(y)))):
        return y
    raise InnerSolveError(step, res)


def _active_rows(stop_index, i):
    if stop_index is None:
        return None
    active = stop_index > i
    return None if active.all() else np.flatnonzero(active)


def _sweep(bg: Optional[BoundGenerator], xi: np.ndarray, op: ConditionalOperator, z_frozen, stop_index):
    """One backward pass. ``bg=None`` means the zero generator."""
    ens = op.ensemble
    n, N, k, d = ens.n_paths, ens.grid.n_steps, xi.shape[1], ens.dim
    Y = np.empty((n, N + 1, k))
    Z = np.zeros((n, N + 1, k, d))
    Y[:, N] = xi
    mean_maps, z_maps = [None] * N, [None] * N
    dts = ens.grid.dt
    for i in range(N - 1, -1, -1):
        rows = _active_rows(stop_index, i)
        if rows is not None:
            Y[:, i] = xi
            if rows.size == 0:
                continue
        sel = slice(None) if rows is None else rows
        y_next = Y[sel, i + 1]
        r_mean = op.regress(i, y_next, rows, with_se=False)
        m = r_mean.values
        prod = (y_next - m)[:, :, None] * ens.increments[sel, i, None, :]
        r_z = op.regress(i, prod, rows, with_se=False)
        Z[sel, i] = r_z.values / dts[i]
        mean_maps[i], z_maps[i] = r_mean.fitted, r_z.fitted
        if bg is None:
            Y[sel, i] = m
        else:
            z_arg = Z[sel, i] if z_frozen is None else z_frozen[sel, i]
            Y[sel, i] = _inner_solve(i, m, dts[i], bg.in_y(i, z_arg, rows))
    return Y, Z, mean_maps, z_maps


def _replay(sweeps: List[_Sweep], ens: PathEnsemble, estimator: CondExpEstimator, xi_values, stop_index):
    """Recompute the last sweep's ``(Y, Z)`` on ``ens`` from stored maps only."""
    n, N, d = ens.n_paths, ens.grid.n_steps, ens.dim
    k = xi_values.shape[1]
    feats = [None] * N
    out = []
    for sw in sweeps:
        bg = None if sw.generator is None else BoundGenerator(sw.generator.spec, ens)
        Y = np.empty((n, N + 1, k))
        Z = np.zeros((n, N + 1, k, d))
        Y[:, N] = xi_values
        z_frozen = None if sw.frozen is None else out[sw.frozen][1]
        for i in range(N - 1, -1, -1):
            rows = _active_rows(stop_index, i)
            if rows is not None:
                Y[:, i] = xi_values
                if rows.size == 0:
                    continue
            sel = slice(None) if rows is None else rows
            if feats[i] is None:
                f = np.asarray(estimator.state_map(ens, i), dtype=float)
                feats[i] = f[:, None] if f.ndim == 1 else f
            f = feats[i][sel]
            m = sw.mean_maps[i](f)
            Z[sel, i] = sw.z_maps[i](f) / ens.grid.dt[i]
            if bg is None:
                Y[sel, i] = m
            else:
                z_arg = Z[sel, i] if z_frozen is None else z_frozen[sel, i]
                Y[sel, i] = _inner_solve(i, m, ens.grid.dt[i], bg.in_y(i, z_arg, rows))
        out.append((Y, Z))
    return out[-1]


def _pair(ensemble, Y, Z, sweeps, estimator, xi: TerminalCondition, diagnostics) -> SolutionPair:
    last = {}  # Y and Z come from one replay; keep the latest so asking for both costs one

    def values_on(ens, which):
        if ens.same_as(ensemble):
            return Y if which == 0 else Z
        if last.get("ens") is not ens:
            if xi.builder is None or (xi.stop is not None and xi.stop_builder is None):
                raise ValueError("terminal condition has no builder; cannot recompute on another ensemble")
            stop = None if xi.stop is None else np.asarray(xi.stop_builder(ens))
            vals = np.asarray(xi.builder(ens), dtype=float).reshape(ens.n_paths, -1)
            last.clear()
            last.update(ens=ens, pair=_replay(sweeps, ens, estimator, vals, stop))
        return last["pair"][which]

    return SolutionPair(
        AdaptedProcess(ensemble, Y, lambda ens: values_on(ens, 0)),
        AdaptedProcess(ensemble, Z, lambda ens: values_on(ens, 1)),
        diagnostics,
    )


def _check_terminal(gen: GeneratorSpec, xi: TerminalCondition, ensemble: PathEnsemble):
    if xi.values.shape != (ensemble.n_paths, gen.k):
        raise ValueError(f"terminal values must have shape ({ensemble.n_paths}, {gen.k})")
    if xi.stop is not None and not xi.stop.ensemble.same_as(ensemble):
        raise ValueError("stopping time lives on a different ensemble")


def solve_z_independent(gen: GeneratorSpec, xi: TerminalCondition, ensemble: PathEnsemble,
                        estimator: Optional[CondExpEstimator] = None, operator: Optional[ConditionalOperator] = None) -> SolutionPair:
    """Single backward sweep for a generator that ignores ``z``."""
    assert_z_free(gen, ensemble)
    _check_terminal(gen, xi, ensemble)
    estimator = estimator or CondExpEstimator()
    op = operator or ConditionalOperator(estimator, ensemble)
    bg = gen.bind(ensemble)
    stop = None if xi.stop is None else xi.stop.stop_index
    Y, Z, mm, zm = _sweep(bg, xi.values, op, None, stop)
    sweeps = [_Sweep(bg, mm, zm, None)]
    return _pair(ensemble, Y, Z, sweeps, estimator, xi, {"n_sweeps": 1})


def build_partition(gen: GeneratorSpec, ensemble: PathEnsemble, N: int, c_universal: float = 2.0,
                    bound: Optional[BoundGenerator] = None) -> Partition:
    """Blocks on which the ``v^2`` budget is at most ``M / N`` plus one step.

    ``M`` is the path-max of ``int_0^T (u + v^2) ds``; ``C = 4 c^2 A^2 exp(2 c A ||int u||)``
    and ``contraction_ok`` reports ``M / N <= 1 / (4 C)``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    bg = bound or gen.bind(ensemble)
    grid = ensemble.grid
    u, v2 = bg.u, bg.v**2
    M = float(np.max((u + v2)[:, :-1] @ grid.dt))
    u_budget = float(np.max(u[:, :-1] @ grid.dt))
    A = gen.rho.linear_bound_A
    C = 4.0 * c_universal**2 * A**2 * math.exp(2.0 * c_universal * A * u_budget)
    boundaries = [StoppingTimeField.constant(ensemble, 0)]
    for j in range(1, N):
        boundaries.append(hitting_time(ensemble, v2, j * M / N, power=1) if M > 0 else StoppingTimeField.constant(ensemble, grid.n_steps))
    boundaries.append(StoppingTimeField.constant(ensemble, grid.n_steps))
    running = running_integral(v2, grid)
    rows = np.arange(ensemble.n_paths)
    idx = np.stack([b.stop_index for b in boundaries], axis=1)
    at = running[rows[:, None], idx]
    block = np.diff(at, axis=1)
    overshoot = np.max(v2[:, :-1] * grid.dt, axis=1)
    ok = M / N <= 1.0 / (4.0 * C)
    if not ok:
        warnings.warn(f"M/N = {M / N:.3g} exceeds 1/(4C) = {1 / (4 * C):.3g}; the contraction bound is not guaranteed", stacklevel=2)
    return Partition(M, N, C, c_universal, boundaries, block, overshoot, ok)


def _diff_norms(dY, dZ, grid, partition: Optional[Partition]) -> dict:
    y2 = np.sum(dY**2, axis=2)
    z2 = np.sum(dZ.reshape(dZ.shape[0], dZ.shape[1], -1) ** 2, axis=2)
    out = {
        "sup_dy": float(np.sqrt(y2.max())),
        "s2_dy": float(np.sqrt(np.mean(y2.max(axis=1)))),
        "m2_dz": float(np.sqrt(np.mean(z2[:, :-1] @ grid.dt))),
    }
    if partition is not None:
        nodes = np.arange(grid.n_nodes)[None, :]
        blocks = []
        for lo, hi in zip(partition.boundaries[:-1], partition.boundaries[1:]):
            lo_i, hi_i = lo.stop_index[:, None], hi.stop_index[:, None]
            in_nodes = (nodes >= lo_i) & (nodes <= hi_i)
            in_steps = ((nodes >= lo_i) & (nodes < hi_i))[:, :-1]
            blocks.append({
                "s2_dy": float(np.sqrt(np.mean(np.max(np.where(in_nodes, y2, 0.0), axis=1)))),
                "m2_dz": float(np.sqrt(np.mean((z2[:, :-1] * in_steps) @ grid.dt))),
            })
        out["blocks"] = blocks
    return out


def picard_solve(gen: GeneratorSpec, xi: TerminalCondition, ensemble: PathEnsemble,
                 estimator: Optional[CondExpEstimator] = None, partition: Optional[Partition] = None,
                 tol: float = 1e-3, max_iter: int = 25, init: str = "zero",
                 operator: Optional[ConditionalOperator] = None):
    """Picard iteration ``y^n = xi + int g(s, y^n, z^{n-1}) ds - int z^n dB``.

    ``init="zero"`` starts from ``(0, 0)``; ``init="xi"`` starts from
    ``(E[xi | F_t], its integrand)``. Convergence requires both the S^2 norm of the
    ``Y`` difference and the M^2 norm of the ``Z`` difference below ``tol``.
    Non-convergence is reported, not raised.
    """
    if init not in ("zero", "xi"):
        raise ValueError("init must be 'zero' or 'xi'")
    _check_terminal(gen, xi, ensemble)
    estimator = estimator or CondExpEstimator()
    op = operator or ConditionalOperator(estimator, ensemble)
    bg = gen.bind(ensemble)
    stop = None if xi.stop is None else xi.stop.stop_index
    grid = ensemble.grid
    sweeps: List[_Sweep] = []
    if init == "zero":
        Y_prev = np.zeros((ensemble.n_paths, grid.n_nodes, gen.k))
        Z_prev = np.zeros((ensemble.n_paths, grid.n_nodes, gen.k, gen.d))
        frozen = None
    else:
        Y_prev, Z_prev, mm, zm = _sweep(None, xi.values, op, None, stop)
        sweeps.append(_Sweep(None, mm, zm, None))
        frozen = 0
    history = []
    converged = False
    for n in range(1, max_iter + 1):
        Y, Z, mm, zm = _sweep(bg, xi.values, op, Z_prev, stop)
        # the first zero-initialised sweep freezes z = 0, recorded as a zero map
        sweeps.append(_Sweep(bg, mm, zm, frozen if frozen is not None else -1))
        frozen = len(sweeps) - 1
        norms = _diff_norms(Y - Y_prev, Z - Z_prev, grid, partition)
        norms["iteration"] = n
        history.append(norms)
        Y_prev, Z_prev = Y, Z
        if norms["s2_dy"] < tol and norms["m2_dz"] < tol:
            converged = True
            break
    report = PicardReport(history, converged, tol, len(history))
    diag = {"picard": report}
    if partition is not None:
        diag["partition"] = partition.summary()
    pair = _pair(ensemble, Y_prev, Z_prev, _zero_frozen(sweeps, gen, ensemble), estimator, xi, diag)
    return pair, report


def _zero_frozen(sweeps: List[_Sweep], gen: GeneratorSpec, ensemble: PathEnsemble) -> List[_Sweep]:
    """Replace the ``-1`` marker (z frozen at 0) by an explicit all-zero sweep."""
    if not any(sw.frozen == -1 for sw in sweeps):
        return sweeps
    zero = lambda f: np.zeros((f.shape[0], gen.k))
    zero_z = lambda f: np.zeros((f.shape[0], gen.k, gen.d))
    head = _Sweep(None, [zero] * ensemble.grid.n_steps, [zero_z] * ensemble.grid.n_steps, None)
    out = [head]
    for sw in sweeps:
        out.append(_Sweep(sw.generator, sw.mean_maps, sw.z_maps, 0 if sw.frozen == -1 else sw.frozen + 1))
    return out


def measurability_probe(xi: TerminalCondition, ensemble: PathEnsemble, seed: int = 0) -> Optional[bool]:
    """Redraw increments after each path's stop node and rebuild ``xi``.

    Returns None when ``xi`` carries no builders, else whether the values (and the
    stop indices) are unchanged.
    """
    if xi.builder is None or xi.stop is None or xi.stop_builder is None:
        return None
    rng = _rng.substream(seed, _rng.PERMUTE, 0xC0)
    inc = np.array(ensemble.increments)
    fresh = rng.standard_normal(inc.shape) * np.sqrt(ensemble.grid.dt)[None, :, None]
    after = np.arange(ensemble.grid.n_steps)[None, :] >= xi.stop.stop_index[:, None]
    inc[after] = fresh[after]
    other = ensemble.with_increments(inc)
    same_stop = np.array_equal(np.asarray(xi.stop_builder(other)), xi.stop.stop_index)
    vals = np.asarray(xi.builder(other), dtype=float).reshape(xi.values.shape)
    return bool(same_stop and np.array_equal(vals, xi.values))


def solve_random_terminal(gen: GeneratorSpec, xi: TerminalCondition, ensemble: PathEnsemble,
                          estimator: Optional[CondExpEstimator] = None, **picard_kwargs):
    """Solve up to the stopping time carried by ``xi``; ``Y = xi`` and ``Z = 0`` after it."""
    if xi.stop is None:
        raise ValueError("terminal condition needs a stopping time")
    probe = measurability_probe(xi, ensemble)
    if probe is False:
        raise ValueError("terminal values are not determined by the history up to the stopping time")
    if gen.z_free:
        estimator = estimator or CondExpEstimator()
        pair = solve_z_independent(gen, xi, ensemble, estimator)
        report = None
    else:
        pair, report = picard_solve(gen, xi, ensemble, estimator, **picard_kwargs)
    after = ~xi.stop.before()
    y_ok = np.all(pair.Y.values[after] == np.repeat(xi.values[:, None, :], ensemble.grid.n_nodes, axis=1)[after])
    z_ok = np.all(pair.Z.values[after] == 0.0)
    if not (y_ok and z_ok):
        raise AssertionError("stopped solution violates Y = xi, Z = 0 after the stopping time")
    pair.diagnostics["measurability_probe"] = probe
    pair.diagnostics["stopped_fraction"] = float(np.mean(xi.stop.stop_index < ensemble.grid.n_steps))
    return pair, report


# ----------------------------------------------------------------- diagnostics


@dataclass
class ResidualReport:
    defect: np.ndarray
    per_path_max: np.ndarray
    s2_norm: float

    def as_dict(self) -> dict:
        return {"s2_norm": self.s2_norm, "max": float(self.per_path_max.max()), "mean_path_max": float(self.per_path_max.mean())}


def residual_check(gen: GeneratorSpec, pair: SolutionPair, ensemble: PathEnsemble,
                   xi: Optional[TerminalCondition] = None) -> ResidualReport:
    """Discrete defect ``|Y_i - xi - sum_{j>=i} g_j dt_j + sum_{j>=i} Z_j dB_j|``.

    Sums run over steps before the stopping time when ``xi`` carries one.
    """
    Y, Z = pair.Y.values, pair.Z.values
    n, n_nodes, k = Y.shape
    N = n_nodes - 1
    terminal = Y[:, -1] if xi is None else xi.values
    bg = gen.bind(ensemble)
    active = np.ones((n, N), dtype=bool) if xi is None or xi.stop is None else xi.stop.before()[:, :-1]
    drift = np.zeros((n, N, k))
    for i in range(N):
        drift[:, i] = bg(i, Y[:, i], Z[:, i]) * ensemble.grid.dt[i]
    mart = np.einsum("nikd,nid->nik", Z[:, :-1], ensemble.increments)
    step = np.where(active[:, :, None], drift - mart, 0.0)
    tail = np.zeros((n, n_nodes, k))
    tail[:, :-1] = np.cumsum(step[:, ::-1], axis=1)[:, ::-1]
    defect = np.linalg.norm(Y - terminal[:, None, :] - tail, axis=2)
    per_path = defect.max(axis=1)
    return ResidualReport(defect, per_path, float(np.sqrt(np.mean(per_path**2))))


def stat_epsilon(n: int) -> float:
    """Allowed failure fraction for one-sided 3-sigma tests on ``n`` paths."""
    p = 0.00135
    return p + 3.0 * math.sqrt(p * (1.0 - p) / n)


@dataclass
class AprioriReport:
    rows: List[dict]
    epsilon: float
    passed: bool

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _suffix_max(a: np.ndarray) -> np.ndarray:
    return np.maximum.accumulate(a[:, ::-1], axis=1)[:, ::-1]


def _tails(a: np.ndarray, dt: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[:, :-1] = np.cumsum((a[:, :-1] * dt)[:, ::-1], axis=1)[:, ::-1]
    return out


def _apriori_terms(cert, Y, Z, xi_vals, ens: PathEnsemble, nodes, windows) -> tuple:
    """Per-path left and right sides at each node, for the plain bound and every window.

    Returns ``(terms, budgets)``: ``terms`` maps ``(label, node)`` to
    ``(L, R1, R2)``; ``budgets`` holds per-path remaining weight integrals used in
    the constants. Window ``R1`` still lacks the ess-sup of ``int mu``, which the
    caller adds once the maximum over all simulated paths is known.
    """
    dt = ens.grid.dt
    mu = np.asarray(cert.mu(ens), dtype=float)
    lam = np.asarray(cert.lam(ens), dtype=float)
    f = np.asarray(cert.f(ens), dtype=float)
    y2 = np.sum(Y**2, axis=2)
    z2 = np.sum(Z.reshape(Z.shape[0], Z.shape[1], -1) ** 2, axis=2)
    mu_t, lam2_t = _tails(mu, dt), _tails(lam**2, dt)
    z2_t, f_t, kap_t = _tails(z2, dt), _tails(f, dt), _tails(mu * cert.kappa(y2), dt)
    suffix_y2 = _suffix_max(y2)
    terms = {}
    for i in nodes:
        base = np.sum(xi_vals**2, axis=1) + f_t[:, i] ** 2
        terms[("node", i)] = (suffix_y2[:, i] + z2_t[:, i], base + mu_t[:, i], base + kap_t[:, i])
    grid_nodes = np.arange(ens.grid.n_nodes)[None, :]
    path_idx = np.arange(ens.n_paths)
    for w, (sigma, tau) in enumerate(windows):
        sigma = np.asarray(sigma)[:, None]
        tau = np.asarray(tau)[:, None]
        if np.any(sigma > tau):
            raise ValueError("window needs sigma <= tau")
        y_loc = np.where(grid_nodes >= sigma, y2[path_idx[:, None], np.minimum(grid_nodes, tau)], 0.0)
        in_steps = (grid_nodes >= sigma) & (grid_nodes < tau)
        zt = _tails(np.where(in_steps, z2, 0.0), dt)
        ft = _tails(np.where(in_steps, f, 0.0), dt)
        kt = _tails(mu * cert.kappa(y_loc), dt)
        y_tau = y2[path_idx, tau[:, 0]]
        sy = _suffix_max(y_loc)
        for i in nodes:
            terms[(f"window{w}", i)] = (sy[:, i] + zt[:, i], y_tau + ft[:, i] ** 2, y_tau + kt[:, i] + ft[:, i] ** 2)
    budgets = {"mu_lam": mu_t + lam2_t, "lam2": lam2_t, "mu": mu_t}
    return terms, budgets


def apriori_check(gen: GeneratorSpec, pair: SolutionPair, ensemble: PathEnsemble,
                  estimator: Optional[CondExpEstimator] = None, c_universal: float = 2.0,
                  probe_nodes=None, windows=None, xi: Optional[TerminalCondition] = None,
                  operator: Optional[ConditionalOperator] = None, conditional: str = "nested_mc",
                  n_outer: int = 100, inner_paths: int = 256, seed: int = 0) -> AprioriReport:
    """Conditional a priori bounds at probe nodes, plus stopping-time windows.

    At each probe node ``t`` both margins ``E[C R - L | F_t]`` are estimated, where
    ``L = sup_{[t,T]} |y|^2 + int_t^T |z|^2`` and ``R`` is the matching right-hand
    side. A path passes when its margin is at least -3 standard errors.

    ``conditional="nested_mc"`` replays the solution on fresh futures of
    ``n_outer`` paths and is unbiased; ``"regression"`` regresses the margin on
    the whole ensemble, which is cheaper but inherits basis bias in the tails.
    The constants use the largest weight budgets over every simulated path.

    ``windows`` is a callable ``ensemble -> [(sigma, tau), ...]`` of stop-index
    arrays (a fixed list is accepted for the regression estimator). Inside a
    window the localised processes ``1{sigma <= s} y_{s ^ tau}`` and
    ``1{sigma <= s <= tau} z_s`` are used with full-horizon constants.
    """
    cert = gen.certificate
    if cert is None:
        raise ValueError("generator has no growth certificate")
    if c_universal < 1:
        raise ValueError("c_universal must be at least 1")
    if conditional not in ("nested_mc", "regression"):
        raise ValueError("conditional must be 'nested_mc' or 'regression'")
    if conditional == "nested_mc" and windows is not None and not callable(windows):
        raise ValueError("the nested estimator needs windows as a callable of the ensemble")
    N = ensemble.grid.n_steps
    probe_nodes = list(probe_nodes) if probe_nodes is not None else [int(round(q * N)) for q in (0.0, 0.25, 0.5, 0.75, 0.9)]
    A = cert.kappa.linear_bound_A
    c = c_universal

    def window_list(ens):
        if windows is None:
            return []
        return windows(ens) if callable(windows) else windows

    def xi_on(ens, Y):
        if xi is None:
            return Y[:, -1]
        return xi.values if ens is ensemble else np.asarray(xi.builder(ens), dtype=float).reshape(ens.n_paths, -1)

    outer_windows = window_list(ensemble)
    labels = ["node"] + [f"window{w}" for w in range(len(outer_windows))]
    terms, budgets = _apriori_terms(cert, pair.Y.values, pair.Z.values, xi_on(ensemble, pair.Y.values),
                                    ensemble, probe_nodes, outer_windows)
    rows = []

    def record(label, i, C1, C2, mu_sup, estimate):
        for name, C, which in (("bound_1", C1, 1), ("bound_2", C2, 2)):
            margin, se = estimate(label, which, C, mu_sup)
            ok = margin >= -3.0 * se
            with np.errstate(divide="ignore", invalid="ignore"):
                in_se = np.where(se > 0, margin / se, np.where(margin >= 0, np.inf, -np.inf))
            rows.append({
                "probe": label, "node": int(i), "t": float(ensemble.grid.nodes[i]), "bound": name, "C": float(C),
                "fraction": float(ok.mean()), "worst_margin": float(margin.min()),
                "worst_margin_in_se": float(in_se.min()), "max_se": float(se.max()), "n_outer": int(margin.size),
            })

    def constants(i, budget_sets):
        ml = max(float(b["mu_lam"][:, i].max()) for b in budget_sets)
        l2 = max(float(b["lam2"][:, i].max()) for b in budget_sets)
        ml0 = max(float(b["mu_lam"][:, 0].max()) for b in budget_sets)
        l20 = max(float(b["lam2"][:, 0].max()) for b in budget_sets)
        mu_sup = max(float(b["mu"][:, 0].max()) for b in budget_sets)
        node = (4 * c**2 * A**2 * math.exp(2 * c * A * ml), 4 * c**2 * math.exp(2 * c * l2))
        full = (4 * c**2 * A**2 * math.exp(2 * c * A * ml0), 4 * c**2 * math.exp(2 * c * l20))
        return node, full, mu_sup

    def combine(t, label, which, C, mu_sup):
        L, R1, R2 = t
        if which == 2:
            return C * R2 - L
        return C * (R1 + (mu_sup if label.startswith("window") else 0.0)) - L

    if conditional == "regression":
        op = operator or ConditionalOperator(estimator or CondExpEstimator(), ensemble)
        n_used = ensemble.n_paths
        for i in probe_nodes:
            node_c, full_c, mu_sup = constants(i, [budgets])
            for label in labels:
                def estimate(label, which, C, mu_sup, i=i):
                    res = op.regress(i, combine(terms[(label, i)], label, which, C, mu_sup))
                    return res.values.ravel(), res.se.ravel()
                C1, C2 = node_c if label == "node" else full_c
                record(label, i, C1, C2, mu_sup, estimate)
    else:
        if pair.Y.builder is None or pair.Z.builder is None:
            raise ValueError("solution has no builder; cannot replay it on inner paths")
        if xi is not None and xi.builder is None:
            raise ValueError("terminal condition has no builder; cannot rebuild it on inner paths")
        outer = np.arange(min(n_outer, ensemble.n_paths))
        n_used = outer.size
        for i in probe_nodes:
            inner = inner_ensemble(ensemble, i, outer, inner_paths, seed)
            Yi, Zi = pair.Y.builder(inner), pair.Z.builder(inner)
            t_in, b_in = _apriori_terms(cert, Yi, Zi, xi_on(inner, Yi), inner, [i], window_list(inner))
            node_c, full_c, mu_sup = constants(i, [budgets, b_in])
            for label in labels:
                def estimate(label, which, C, mu_sup, i=i, t_in=t_in):
                    D = combine(t_in[(label, i)], label, which, C, mu_sup).reshape(outer.size, inner_paths)
                    return D.mean(axis=1), D.std(axis=1, ddof=1) / math.sqrt(inner_paths)
                C1, C2 = node_c if label == "node" else full_c
                record(label, i, C1, C2, mu_sup, estimate)
    eps = stat_epsilon(n_used)
    passed = all(r["fraction"] >= 1.0 - eps for r in rows)
    return AprioriReport(rows, eps, passed)


def default_windows(ensemble: PathEnsemble) -> list:
    """Two stopping-time windows: ``[T/4, exit of |B| from 1]`` and ``[tau_1, 3T/4]``.

    ``tau_1`` is the first node where ``int |B| ds`` reaches 0.1; upper ends are
    raised to the lower end where needed.
    """
    N = ensemble.grid.n_steps
    exit_idx = hitting_time_exit(ensemble, 1.0)
    s1 = np.full(ensemble.n_paths, N // 4)
    w1 = (s1, np.maximum(s1, exit_idx))
    s2 = hitting_time(ensemble, ensemble.abs_brownian, 0.1).stop_index
    w2 = (s2, np.maximum(s2, np.full(ensemble.n_paths, (3 * N) // 4)))
    return [w1, w2]


def hitting_time_exit(ensemble: PathEnsemble, level: float) -> np.ndarray:
    """First node where ``|B| >= level``, else the last node."""
    reached = ensemble.abs_brownian >= level
    return np.where(reached.any(axis=1), reached.argmax(axis=1), ensemble.grid.n_steps)
