"""Conditional expectations ``E[X | F_{t_i}]`` on a path ensemble.

Two estimators share one interface:

* ``regression``: least-squares projection on polynomials of state features at
  the conditioning node (default features: the Brownian coordinates and the
  running integrals of ``|B|`` and ``|B|^2``).
* ``nested_mc``: per outer path, keep the increments before the conditioning node,
  redraw everything after it and average. Small-scale oracle only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional, Union

import numpy as np
from scipy import linalg

from . import _rng
from .paths import PathEnsemble

StateMap = Callable[[PathEnsemble, int], np.ndarray]
ValueFn = Callable[[PathEnsemble], np.ndarray]

NESTED_MAX_OUTER = 1000
# outer paths simulated together in one inner batch
NESTED_CHUNK = 32


def default_state_map(ensemble: PathEnsemble, node: int) -> np.ndarray:
    """Brownian coordinates plus the running integrals of ``|B|`` and ``|B|^2``."""
    return np.column_stack(
        [ensemble.brownian[:, node, :], ensemble.running_abs[:, node], ensemble.running_sq[:, node]]
    )


def brownian_state_map(ensemble: PathEnsemble, node: int) -> np.ndarray:
    return np.array(ensemble.brownian[:, node, :])


STATE_MAPS = {"default": default_state_map, "brownian": brownian_state_map}


@dataclass(frozen=True)
class CondExpEstimator:
    kind: str = "regression"
    degree: int = 3
    ridge: float = 1e-8
    inner_paths: int = 512
    max_outer: int = NESTED_MAX_OUTER
    state_map: StateMap = field(default=default_state_map, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("regression", "nested_mc"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.degree < 0 or self.ridge < 0 or self.inner_paths < 2:
            raise ValueError("degree, ridge must be >= 0 and inner_paths >= 2")


@dataclass(frozen=True)
class CondExpResult:
    """Estimate per path with its standard error.

    ``fitted`` maps state features at the conditioning node to estimates (regression
    only); ``flagged`` records a ridge fallback after a failed factorisation.
    """

    values: np.ndarray
    se: np.ndarray
    flagged: bool = False
    fitted: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)


def _monomial_index(n_features: int, degree: int) -> list:
    out = []
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(n_features), deg))
    return out


class _Projector:
    """Least-squares projector onto centred polynomial features.

    The intercept is fitted as the sample mean and is never penalised, so constant
    inputs are reproduced exactly. Only the standardisation and the Cholesky factor
    are stored here.
    """

    def __init__(self, features: np.ndarray, degree: int, ridge: float):
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        self.n = features.shape[0]
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.keep = keep
        self.f_mean = mean[keep]
        self.f_std = std[keep]
        self.terms = _monomial_index(int(keep.sum()), degree)
        self.ridge = ridge
        self.flagged = False
        raw = self._raw(features)
        self.col_mean = raw.mean(axis=0)
        phi = raw - self.col_mean
        self.col_scale = np.sqrt((phi**2).mean(axis=0))
        self.col_scale[self.col_scale == 0] = 1.0
        phi /= self.col_scale
        self.p = phi.shape[1]
        self.chol = None
        self.pinv_basis = None
        if self.p == 0:
            return
        gram = phi.T @ phi / self.n
        if ridge == 0.0:
            self.pinv_basis = np.linalg.pinv(gram, hermitian=True)
            return
        lam = ridge
        while True:
            try:
                self.chol = linalg.cho_factor(gram + lam * np.eye(self.p), lower=True)
                break
            except linalg.LinAlgError:
                lam *= 100.0
                self.flagged = True
                if lam > 1.0:
                    raise

    def _raw(self, features: np.ndarray) -> np.ndarray:
        z = (features[:, self.keep] - self.f_mean) / self.f_std
        out = np.empty((features.shape[0], len(self.terms)), order="F")
        column = {}
        for j, t in enumerate(self.terms):
            if len(t) == 1:
                out[:, j] = z[:, t[0]]
            else:
                np.multiply(out[:, column[t[:-1]]], z[:, t[-1]], out=out[:, j])
            column[t] = j
        return out

    def design(self, features: np.ndarray) -> np.ndarray:
        if features.ndim == 1:
            features = features[:, None]
        phi = self._raw(features)
        phi -= self.col_mean
        phi /= self.col_scale
        return phi

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.chol is not None:
            return linalg.cho_solve(self.chol, rhs)
        return self.pinv_basis @ rhs

    def fit(self, phi: Optional[np.ndarray], values: np.ndarray):
        """Return ``(intercept, coefficients)`` for 2-d ``values``."""
        intercept = values.mean(axis=0)
        # constant columns are reproduced bit-for-bit, and get zero coefficients
        const = np.ptp(values, axis=0) == 0
        intercept[const] = values[0, const]
        if self.p == 0:
            return intercept, None
        return intercept, self._solve(phi.T @ (values - intercept) / self.n)

    def leverage(self, phi: np.ndarray) -> np.ndarray:
        if self.p == 0:
            return np.full(self.n, 1.0 / self.n)
        if self.chol is not None:
            w = linalg.solve_triangular(self.chol[0], phi.T, lower=True)
            return 1.0 / self.n + (w**2).sum(axis=0) / self.n
        return 1.0 / self.n + np.einsum("ij,jk,ik->i", phi, self.pinv_basis, phi) / self.n


class ConditionalOperator:
    """``E[. | F_{t_i}]`` on one ensemble.

    Projectors are cached per node; design matrices over all paths are cached too
    while they fit in ``design_cache_bytes``.
    """

    def __init__(self, estimator: CondExpEstimator, ensemble: PathEnsemble, design_cache_bytes: int = 400 * 2**20):
        self.estimator = estimator
        self.ensemble = ensemble
        self._cache: dict = {}
        self._designs: dict = {}
        self._design_budget = design_cache_bytes

    def features(self, node: int, rows=None) -> np.ndarray:
        f = np.asarray(self.estimator.state_map(self.ensemble, node), dtype=float)
        if f.ndim == 1:
            f = f[:, None]
        return f if rows is None else f[rows]

    def _projector(self, node: int, rows) -> _Projector:
        key = (node, None if rows is None else np.asarray(rows).tobytes())
        proj = self._cache.get(key)
        if proj is None:
            est = self.estimator
            proj = _Projector(self.features(node, rows), est.degree, est.ridge)
            if rows is not None:
                self._cache = {k: v for k, v in self._cache.items() if k[1] is None}
            self._cache[key] = proj
        return proj

    def _design(self, node: int, rows, proj: _Projector) -> Optional[np.ndarray]:
        if proj.p == 0:
            return None
        if rows is not None:
            return proj.design(self.features(node, rows))
        phi = self._designs.get(node)
        if phi is None:
            phi = proj.design(self.features(node))
            if phi.nbytes <= self._design_budget:
                self._design_budget -= phi.nbytes
                self._designs[node] = phi
        return phi

    def regress(self, node: int, values: np.ndarray, rows=None, with_se: bool = True) -> CondExpResult:
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
        flat = values.reshape(values.shape[0], -1)
        proj = self._projector(node, rows)
        if flat.shape[0] != proj.n:
            raise ValueError("values do not match the conditioning rows")
        phi = self._design(node, rows, proj)
        intercept, coef = proj.fit(phi, flat)
        est = np.broadcast_to(intercept, flat.shape).copy() if coef is None else intercept + phi @ coef
        if with_se:
            resid = flat - est
            dof = max(proj.n - proj.p - 1, 1)
            sigma = np.sqrt((resid**2).sum(axis=0) / dof)
            se = np.sqrt(proj.leverage(phi))[:, None] * sigma
        else:
            se = np.full(flat.shape, np.nan)

        def fitted(new_features, _i=intercept, _c=coef, _p=proj, _shape=values.shape[1:]):
            new_features = np.asarray(new_features, dtype=float)
            out = np.broadcast_to(_i, (new_features.shape[0],) + _i.shape).copy()
            if _c is not None:
                out = out + _p.design(new_features) @ _c
            return out.reshape((new_features.shape[0],) + _shape)

        return CondExpResult(est.reshape(values.shape), se.reshape(values.shape), proj.flagged, fitted)

    def expect(self, node: int, values: np.ndarray, rows=None) -> np.ndarray:
        """Regression estimate of ``E[values | F_node]`` (values as path arrays)."""
        return self.regress(node, values, rows, with_se=False).values

    def expect_z(self, step: int, y_next: np.ndarray, rows=None) -> np.ndarray:
        """``E[(y_{i+1} - E[y_{i+1}|F_i]) (B_{i+1} - B_i)^T | F_i] / dt_i``.

        Centering ``y_{i+1}`` first leaves the conditional mean unchanged and
        removes the variance carried by its level. Shape ``(rows, k, d)``.
        """
        return self.expect_pair(step, y_next, rows)[1]

    def expect_pair(self, step: int, y_next: np.ndarray, rows=None):
        """``(E[y_{i+1} | F_i], Z_i)`` sharing one design matrix."""
        ens = self.ensemble
        if not 0 <= step < ens.grid.n_steps:
            raise ValueError("step must lie in [0, n_steps)")
        y = np.asarray(y_next, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        inc = ens.increments[:, step, :] if rows is None else ens.increments[rows, step, :]
        mean = self.expect(step, y, rows)
        prod = (y - mean)[:, :, None] * inc[:, None, :]
        return mean, self.expect(step, prod, rows) / ens.grid.dt[step]


def cond_expect(
    estimator: CondExpEstimator,
    ensemble: PathEnsemble,
    values: Union[np.ndarray, ValueFn],
    condition_node: int,
    rows=None,
    seed: Optional[int] = None,
) -> CondExpResult:
    """``E[X | F_{condition_node}]`` per path.

    ``values`` is either the per-path array of ``X`` or a function computing ``X``
    from an ensemble; the nested estimator needs the latter.
    """
    if not 0 <= condition_node <= ensemble.grid.n_steps:
        raise ValueError("condition node out of range")
    if estimator.kind == "regression":
        arr = values(ensemble) if callable(values) else values
        return ConditionalOperator(estimator, ensemble).regress(condition_node, arr, rows)
    if not callable(values):
        raise TypeError("the nested estimator needs a function of the ensemble")
    return nested_expect(ensemble, condition_node, values, estimator.inner_paths, rows, seed, estimator.max_outer)


def cond_expect_z(estimator: CondExpEstimator, ensemble: PathEnsemble, y_next: np.ndarray, step: int) -> np.ndarray:
    return ConditionalOperator(estimator, ensemble).expect_z(step, y_next)


def inner_ensemble(ensemble: PathEnsemble, node: int, outer_rows, inner_paths: int, seed: int) -> PathEnsemble:
    """Copies of each outer path's history up to ``node`` with fresh futures.

    Outer path ``p`` owns rows ``[j * inner_paths, (j + 1) * inner_paths)`` where
    ``j`` is its position in ``outer_rows``. Futures come from a substream keyed by
    ``(node, p)``, so the draw for a given outer path never depends on batching.
    """
    grid = ensemble.grid
    outer_rows = np.asarray(outer_rows)
    inc = np.repeat(ensemble.increments[outer_rows], inner_paths, axis=0)
    n_future = grid.n_steps - node
    if n_future:
        scale = np.sqrt(grid.dt[node:])[None, :, None]
        for j, p in enumerate(outer_rows):
            gen = _rng.substream(seed, _rng.NESTED, node, int(p))
            block = slice(j * inner_paths, (j + 1) * inner_paths)
            inc[block, node:] = gen.standard_normal((inner_paths, n_future, ensemble.dim)) * scale
    return PathEnsemble(grid, inc.shape[0], ensemble.dim, inc, ensemble.seed)


def nested_expect(
    ensemble: PathEnsemble,
    node: int,
    value_fn: ValueFn,
    inner_paths: int = 512,
    rows=None,
    seed: Optional[int] = None,
    max_outer: int = NESTED_MAX_OUTER,
) -> CondExpResult:
    """Nested Monte Carlo estimate of ``E[value_fn | F_node]`` on ``rows``."""
    rows = np.arange(ensemble.n_paths) if rows is None else np.asarray(rows)
    if rows.size > max_outer:
        raise ValueError(f"nested estimator limited to {max_outer} outer paths, got {rows.size}")
    seed = ensemble.seed if seed is None else seed
    means, ses = [], []
    for start in range(0, rows.size, NESTED_CHUNK):
        chunk = rows[start : start + NESTED_CHUNK]
        inner = inner_ensemble(ensemble, node, chunk, inner_paths, seed)
        vals = np.asarray(value_fn(inner), dtype=float)
        vals = vals.reshape((chunk.size, inner_paths) + vals.shape[1:])
        means.append(vals.mean(axis=1))
        ses.append(vals.std(axis=1, ddof=1) / np.sqrt(inner_paths))
    return CondExpResult(np.concatenate(means), np.concatenate(ses))
