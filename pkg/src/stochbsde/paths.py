"""Brownian ensembles, adapted processes, stopping times and path norms.

All time integrals are left-endpoint Riemann sums on the grid, so a running
integral at node ``i`` only uses values at nodes ``< i``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from . import _rng

# guards `>= level` comparisons against cumulative-sum rounding
LEVEL_GUARD = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    horizon: float
    n_steps: int
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if self.n_steps < 1 or nodes.shape != (self.n_steps + 1,):
            raise ValueError("grid needs n_steps >= 1 and n_steps + 1 nodes")
        if nodes[0] != 0.0 or nodes[-1] != self.horizon:
            raise ValueError("grid must start at 0 and end exactly at the horizon")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        object.__setattr__(self, "nodes", _frozen(nodes))

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        nodes = np.linspace(0.0, horizon, n_steps + 1)
        nodes[-1] = horizon
        return cls(float(horizon), int(n_steps), nodes)

    @classmethod
    def from_nodes(cls, nodes) -> "TimeGrid":
        nodes = np.asarray(nodes, dtype=float)
        return cls(float(nodes[-1]), len(nodes) - 1, nodes)

    @cached_property
    def dt(self) -> np.ndarray:
        return _frozen(np.diff(self.nodes))

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash((self.n_steps, self.horizon))


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """A bundle of discretised ``dim``-dimensional Brownian paths.

    ``increments[p, i]`` is ``B(t_{i+1}) - B(t_i)`` on path ``p``.
    """

    grid: TimeGrid
    n_paths: int
    dim: int
    increments: np.ndarray
    seed: int

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.shape != (self.n_paths, self.grid.n_steps, self.dim):
            raise ValueError(f"increments shape {inc.shape} does not match ensemble")
        object.__setattr__(self, "increments", _frozen(inc))

    @cached_property
    def brownian(self) -> np.ndarray:
        """Path values ``B(t_i)``, shape ``(n_paths, n_nodes, dim)``."""
        out = np.zeros((self.n_paths, self.grid.n_nodes, self.dim))
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return _frozen(out)

    @cached_property
    def abs_brownian(self) -> np.ndarray:
        return _frozen(np.linalg.norm(self.brownian, axis=2))

    @cached_property
    def running_abs(self) -> np.ndarray:
        """Left-endpoint running integral of ``|B|``."""
        return _frozen(running_integral(self.abs_brownian, self.grid))

    @cached_property
    def running_sq(self) -> np.ndarray:
        """Left-endpoint running integral of ``|B|^2``."""
        return _frozen(running_integral(self.abs_brownian**2, self.grid))

    def with_increments(self, increments: np.ndarray) -> "PathEnsemble":
        increments = np.asarray(increments, dtype=float)
        return PathEnsemble(self.grid, increments.shape[0], self.dim, increments, self.seed)

    def coarsen(self, factor: int) -> "PathEnsemble":
        """Same paths on a grid keeping every ``factor``-th node (increments summed)."""
        if factor < 1 or self.grid.n_steps % factor:
            raise ValueError("factor must divide n_steps")
        inc = self.increments.reshape(self.n_paths, self.grid.n_steps // factor, factor, self.dim).sum(axis=2)
        grid = TimeGrid.from_nodes(self.grid.nodes[::factor])
        return PathEnsemble(grid, self.n_paths, self.dim, inc, self.seed)

    def same_as(self, other: "PathEnsemble") -> bool:
        return self is other or (
            self.grid == other.grid
            and self.n_paths == other.n_paths
            and self.dim == other.dim
            and self.seed == other.seed
            and np.array_equal(self.increments, other.increments)
        )


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Per-path, per-node values of a process on an ensemble.

    ``values`` has shape ``(n_paths, n_nodes, *shape)``. ``builder`` recomputes the
    values from any ensemble on the same grid; it is what the adaptedness probe
    re-runs on path bundles with shuffled futures.
    """

    ensemble: PathEnsemble
    values: np.ndarray
    builder: Optional[Callable[[PathEnsemble], np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[:2] != (self.ensemble.n_paths, self.ensemble.grid.n_nodes):
            raise ValueError(f"values shape {v.shape} does not match the ensemble")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def from_builder(cls, ensemble: PathEnsemble, builder) -> "AdaptedProcess":
        return cls(ensemble, builder(ensemble), builder)

    @property
    def shape(self) -> tuple:
        return self.values.shape[2:]

    @property
    def dim_out(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def pointwise_norm(self) -> np.ndarray:
        """Euclidean (Frobenius for matrices) norm per path and node."""
        v = self.values.reshape(self.values.shape[0], self.values.shape[1], -1)
        return np.linalg.norm(v, axis=2)


@dataclass(frozen=True, eq=False)
class StoppingTimeField:
    ensemble: PathEnsemble
    stop_index: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.stop_index)
        if idx.shape != (self.ensemble.n_paths,):
            raise ValueError("one stop index per path required")
        if idx.size and (idx.min() < 0 or idx.max() > self.ensemble.grid.n_steps):
            raise ValueError("stop indices must lie in {0, ..., n_steps}")
        object.__setattr__(self, "stop_index", _frozen(idx.astype(np.int64)))

    @classmethod
    def constant(cls, ensemble: PathEnsemble, index: int) -> "StoppingTimeField":
        return cls(ensemble, np.full(ensemble.n_paths, int(index)))

    @property
    def times(self) -> np.ndarray:
        return self.ensemble.grid.nodes[self.stop_index]

    def before(self) -> np.ndarray:
        """Boolean ``(n_paths, n_nodes)`` mask of nodes strictly before the stop node."""
        n_nodes = self.ensemble.grid.n_nodes
        return np.arange(n_nodes)[None, :] < self.stop_index[:, None]


@dataclass(frozen=True)
class NormReport:
    s2_norm: float
    m2_norm: float
    h2_norm: float
    esssup_budget_l1: float
    esssup_budget_l2: float
    bmo_norm: float
    n_paths: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def simulate_brownian(grid: TimeGrid, n_paths: int, dim: int, seed: int, threads: int = 1) -> PathEnsemble:
    """Seeded Brownian increments.

    Paths are drawn in fixed blocks, each from its own Philox substream, so the
    result depends only on ``(seed, grid, n_paths, dim)``.
    """
    if n_paths < 1 or dim < 1:
        raise ValueError("n_paths and dim must be at least 1")
    scale = np.sqrt(grid.dt)[None, :, None]
    increments = np.empty((n_paths, grid.n_steps, dim))
    starts = range(0, n_paths, _rng.BLOCK_SIZE)

    def fill(start):
        stop = min(start + _rng.BLOCK_SIZE, n_paths)
        gen = _rng.substream(seed, _rng.PATHS, start // _rng.BLOCK_SIZE)
        increments[start:stop] = gen.standard_normal((stop - start, grid.n_steps, dim)) * scale

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    return PathEnsemble(grid, int(n_paths), int(dim), increments, int(seed))


def running_integral(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Left-endpoint running integral along axis 1; node 0 is 0."""
    values = np.asarray(values, dtype=float)
    dt = grid.dt.reshape((1, -1) + (1,) * (values.ndim - 2))
    out = np.zeros(values.shape)
    np.cumsum(values[:, :-1] * dt, axis=1, out=out[:, 1:])
    return out


def remaining_integral(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``sum_{j >= i} values_j dt_j`` for every node ``i``; zero at the last node."""
    values = np.asarray(values, dtype=float)
    dt = grid.dt.reshape((1, -1) + (1,) * (values.ndim - 2))
    out = np.zeros(values.shape)
    out[:, :-1] = np.cumsum((values[:, :-1] * dt)[:, ::-1], axis=1)[:, ::-1]
    return out


def hitting_time(ensemble: PathEnsemble, integrand, level: float, power: int = 1) -> StoppingTimeField:
    """First grid node where the running integral of ``integrand**power`` reaches ``level``.

    Paths that never reach it stop at the last node.
    """
    if power not in (1, 2):
        raise ValueError("power must be 1 or 2")
    values = integrand.values if isinstance(integrand, AdaptedProcess) else np.asarray(integrand, float)
    if values.ndim != 2:
        raise ValueError("hitting_time needs a scalar process")
    if np.any(values < 0):
        raise ValueError("integrand must be nonnegative")
    running = running_integral(values**power, ensemble.grid)
    reached = running >= level - LEVEL_GUARD * max(1.0, abs(level))
    n_steps = ensemble.grid.n_steps
    stop = np.where(reached.any(axis=1), reached.argmax(axis=1), n_steps)
    return StoppingTimeField(ensemble, stop)


def budget_l1(process: AdaptedProcess) -> np.ndarray:
    """Per-path ``int_0^T |u| ds``."""
    return _total(process.pointwise_norm(), process.ensemble.grid)


def budget_l2(process: AdaptedProcess) -> np.ndarray:
    """Per-path ``int_0^T |v|^2 ds``."""
    return _total(process.pointwise_norm() ** 2, process.ensemble.grid)


def _total(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    return values[:, :-1] @ grid.dt


def norms(Y: AdaptedProcess, Z: AdaptedProcess, estimator=None, stopping: Optional[StoppingTimeField] = None) -> NormReport:
    """Empirical S^2, M^2, H^2 norms, path-max budgets and a BMO estimate.

    The BMO entry is the largest regression estimate of
    ``E[int_tau^T |Z|^2 ds | F_tau]`` over all grid nodes (and ``stopping`` if given).
    Path maxima under-estimate essential suprema.
    """
    if not Y.ensemble.same_as(Z.ensemble):
        raise ValueError("Y and Z live on different ensembles")
    grid = Y.ensemble.grid
    y_abs = Y.pointwise_norm()
    z_abs = Z.pointwise_norm()
    l1 = _total(z_abs, grid)
    l2 = _total(z_abs**2, grid)
    s2 = float(np.sqrt(np.mean(np.max(y_abs**2, axis=1))))
    m2 = float(np.sqrt(np.mean(l2)))
    h2 = float(np.sqrt(np.mean(l1**2)))
    bmo = _bmo(Z.ensemble, z_abs, estimator, stopping)
    return NormReport(s2, m2, h2, float(l1.max()), float(l2.max()), bmo, Y.ensemble.n_paths)


def _bmo(ensemble, z_abs, estimator, stopping) -> float:
    from .conditional import CondExpEstimator, ConditionalOperator

    estimator = estimator or CondExpEstimator()
    remaining = remaining_integral(z_abs**2, ensemble.grid)
    if not np.any(remaining):
        return 0.0
    op = ConditionalOperator(estimator, ensemble)
    est = np.empty_like(remaining)
    for i in range(ensemble.grid.n_nodes):
        est[:, i] = op.expect(i, remaining[:, i])
    best = float(est.max())
    if stopping is not None:
        best = max(best, float(est[np.arange(ensemble.n_paths), stopping.stop_index].max()))
    return max(best, 0.0)


def permute_future_test(process: AdaptedProcess, node_index: int, seed: int) -> bool:
    """Shuffle every increment with index ``>= node_index`` across paths and rebuild.

    Returns True iff the values at nodes ``<= node_index`` are unchanged.
    """
    if process.builder is None:
        raise ValueError("process has no builder to re-run")
    ens = process.ensemble
    if not 0 <= node_index <= ens.grid.n_steps:
        raise ValueError("node_index out of range")
    gen = _rng.substream(seed, _rng.PERMUTE, node_index)
    inc = np.array(ens.increments)
    for j in range(node_index, ens.grid.n_steps):
        inc[:, j] = inc[gen.permutation(ens.n_paths), j]
    rebuilt = np.asarray(process.builder(ens.with_increments(inc)))
    return bool(np.array_equal(rebuilt[:, : node_index + 1], process.values[:, : node_index + 1]))
