"""Generators ``g(omega, t, y, z)`` with structural certificates and sampling checkers.

A generator sees the path only through a :class:`NodeState`: the time, the
current Brownian value and precomputed adapted arrays (``u``, ``v`` and any named
auxiliaries) at the node. Future increments are never visible.

Shapes: ``y`` is ``(n, k)``, ``z`` is ``(n, k, d)`` and ``g`` returns ``(n, k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from . import _rng
from .paths import AdaptedProcess, PathEnsemble, budget_l1, budget_l2, hitting_time
from .sfuncs import RhoFunction, h_monotonicity_constant, identity_rho, make_h

Factory = Callable[[PathEnsemble], np.ndarray]

CHECK_TOL = 1e-12


@dataclass(frozen=True)
class NodeState:
    t: np.ndarray
    B: np.ndarray
    u: np.ndarray
    v: np.ndarray
    aux: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class ACertificate:
    """Data for the one-sided growth bound ``<y, g> <= mu kappa(|y|^2) + lam |y||z| + f |y|``."""

    kappa: RhoFunction
    mu: Factory
    lam: Factory
    f: Factory


@dataclass(frozen=True)
class GeneratorSpec:
    """A generator plus its certified weights.

    ``u`` and ``v`` build the monotonicity and Lipschitz weights on an ensemble as
    ``(n_paths, n_nodes)`` arrays; ``rho`` is the monotonicity modulus.
    """

    name: str
    k: int
    d: int
    func: Callable[[NodeState, np.ndarray, np.ndarray], np.ndarray] = field(repr=False)
    u: Factory = field(repr=False)
    v: Factory = field(repr=False)
    rho: RhoFunction
    aux: Dict[str, Factory] = field(default_factory=dict, repr=False)
    z_free: bool = False
    certificate: Optional[ACertificate] = field(default=None, repr=False)
    params: dict = field(default_factory=dict)
    # optional fast path: (state, z) -> (y -> g), hoisting work that does not depend on y
    prepare: Optional[Callable] = field(default=None, repr=False, compare=False)

    def bind(self, ensemble: PathEnsemble) -> "BoundGenerator":
        if ensemble.dim != self.d:
            raise ValueError(f"generator expects d={self.d}, ensemble has d={ensemble.dim}")
        return BoundGenerator(self, ensemble)

    def process_at(self, ensemble: PathEnsemble, y, z) -> AdaptedProcess:
        """``g(., ., y, z)`` at fixed ``(y, z)`` as an adapted process with a builder."""
        y = np.asarray(y, dtype=float).reshape(self.k)
        z = np.asarray(z, dtype=float).reshape(self.k, self.d)

        def build(ens):
            bound = self.bind(ens)
            out = np.empty((ens.n_paths, ens.grid.n_nodes, self.k))
            yy = np.broadcast_to(y, (ens.n_paths, self.k))
            zz = np.broadcast_to(z, (ens.n_paths, self.k, self.d))
            for i in range(ens.grid.n_nodes):
                out[:, i] = bound(i, yy, zz)
            return out

        return AdaptedProcess.from_builder(ensemble, build)


class BoundGenerator:
    """A generator with its weights evaluated on one ensemble."""

    def __init__(self, spec: GeneratorSpec, ensemble: PathEnsemble):
        self.spec = spec
        self.ensemble = ensemble
        self.u = np.asarray(spec.u(ensemble), dtype=float)
        self.v = np.asarray(spec.v(ensemble), dtype=float)
        self.aux = {name: np.asarray(f(ensemble), dtype=float) for name, f in spec.aux.items()}

    def state(self, node, rows=None) -> NodeState:
        """State at one node (scalar ``node``) or at paired ``(rows, node)`` samples."""
        ens = self.ensemble
        rows = slice(None) if rows is None else rows
        t = ens.grid.nodes[node]
        return NodeState(
            np.asarray(t),
            ens.brownian[rows, node, :],
            self.u[rows, node],
            self.v[rows, node],
            {name: a[rows, node] for name, a in self.aux.items()},
        )

    def __call__(self, node, y, z, rows=None) -> np.ndarray:
        return self.spec.func(self.state(node, rows), y, z)

    def in_y(self, node, z, rows=None) -> Callable[[np.ndarray], np.ndarray]:
        """``y -> g(t_node, y, z)`` with ``z`` and the state fixed."""
        state = self.state(node, rows)
        if self.spec.prepare is not None:
            return self.spec.prepare(state, z)
        return lambda y: self.spec.func(state, y, z)


def _const_factory(value: float) -> Factory:
    return lambda ens: np.full((ens.n_paths, ens.grid.n_nodes), float(value))


def example46_weights(M: float):
    """Factories for ``u_bar = |B| 1{t < tau_1}`` and ``v_bar = |B| 1{t < tau_2}``.

    ``tau_1`` (``tau_2``) is the first node where the running integral of ``|B|``
    (``|B|^2``) reaches ``M / 2``. Using the strict inequality keeps each total
    budget below ``M / 2`` plus one step.
    """

    def u_bar(ens):
        tau1 = hitting_time(ens, ens.abs_brownian, M / 2.0, power=1)
        return ens.abs_brownian * tau1.before()

    def v_bar(ens):
        tau2 = hitting_time(ens, ens.abs_brownian, M / 2.0, power=2)
        return ens.abs_brownian * tau2.before()

    return u_bar, v_bar


def make_example46(M: float, delta: float, d: int = 1) -> GeneratorSpec:
    """Two-dimensional generator with random weights stopped at budget exhaustion.

    ``g_1 = u_bar (h(|y_2|) - e^{y_1}) + v_bar |z_2| + |B|`` and symmetrically for
    ``g_2``, with ``z_j`` the j-th row of ``z``.

    Monotonicity certificate: the exponential terms are decreasing in their own
    coordinate, ``|h(a) - h(b)| <= h(|a - b|)`` for the concave ``h`` and
    ``2 r h(r) <= C h(r^2)``; hence ``u = C u_bar`` with ``rho = h``.
    Growth certificate: ``-y e^y <= |y|`` and ``h(x) <= h(delta) + s x`` with
    ``s = -ln(delta) - 1`` give ``mu = s u_bar``, ``kappa = identity``,
    ``lam = v_bar`` and ``f = sqrt(2) (|B| + u_bar (1 + h(delta)))``.
    """
    if M <= 0:
        raise ValueError("M must be positive")
    h = make_h(delta)
    u_bar, v_bar = example46_weights(M)
    c_mono = h_monotonicity_constant(h)
    slope = -math.log(delta) - 1.0
    h_delta = -delta * math.log(delta)

    def prepare(s: NodeState, z):
        ub = s.aux["u_bar"][:, None]
        fixed = s.v[:, None] * np.sqrt(np.einsum("nkd,nkd->nk", z, z))[:, ::-1]
        fixed += np.sqrt(np.einsum("nd,nd->n", s.B, s.B))[:, None]

        def g(y):
            return ub * (h(np.abs(y[:, ::-1])) - np.exp(y)) + fixed

        return g

    def func(s: NodeState, y, z):
        return prepare(s, z)(y)

    cert = ACertificate(
        identity_rho(),
        lambda ens: slope * u_bar(ens),
        v_bar,
        lambda ens: math.sqrt(2.0) * (ens.abs_brownian + (1.0 + h_delta) * u_bar(ens)),
    )
    return GeneratorSpec(
        name=f"example46:{M:g},{delta:g}",
        k=2,
        d=d,
        func=func,
        u=lambda ens: c_mono * u_bar(ens),
        v=v_bar,
        rho=h,
        aux={"u_bar": u_bar},
        z_free=False,
        certificate=cert,
        params={"M": M, "delta": delta, "monotonicity_constant": c_mono, "h_slope": slope},
        prepare=prepare,
    )


def _forcing_factory(forcing, k: int) -> Optional[Factory]:
    if forcing is None:
        return None
    if isinstance(forcing, AdaptedProcess):
        if forcing.builder is None:
            fixed = forcing

            def from_values(ens):
                if not ens.same_as(fixed.ensemble):
                    raise ValueError("forcing process has no builder for another ensemble")
                return fixed.values

            base = from_values
        else:
            base = forcing.builder
    elif callable(forcing):
        base = forcing
    else:
        value = np.asarray(forcing, dtype=float)
        base = lambda ens: np.broadcast_to(value, (ens.n_paths, ens.grid.n_nodes) + value.shape)

    def shaped(ens):
        f = np.asarray(base(ens), dtype=float)
        if f.ndim == 2:
            f = f[:, :, None]
        return np.broadcast_to(f, f.shape[:2] + (k,))

    return shaped


def make_linear(k: int, d: int, a: float, b: float, forcing=None) -> GeneratorSpec:
    """``g = a y + b (row sums of z) + forcing``.

    ``forcing`` may be None, a constant, an ensemble factory or an
    :class:`AdaptedProcess` (scalar or ``k``-vector valued).
    """
    ffac = _forcing_factory(forcing, k)
    aux = {} if ffac is None else {f"forcing{j}": (lambda ens, j=j: ffac(ens)[:, :, j]) for j in range(k)}

    def func(s: NodeState, y, z):
        out = a * y + b * z.sum(axis=2)
        if ffac is not None:
            out = out + np.column_stack([s.aux[f"forcing{j}"] for j in range(k)])
        return out

    def f_abs(ens):
        if ffac is None:
            return np.zeros((ens.n_paths, ens.grid.n_nodes))
        return np.linalg.norm(ffac(ens), axis=2)

    cert = ACertificate(identity_rho(), _const_factory(abs(a)), _const_factory(abs(b) * math.sqrt(d)), f_abs)
    return GeneratorSpec(
        name=f"linear:{a:g},{b:g}",
        k=k,
        d=d,
        func=func,
        u=_const_factory(abs(a)),
        v=_const_factory(abs(b) * math.sqrt(d)),
        rho=identity_rho(),
        aux=aux,
        z_free=(b == 0),
        certificate=cert,
        params={"a": a, "b": b, "forcing": ffac is not None},
    )


def make_zero(k: int = 1, d: int = 1) -> GeneratorSpec:
    spec = make_linear(k, d, 0.0, 0.0)
    return GeneratorSpec(**{**spec.__dict__, "name": "zero"})


def make_square(k: int = 1, d: int = 1) -> GeneratorSpec:
    """``g = y^2`` declared with ``u = 0``: a planted monotonicity violation."""
    return GeneratorSpec("square", k, d, lambda s, y, z: y**2, _const_factory(0.0), _const_factory(0.0), identity_rho(), z_free=True)


def make_sign(k: int = 1, d: int = 1) -> GeneratorSpec:
    """``g = -sign(y)``: monotone but discontinuous, a planted continuity violation."""
    return GeneratorSpec("sign", k, d, lambda s, y, z: -np.sign(y), _const_factory(0.0), _const_factory(0.0), identity_rho(), z_free=True)


GENERATOR_PRESETS = ("example46:M,delta", "linear:a,b", "zero")


def generator_preset(spec: str, d: int = 1, forcing=None) -> GeneratorSpec:
    """Resolve ``zero``, ``linear:a,b`` or ``example46:M,delta``."""
    name, _, arg = spec.partition(":")
    args = [float(x) for x in arg.split(",")] if arg else []
    if name == "zero" and not args:
        return make_zero(1, d)
    if name == "linear" and len(args) == 2:
        return make_linear(1, d, args[0], args[1], forcing)
    if name == "example46" and len(args) == 2:
        return make_example46(args[0], args[1], d)
    raise ValueError(f"unknown generator preset {spec!r}")


# ---------------------------------------------------------------- checkers


@dataclass
class CheckReport:
    """Outcome of one sampled assumption check.

    ``witness`` reproduces the worst violation: path, node and the ``y``/``z``
    arguments used.
    """

    assumption: str
    passed: bool
    n_samples: int
    violations: int
    worst_margin: float
    witness: Optional[dict]
    settings: dict
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AssumptionReport:
    h1_continuity: CheckReport
    h2_monotonicity: CheckReport
    h3_growth: CheckReport
    h4_lipschitz: CheckReport
    a_condition: Optional[CheckReport]

    @property
    def passed(self) -> bool:
        parts = [self.h1_continuity, self.h2_monotonicity, self.h3_growth, self.h4_lipschitz]
        return all(p.passed for p in parts) and (self.a_condition is None or self.a_condition.passed)

    def reports(self) -> list:
        parts = [self.h1_continuity, self.h2_monotonicity, self.h3_growth, self.h4_lipschitz, self.a_condition]
        return [p for p in parts if p is not None]

    def as_dict(self) -> dict:
        return {k: (None if v is None else v.as_dict()) for k, v in self.__dict__.items()}


def _ball(gen: np.random.Generator, n: int, shape: tuple, radius: float) -> np.ndarray:
    dim = int(np.prod(shape))
    x = gen.standard_normal((n, dim))
    x /= np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-300)
    x *= radius * gen.random((n, 1)) ** (1.0 / dim)
    return x.reshape((n,) + shape)


def _sample_sites(ens: PathEnsemble, gen: np.random.Generator, n: int):
    rows = gen.integers(0, ens.n_paths, n)
    nodes = gen.integers(0, ens.grid.n_steps, n)
    return rows, nodes


def _witness(rows, nodes, idx, **arrays) -> dict:
    out = {"path": int(rows[idx]), "node": int(nodes[idx])}
    out.update({k: np.asarray(v[idx]).tolist() for k, v in arrays.items()})
    return out


def _report(name, margins, rows, nodes, settings, witness_arrays, tol=CHECK_TOL, details=None) -> CheckReport:
    bad = margins > tol
    worst = int(np.argmax(margins))
    witness = _witness(rows, nodes, worst, **witness_arrays) if bad.any() else None
    return CheckReport(name, not bad.any(), len(margins), int(bad.sum()), float(margins[worst]), witness, settings, details or {})


def check_H2(gen: GeneratorSpec, ensemble: PathEnsemble, n_samples: int = 10_000, y_radius: float = 3.0,
             z_radius: float = 3.0, seed: int = 0, bound: Optional[BoundGenerator] = None) -> CheckReport:
    """``<y1 - y2, g(y1, z) - g(y2, z)> <= u rho(|y1 - y2|^2)`` on sampled sites."""
    rng = _rng.substream(seed, _rng.SAMPLER, 2)
    bg = bound or gen.bind(ensemble)
    rows, nodes = _sample_sites(ensemble, rng, n_samples)
    y1 = _ball(rng, n_samples, (gen.k,), y_radius)
    y2 = _ball(rng, n_samples, (gen.k,), y_radius)
    z = _ball(rng, n_samples, (gen.k, gen.d), z_radius)
    dy = y1 - y2
    lhs = np.sum(dy * (bg(nodes, y1, z, rows) - bg(nodes, y2, z, rows)), axis=1)
    rhs = bg.u[rows, nodes] * gen.rho(np.sum(dy**2, axis=1))
    settings = {"n_samples": n_samples, "y_radius": y_radius, "z_radius": z_radius, "seed": seed}
    return _report("H2", lhs - rhs, rows, nodes, settings, {"y1": y1, "y2": y2, "z": z})


def check_H4(gen: GeneratorSpec, ensemble: PathEnsemble, n_samples: int = 10_000, z_radius: float = 3.0,
             seed: int = 0, y_radius: float = 3.0, bound: Optional[BoundGenerator] = None) -> CheckReport:
    """``|g(y, z1) - g(y, z2)| <= v |z1 - z2|`` on sampled sites."""
    rng = _rng.substream(seed, _rng.SAMPLER, 4)
    bg = bound or gen.bind(ensemble)
    rows, nodes = _sample_sites(ensemble, rng, n_samples)
    y = _ball(rng, n_samples, (gen.k,), y_radius)
    z1 = _ball(rng, n_samples, (gen.k, gen.d), z_radius)
    z2 = _ball(rng, n_samples, (gen.k, gen.d), z_radius)
    lhs = np.linalg.norm(bg(nodes, y, z1, rows) - bg(nodes, y, z2, rows), axis=1)
    rhs = bg.v[rows, nodes] * np.linalg.norm((z1 - z2).reshape(n_samples, -1), axis=1)
    settings = {"n_samples": n_samples, "y_radius": y_radius, "z_radius": z_radius, "seed": seed}
    return _report("H4", lhs - rhs, rows, nodes, settings, {"y": y, "z1": z1, "z2": z2})


def check_H1(gen: GeneratorSpec, ensemble: PathEnsemble, n_samples: int = 10_000, perturbation_scale: float = 1.0,
             seed: int = 0, n_halvings: int = 20, y_radius: float = 3.0, bound: Optional[BoundGenerator] = None) -> CheckReport:
    """Continuity probe in ``y``: the modulus ``max |g(y + eps e) - g(y)|`` as ``eps`` halves.

    Base points include ``y = 0`` and the coordinate axes. A continuous generator
    shows a decaying modulus (fitted log2 slope per halving near -1); the check
    flags a slope above -0.5 whose finest modulus still exceeds 1e-6.
    """
    rng = _rng.substream(seed, _rng.SAMPLER, 1)
    bg = bound or gen.bind(ensemble)
    rows, nodes = _sample_sites(ensemble, rng, n_samples)
    y = _ball(rng, n_samples, (gen.k,), y_radius)
    # deterministic base points: the origin and half-radius axis points
    n_fixed = min(n_samples, 1 + gen.k)
    y[:n_fixed] = np.vstack([np.zeros(gen.k), np.eye(gen.k) * (y_radius / 2.0)])[:n_fixed]
    direction = _ball(rng, n_samples, (gen.k,), 1.0)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    z = _ball(rng, n_samples, (gen.k, gen.d), y_radius)
    base = bg(nodes, y, z, rows)
    eps = perturbation_scale * 0.5 ** np.arange(n_halvings)
    moduli = np.empty((n_halvings, n_samples))
    for j, e in enumerate(eps):
        moduli[j] = np.linalg.norm(bg(nodes, y + e * direction, z, rows) - base, axis=1)
    # per-site decay slope of log2 modulus against halving count, over the finer half
    half = n_halvings // 2
    logm = np.log2(np.maximum(moduli[half:], 1e-300))
    steps = np.arange(half, n_halvings)
    slope = np.polyfit(steps, logm, 1)[0]
    finest = moduli[-1]
    flagged = (slope > -0.5) & (finest > 1e-6)
    margins = np.where(flagged, finest, -1.0)
    settings = {"n_samples": n_samples, "perturbation_scale": perturbation_scale, "n_halvings": n_halvings, "seed": seed}
    worst = int(np.argmax(finest))
    details = {"eps": eps.tolist(), "max_modulus": moduli.max(axis=1).tolist(), "worst_site_slope": float(slope[worst])}
    rep = _report("H1", margins, rows, nodes, settings, {"y": y, "direction": direction, "z": z}, tol=0.0, details=details)
    rep.worst_margin = float(finest.max())
    return rep


def check_H3(gen: GeneratorSpec, ensemble: PathEnsemble, r_ladder=(1.0, 2.0, 4.0), n_paths: int = 200,
             seed: int = 0, net_size: int = 256, bound: Optional[BoundGenerator] = None) -> CheckReport:
    """Monte Carlo ``E int_0^T psi_r dt`` with ``psi_r = sup_{|y|<=r} |g(y, 0) - g(0, 0)|``.

    The supremum is taken over a random net in the ball plus the ``2k`` axis
    extremes. Passing means every estimate along the ladder is finite.
    """
    rng = _rng.substream(seed, _rng.SAMPLER, 3)
    bg = bound or gen.bind(ensemble)
    paths = np.sort(rng.choice(ensemble.n_paths, size=min(n_paths, ensemble.n_paths), replace=False))
    grid = ensemble.grid
    z0 = np.zeros((paths.size, gen.k, gen.d))
    y0 = np.zeros((paths.size, gen.k))
    estimates, ses = [], []
    for r in r_ladder:
        net = _ball(rng, net_size, (gen.k,), r)
        axes = np.concatenate([np.eye(gen.k) * r, -np.eye(gen.k) * r])
        net = np.concatenate([net, axes])
        psi = np.zeros((paths.size, grid.n_steps))
        for i in range(grid.n_steps):
            g0 = bg(i, y0, z0, paths)
            for point in net:
                diff = np.linalg.norm(bg(i, np.broadcast_to(point, y0.shape), z0, paths) - g0, axis=1)
                np.maximum(psi[:, i], diff, out=psi[:, i])
        integral = psi @ grid.dt
        estimates.append(float(integral.mean()))
        ses.append(float(integral.std(ddof=1) / math.sqrt(paths.size)) if paths.size > 1 else 0.0)
    finite = all(math.isfinite(e) for e in estimates)
    settings = {"r_ladder": list(r_ladder), "n_paths": int(paths.size), "net_size": net_size, "seed": seed}
    details = {"estimates": estimates, "standard_errors": ses}
    return CheckReport("H3", finite, int(paths.size) * len(r_ladder), 0 if finite else 1, max(estimates), None, settings, details)


def check_A(gen: GeneratorSpec, ensemble: PathEnsemble, kappa: Optional[RhoFunction] = None, lambda_process=None,
            f_process=None, n_samples: int = 10_000, seed: int = 0, mu_process=None, y_radius: float = 3.0,
            z_radius: float = 3.0, bound: Optional[BoundGenerator] = None) -> CheckReport:
    """``<y, g(y, z)> <= mu kappa(|y|^2) + lam |y||z| + f |y|`` on sampled sites.

    Missing pieces default to the generator's certificate.
    """
    cert = gen.certificate
    if cert is None and None in (kappa, lambda_process, f_process, mu_process):
        raise ValueError("generator has no growth certificate; supply kappa, mu, lambda and f")
    kappa = kappa or cert.kappa

    def arr(p, default):
        p = default if p is None else p
        if isinstance(p, AdaptedProcess):
            return p.values
        return np.asarray(p(ensemble), dtype=float)

    mu = arr(mu_process, cert.mu if cert else None)
    lam = arr(lambda_process, cert.lam if cert else None)
    f = arr(f_process, cert.f if cert else None)
    rng = _rng.substream(seed, _rng.SAMPLER, 5)
    bg = bound or gen.bind(ensemble)
    rows, nodes = _sample_sites(ensemble, rng, n_samples)
    y = _ball(rng, n_samples, (gen.k,), y_radius)
    z = _ball(rng, n_samples, (gen.k, gen.d), z_radius)
    ny = np.linalg.norm(y, axis=1)
    nz = np.linalg.norm(z.reshape(n_samples, -1), axis=1)
    lhs = np.sum(y * bg(nodes, y, z, rows), axis=1)
    rhs = mu[rows, nodes] * kappa(ny**2) + lam[rows, nodes] * ny * nz + f[rows, nodes] * ny
    settings = {"n_samples": n_samples, "y_radius": y_radius, "z_radius": z_radius, "seed": seed, "kappa": kappa.name}
    return _report("A", lhs - rhs, rows, nodes, settings, {"y": y, "z": z})


def check_all(gen: GeneratorSpec, ensemble: PathEnsemble, n_samples: int = 10_000, seed: int = 0,
              r_ladder=(1.0, 2.0, 4.0), h3_paths: int = 200) -> AssumptionReport:
    bg = gen.bind(ensemble)
    return AssumptionReport(
        check_H1(gen, ensemble, n_samples, seed=seed, bound=bg),
        check_H2(gen, ensemble, n_samples, seed=seed, bound=bg),
        check_H3(gen, ensemble, r_ladder, h3_paths, seed=seed, bound=bg),
        check_H4(gen, ensemble, n_samples, seed=seed, bound=bg),
        check_A(gen, ensemble, n_samples=n_samples, seed=seed, bound=bg) if gen.certificate else None,
    )


def assert_z_free(gen: GeneratorSpec, ensemble: PathEnsemble, n_samples: int = 256, seed: int = 0) -> None:
    """Raise if ``g`` changes with ``z`` at sampled sites."""
    rng = _rng.substream(seed, _rng.SAMPLER, 6)
    bg = gen.bind(ensemble)
    rows, nodes = _sample_sites(ensemble, rng, n_samples)
    y = _ball(rng, n_samples, (gen.k,), 2.0)
    z = _ball(rng, n_samples, (gen.k, gen.d), 2.0)
    if not np.array_equal(bg(nodes, y, z, rows), bg(nodes, y, np.zeros_like(z), rows)):
        raise ValueError(f"generator {gen.name} depends on z")


# ------------------------------------------------------- non-domination probe


@dataclass
class NondominationReport:
    M: float
    times: list
    u_frequency: list
    v_frequency: list
    u_flagged_nodes: list
    v_flagged_nodes: list
    u_candidate_integral: float
    v_candidate_integral: float
    refinement: list
    n_paths: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def nondomination_probe(ensemble: PathEnsemble, M: float, candidate_u_tilde, candidate_v_tilde,
                        refinement_steps=(10, 100, 1_000, 10_000, 100_000)) -> NondominationReport:
    """Estimate ``P(u_bar_t > u~_t)`` and ``P(v_bar_t > v~_t)`` per node by path counting.

    Candidates are callables of ``t`` or arrays over the grid nodes. A node is
    flagged when the frequency is positive while the candidate lies below the
    threshold ``M / (2t)`` (``sqrt(M / (2t))`` for ``v``). The refinement table
    integrates the threshold ``M / (2t)`` with right-endpoint sums on ever finer
    uniform grids; it grows like ``log n`` without bound.
    """
    grid = ensemble.grid
    t = grid.nodes

    def on_grid(c):
        if callable(c):
            with np.errstate(divide="ignore"):
                return np.asarray([float(c(s)) if s > 0 else np.inf for s in t])
        return np.asarray(c, dtype=float)

    ut, vt = on_grid(candidate_u_tilde), on_grid(candidate_v_tilde)
    u_bar_f, v_bar_f = example46_weights(M)
    ub, vb = u_bar_f(ensemble), v_bar_f(ensemble)
    u_freq = (ub > ut[None, :]).mean(axis=0)
    v_freq = (vb > vt[None, :]).mean(axis=0)
    with np.errstate(divide="ignore"):
        u_thr = np.where(t > 0, M / (2.0 * np.where(t > 0, t, 1.0)), np.inf)
    v_thr = np.sqrt(u_thr)
    u_flag = np.flatnonzero((u_freq > 0) & (ut < u_thr)).tolist()
    v_flag = np.flatnonzero((v_freq > 0) & (vt < v_thr)).tolist()
    # right-endpoint sums avoid the candidate's value at t = 0
    u_int = float(np.sum(ut[1:] * grid.dt))
    v_int = float(np.sum(vt[1:] ** 2 * grid.dt))
    table = []
    T = grid.horizon
    for n in refinement_steps:
        s = np.arange(1, n + 1) * (T / n)
        table.append({"n_steps": int(n), "integral": float(np.sum(M / (2.0 * s)) * (T / n))})
    return NondominationReport(M, t.tolist(), u_freq.tolist(), v_freq.tolist(), u_flag, v_flag, u_int, v_int, table, ensemble.n_paths)


def weight_budgets(gen: GeneratorSpec, ensemble: PathEnsemble) -> dict:
    """Path-max of ``int u`` and ``int v^2`` with the largest one-step overshoot bound."""
    bg = gen.bind(ensemble)
    u_proc = AdaptedProcess(ensemble, bg.u)
    v_proc = AdaptedProcess(ensemble, bg.v)
    return {
        "u_l1_max": float(budget_l1(u_proc).max()),
        "v_l2_max": float(budget_l2(v_proc).max()),
        "n_paths": ensemble.n_paths,
    }
