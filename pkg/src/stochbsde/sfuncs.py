"""Moduli of class S, the Theta calculus and the truncated entropy function ``h``.

Class S: nondecreasing continuous ``rho`` on ``[0, inf)`` with ``rho(0) = 0``,
``rho > 0`` away from 0, ``int_{0+} dx / rho = inf`` (Osgood), linear growth
``rho(x) <= A (1 + x)`` and derivative bounded on every ``[c, inf)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

# Theta is never evaluated below this argument
X_MIN = 1e-12


@dataclass(frozen=True)
class RhoFunction:
    name: str
    eval: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    derivative_eval: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)
    linear_bound_A: float = 1.0
    local_deriv_bound: Optional[Callable[[float], float]] = field(default=None, repr=False)

    def __call__(self, x):
        return self.eval(np.asarray(x, dtype=float))

    def derivative(self, x, step: float = 1e-7):
        x = np.asarray(x, dtype=float)
        if self.derivative_eval is not None:
            return self.derivative_eval(x)
        hstep = step * np.maximum(1.0, x)
        lo = np.maximum(x - hstep, 0.0)
        return (self.eval(x + hstep) - self.eval(lo)) / (x + hstep - lo)

    def flow(self, start, duration, substeps: int = 16):
        """Solve ``m' = rho(m)`` from ``start`` for ``duration`` (vectorised RK4).

        This is the exact one-step map ``Theta^{-1}(Theta(m) + duration)`` up to the
        integrator error; it maps 0 to 0.
        """
        m = np.array(start, dtype=float)
        dur = np.broadcast_to(np.asarray(duration, dtype=float), m.shape)
        hstep = dur / substeps
        for _ in range(substeps):
            k1 = self.eval(np.maximum(m, 0.0))
            k2 = self.eval(np.maximum(m + 0.5 * hstep * k1, 0.0))
            k3 = self.eval(np.maximum(m + 0.5 * hstep * k2, 0.0))
            k4 = self.eval(np.maximum(m + hstep * k3, 0.0))
            m = m + hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return m


def identity_rho() -> RhoFunction:
    return RhoFunction(
        "identity",
        lambda x: np.array(x, dtype=float),
        lambda x: np.ones_like(np.asarray(x, dtype=float)),
        1.0,
        lambda c: 1.0,
    )


def linear_rho(slope: float) -> RhoFunction:
    if slope <= 0:
        raise ValueError("slope must be positive")
    return RhoFunction(
        f"linear:{slope:g}",
        lambda x: slope * np.asarray(x, dtype=float),
        lambda x: np.full_like(np.asarray(x, dtype=float), slope),
        max(1.0, float(slope)),
        lambda c: float(slope),
    )


def make_h(delta: float) -> RhoFunction:
    """``-x ln x`` on ``[0, delta]``, continued by its tangent line beyond ``delta``."""
    if not 0.0 < delta < math.exp(-1.0):
        raise ValueError("delta must lie in (0, 1/e)")
    slope = -math.log(delta) - 1.0
    h_delta = -delta * math.log(delta)

    def h(x):
        x = np.asarray(x, dtype=float)
        out = np.array(h_delta + slope * (x - delta), dtype=float)
        low = x <= delta
        if np.any(low):
            xl = x[low]
            with np.errstate(divide="ignore", invalid="ignore"):
                out[low] = np.where(xl > 0.0, -xl * np.log(xl), 0.0)
        return out

    def dh(x):
        x = np.asarray(x, dtype=float)
        inner = np.clip(x, np.finfo(float).tiny, delta)
        return np.where(x <= delta, -np.log(inner) - 1.0, slope)

    return RhoFunction(
        f"h:{delta:g}",
        h,
        dh,
        max(1.0, slope),
        lambda c: -math.log(min(c, delta)) - 1.0,
    )


def rho_preset(spec: str) -> RhoFunction:
    """Resolve ``identity``, ``h:<delta>`` or ``linear:<slope>``."""
    name, _, arg = spec.partition(":")
    if name == "identity" and not arg:
        return identity_rho()
    if name == "h" and arg:
        return make_h(float(arg))
    if name == "linear" and arg:
        return linear_rho(float(arg))
    raise ValueError(f"unknown rho preset {spec!r}")


RHO_PRESETS = ("h:<delta>", "identity", "linear:<slope>")


@dataclass
class ClassSReport:
    passed: bool
    failed_condition: Optional[str]
    witness_x: Optional[float]
    A: float
    local_bounds: dict
    eps_sequence: list
    partial_integrals: list
    divergence_certificate: str
    messages: list

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def default_probe_grid() -> np.ndarray:
    return np.unique(np.concatenate([np.logspace(-12, 6, 721), np.linspace(0.0, 10.0, 201)[1:]]))


def _log_partial_integral(rho: RhoFunction, a: float, b: float) -> float:
    """``int_{e^a}^{e^b} dx / rho(x)`` computed in the variable ``s = ln x``."""
    val, _ = integrate.quad(lambda s: math.exp(s) / float(rho(math.exp(s))), a, b, limit=200, epsabs=1e-12, epsrel=1e-12)
    return val


def validate_class_S(
    rho: RhoFunction,
    probe_grid=None,
    divergence_threshold: float = 1e3,
    x_ref: float = 1e-2,
) -> ClassSReport:
    """Sampled certification of membership in class S.

    Condition (i)'s divergence passes when the partial integrals over a geometric
    epsilon-sequence exceed ``divergence_threshold``, or when ``x / rho(x)`` at the
    smallest probes decays no faster than ``1 / ln(1/x)`` (comparison with the
    divergent ``int dx / (x ln(1/x))``).
    """
    x = np.asarray(default_probe_grid() if probe_grid is None else probe_grid, dtype=float)
    x = np.unique(x[x > 0])
    messages = []
    values = rho(x)

    def fail(cond, wx, msg, **extra):
        messages.append(msg)
        return ClassSReport(False, cond, float(wx), extra.get("A", float("nan")), {}, extra.get("eps", []),
                            extra.get("partials", []), extra.get("cert", ""), messages)

    # (i) zero at zero, positive and nondecreasing
    if float(rho(0.0)) != 0.0:
        return fail("i", 0.0, "rho(0) != 0")
    bad = np.flatnonzero(values <= 0)
    if bad.size:
        return fail("i", x[bad[0]], "rho not strictly positive")
    dec = np.flatnonzero(np.diff(values) < -1e-12 * np.abs(values[1:]))
    if dec.size:
        return fail("i", x[dec[0] + 1], "rho decreases")

    # (i) Osgood divergence at 0+
    exps = np.arange(math.log10(x_ref) - 1, -301, -1.0)
    # stop before rho underflows to zero in float64
    eps = [e for e in (10.0**k for k in exps) if float(rho(e)) >= 1e-300]
    partials = []
    total = 0.0
    upper = math.log(x_ref)
    for e in eps:
        lower = math.log(e)
        total += _log_partial_integral(rho, lower, upper)
        partials.append(total)
        upper = lower
    cert = ""
    if partials and partials[-1] >= divergence_threshold:
        cert = "threshold"
    elif eps:
        tail = np.array([e / float(rho(e)) * math.log(1.0 / e) for e in eps])
        if tail[-1] >= 0.9 * tail[len(tail) // 2] and tail[-1] > 0:
            cert = "harmonic-comparison"
    if not cert:
        return fail("i", eps[-1] if eps else x_ref, "integral of 1/rho appears finite at 0+", eps=eps, partials=partials)

    # (ii) linear growth
    ratio = values / (1.0 + x)
    A_probe = float(ratio.max())
    top = x >= x[-1] / 10.0
    if ratio[-1] > 1.01 * ratio[top][0]:
        return fail("ii", x[-1], "rho/(1+x) still growing at the end of the probe grid", A=A_probe, eps=eps, partials=partials, cert=cert)
    # the 5% safety margin only applies once the probed constant exceeds 1
    A = 1.0 if A_probe <= 1.0 else 1.05 * A_probe

    # (iii) derivative nonnegative and bounded on [c, inf)
    deriv = np.asarray(rho.derivative(x), dtype=float)
    local = {}
    for c in (1e-3, 1e-2, 1e-1, 1.0):
        sel = x >= c
        d = deriv[sel]
        if np.any(d < -1e-9):
            return fail("iii", x[sel][np.argmin(d)], "negative derivative", A=A, eps=eps, partials=partials, cert=cert)
        far = x[sel] >= x[-1] / 10.0
        if d[-1] > 1.01 * d[far][0] + 1e-9:
            return fail("iii", x[-1], f"derivative unbounded on [{c:g}, inf)", A=A, eps=eps, partials=partials, cert=cert)
        local[c] = float(d.max())
    return ClassSReport(True, None, None, A, local, eps, partials, cert, messages)


@dataclass(frozen=True)
class ThetaCalculus:
    """``Theta(x) = int_1^x du / rho(u)`` and its inverse."""

    rho: RhoFunction
    tolerance: float = 1e-8

    def theta(self, x: float) -> float:
        if not x > 0:
            raise ValueError("Theta is defined for x > 0")
        if x < X_MIN:
            raise ValueError(f"Theta not evaluated below {X_MIN:g}")
        if x == 1.0:
            return 0.0
        val, err = integrate.quad(
            lambda s: math.exp(s) / float(self.rho(math.exp(s))),
            0.0,
            math.log(x),
            limit=500,
            epsabs=self.tolerance * 1e-2,
            epsrel=1e-13,
        )
        if not math.isfinite(val) or err > self.tolerance:
            raise ArithmeticError(f"Theta quadrature did not converge at x={x!r} (err {err:.3g})")
        return val

    def theta_inverse(self, y: float) -> float:
        if y == 0.0:
            return 1.0
        if not math.isfinite(y):
            raise ValueError("y must be finite")
        lo, hi = 1.0, 1.0
        if y > 0:
            while self.theta(hi) < y:
                lo, hi = hi, hi * 4.0
                if hi > 1e300:
                    raise ValueError("y above the range of Theta")
        else:
            while self.theta(lo) > y:
                hi, lo = lo, lo / 4.0
                if lo < X_MIN:
                    if self.theta(X_MIN) > y:
                        raise ValueError("y below the range of Theta on [X_MIN, inf)")
                    lo = X_MIN
                    break
        return optimize.brentq(lambda v: self.theta(v) - y, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=200)

    def bihari_bound(self, c: float, budget: float) -> float:
        """``Theta^{-1}(Theta(c) + budget)``; zero when ``c == 0``."""
        if c < 0 or budget < 0:
            raise ValueError("c and budget must be nonnegative")
        if c == 0.0:
            return 0.0
        return self.theta_inverse(self.theta(c) + budget)


def theta(calc: ThetaCalculus, x: float) -> float:
    return calc.theta(x)


def theta_inverse(calc: ThetaCalculus, y: float) -> float:
    return calc.theta_inverse(y)


def h_monotonicity_constant(rho: RhoFunction) -> float:
    """Constant ``C`` with ``2 r rho(r) <= C rho(r^2)`` for all ``r > 0``, plus 5%.

    For a concave, subadditive ``rho`` this bounds the cross terms
    ``|a| rho(|b|) + |b| rho(|a|)`` (``a^2 + b^2 = r^2``) by ``C rho(r^2)``.
    The ratio tends to 1 at 0 and to 2 at infinity; the interior maximum is
    found on a dense logarithmic grid.
    """
    r = np.logspace(-9, 7, 400001)
    ratio = 2.0 * r * rho(r) / rho(r * r)
    return 1.05 * float(max(ratio.max(), 2.0))
