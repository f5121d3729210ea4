"""The speed function v(t), solving int_{v(t)}^infty dq / psi(q) = t, and Grey's criterion.

u(q) = int_q^infty dq'/psi(q') is computed by quadrature; v = u^{-1} is obtained
by integrating v' = -psi(v) from a single anchor found by root finding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .io import write_csv
from .measure import LambdaMeasure, psi, pushforward_psi, tail_verdict

DEFAULT_Q_MAX = 1e8
# psi from a measure is reliable up to about e^250 (quadrature floor at e^-300)
LOG_Q_CAP = 230.0


class DegenerateInputError(ValueError):
    """psi vanishes identically."""


class ExtrapolationError(ValueError):
    """Evaluation outside the tabulated range."""


class PowerPsi:
    """Synthetic branching mechanism psi(q) = coeff * q**alpha."""

    def __init__(self, alpha: float, coeff: float = 1.0):
        if not alpha > 0 or not coeff > 0:
            raise ValueError("PowerPsi needs alpha > 0 and coeff > 0")
        self.alpha, self.coeff = float(alpha), float(coeff)

    def __call__(self, q: float) -> float:
        return self.coeff * q ** self.alpha

    def v_exact(self, t: float) -> float:
        if self.alpha <= 1.0:
            return math.inf
        return ((self.alpha - 1.0) * self.coeff * t) ** (-1.0 / (self.alpha - 1.0))

    def __repr__(self):
        return f"PowerPsi(alpha={self.alpha}, coeff={self.coeff})"


class MeasurePsi:
    """psi of a LambdaMeasure, memoised."""

    def __init__(self, measure: LambdaMeasure):
        self.measure = measure
        self._cache: dict[float, float] = {}

    def __call__(self, q: float) -> float:
        q = float(q)
        val = self._cache.get(q)
        if val is None:
            val = psi(q, self.measure)
            if len(self._cache) < 200_000:
                self._cache[q] = val
        return val

    def __repr__(self):
        return f"MeasurePsi({self.measure!r})"


def as_psi(source) -> Callable[[float], float]:
    if isinstance(source, LambdaMeasure):
        return MeasurePsi(source)
    if callable(source):
        return source
    raise TypeError(f"cannot build psi from {source!r}")


def _quad(f, a, b, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-12, limit=500, **kw)[0]


# --------------------------------------------------------------------------
# Grey's condition


@dataclass(frozen=True)
class GreyReport:
    verdict: str
    integral: float      # int_1^{q_max} dq / psi
    slope: float
    kappa: float


_VERDICT_MAP = {"converges": "extinct", "diverges": "non_extinct", "inconclusive": "inconclusive"}


def grey_report(source, q_max: float = DEFAULT_Q_MAX, points: int = 40) -> GreyReport:
    if q_max < 1e6:
        raise ValueError("q_max must be >= 1e6")
    f = as_psi(source)
    if isinstance(source, LambdaMeasure) and source.is_zero or f(1.0) <= 0.0:
        raise DegenerateInputError("psi vanishes identically")
    integral = _quad(lambda s: math.exp(s) / f(math.exp(s)), 0.0, math.log(q_max))
    grid = np.geomspace(math.sqrt(q_max), q_max, points)
    vals = np.array([f(q) for q in grid])
    verdict, slope, kappa = tail_verdict(grid, vals)
    return GreyReport(_VERDICT_MAP[verdict], integral, slope, kappa)


def grey_verdict(source, q_max: float = DEFAULT_Q_MAX) -> str:
    """'extinct', 'non_extinct' or 'inconclusive' from the tail growth of psi."""
    return grey_report(source, q_max).verdict


# --------------------------------------------------------------------------
# u and v


def u_integral(q: float, source, log_q_cap: float = LOG_Q_CAP) -> float:
    """u(q) = int_q^infty dq'/psi(q').

    Quadrature in log q' up to e^log_q_cap, then a power-law tail continued
    from the local slope of psi at the cap (infinite if that slope is <= 1).
    """
    f = as_psi(source)
    if isinstance(f, PowerPsi):
        a = f.alpha
        return math.inf if a <= 1.0 else q ** (1.0 - a) / (f.coeff * (a - 1.0))
    if q <= 0:
        return math.inf
    s0 = math.log(q)
    if s0 >= log_q_cap:
        raise ExtrapolationError(f"q={q} beyond the psi range e^{log_q_cap}")
    g = lambda s: math.exp(s) / f(math.exp(s))
    knots = np.unique(np.concatenate([[s0], np.arange(math.ceil(s0 / 10) * 10, log_q_cap, 10.0), [log_q_cap]]))
    body = sum(_quad(g, a, b) for a, b in zip(knots, knots[1:]))
    Q = math.exp(log_q_cap)
    slope = math.log(f(Q) / f(Q / math.e))
    tail = math.inf if slope <= 1.0 else Q / f(Q) / (slope - 1.0)
    return body + tail


def _bisect_v(t: float, source, rtol: float = 1e-13) -> float:
    """Solve u(q) = t for q by root finding on log q."""
    h = lambda s: math.log(u_integral(math.exp(s), source) / t)
    lo, hi = -5.0, 5.0
    while h(lo) < 0:
        lo -= 10.0
    while h(hi) > 0:
        hi += 10.0
        if hi >= LOG_Q_CAP:
            raise ExtrapolationError(f"v({t}) exceeds the psi range")
    return math.exp(optimize.brentq(h, lo, hi, xtol=1e-15, rtol=rtol))


@dataclass
class SpeedTable:
    """Tabulated psi, u and v on [t_min, t_max].

    v is the dense-output solution of dw/ds = -t psi(v)/v in the log coordinates
    s = log t, w = log v, anchored at v(t_max).
    """

    source: object
    t_min: float = 1e-6
    t_max: float = 1.0
    q_max: float = DEFAULT_Q_MAX
    points: int = 61
    grey: GreyReport = field(init=False)
    t_grid: np.ndarray = field(init=False)
    v_grid: np.ndarray = field(init=False)
    q_grid: np.ndarray = field(init=False)
    psi_grid: np.ndarray = field(init=False)

    def __post_init__(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        self.psi_fn = as_psi(self.source)
        self.grey = grey_report(self.psi_fn, self.q_max)
        self.t_grid = np.geomspace(self.t_min, self.t_max, self.points)
        self._sol = None
        if self.grey.verdict != "extinct":
            self.v_grid = np.full(self.points, math.inf)
            self.q_grid = np.geomspace(1.0, self.q_max, self.points)
        else:
            anchor = _bisect_v(self.t_max, self.psi_fn)
            f = self.psi_fn

            def rhs(s, w):
                return [-math.exp(s) * f(math.exp(w[0])) / math.exp(w[0])]

            s_hi, s_lo = math.log(self.t_max), math.log(self.t_min)
            self._sol = integrate.solve_ivp(rhs, (s_hi, s_lo), [math.log(anchor)], method="DOP853",
                                            rtol=1e-12, atol=1e-12, dense_output=True)
            if not self._sol.success:
                raise RuntimeError(f"speed ODE failed: {self._sol.message}")
            self.v_grid = np.array([self.v(t) for t in self.t_grid])
            self.q_grid = np.geomspace(self.v_grid[-1], self.v_grid[0], self.points)
        self.psi_grid = np.array([self.psi_fn(q) for q in self.q_grid])

    @property
    def finite(self) -> bool:
        return self._sol is not None

    def _check(self, t):
        lo, hi = self.t_min * (1 - 1e-12), self.t_max * (1 + 1e-12)
        if not lo <= t <= hi:
            raise ExtrapolationError(f"t={t} outside table range [{self.t_min}, {self.t_max}]")

    def v(self, t: float) -> float:
        self._check(t)
        if self._sol is None:
            return math.inf
        return math.exp(float(self._sol.sol(math.log(t))[0]))

    def u(self, q: float) -> float:
        return u_integral(q, self.psi_fn)

    def write_psi_csv(self, path):
        return write_csv(path, ["q", "psi"], zip(self.q_grid, self.psi_grid))

    def write_v_csv(self, path, ts=None):
        ts = self.t_grid if ts is None else ts
        return write_csv(path, ["t", "v"], ((t, self.v(t)) for t in ts))


def v_of(t: float, table: SpeedTable) -> float:
    """v(t), or +inf when Grey's condition fails."""
    return table.v(t)


def u_of(q: float, table: SpeedTable) -> float:
    """u(q) = int_q^infty dq'/psi."""
    return table.u(q)


def scaled_psi(lam: float, eps: float, sign: int, measure: LambdaMeasure, route: str = "direct") -> float:
    """psi(lam (1 + sign eps)); route='pushforward' integrates against the image of nu instead."""
    if not 0.0 <= eps < 1.0 or sign not in (1, -1):
        raise ValueError("need eps in [0, 1) and sign = +1 or -1")
    if route == "direct":
        return psi(lam * (1.0 + sign * eps), measure)
    if route == "pushforward":
        return pushforward_psi(lam, eps, sign, measure)
    raise ValueError(f"unknown route {route!r}")


def scaled_v(t: float, eps: float, sign: int, table: SpeedTable) -> float:
    """v_eps^{+-}(t) = v(t (1 +- eps)) / (1 +- eps)."""
    f = 1.0 + sign * eps
    return table.v(t * f) / f


@dataclass(frozen=True)
class CondReport:
    t: np.ndarray
    psi_ratio: np.ndarray            # psi(v(t)) t / v(t)
    v_ratios: dict                   # (eps, sign) -> v(t(1+sign eps)) / v(t)
    bounded: bool
    trend: float                     # slope of log psi_ratio against log(1/t)


def cond_check(table: SpeedTable, t_grid, eps_list=(0.1, 0.01)) -> CondReport:
    """psi(v(t)) t / v(t) and v(t(1 +- eps))/v(t) along t_grid.

    The ratio is flagged bounded when it shows no upward trend in log(1/t)
    (slope below 0.05) and its range stays within a factor of 10.
    """
    if not table.finite:
        raise ValueError("cond_check needs Grey's condition to hold")
    t = np.sort(np.asarray(t_grid, float))
    v = np.array([table.v(x) for x in t])
    ratio = np.array([table.psi_fn(vi) for vi in v]) * t / v
    ratios = {}
    for eps in eps_list:
        for sign in (1, -1):
            ts = t * (1 + sign * eps)
            ok = (ts >= table.t_min) & (ts <= table.t_max)
            vals = np.full_like(t, np.nan)
            vals[ok] = [table.v(x) for x in ts[ok]]
            ratios[(eps, sign)] = vals / v
    trend = float(np.polyfit(np.log(1 / t), np.log(ratio), 1)[0]) if len(t) > 1 else 0.0
    bounded = trend < 0.05 and ratio.max() / ratio.min() < 10.0
    return CondReport(t, ratio, ratios, bounded, trend)
