"""Upper and lower regularity indices of nu, the function h = G + K + M, power-law
bounds on psi and v, and the sparse-interval measure family whose psi oscillates
between two power laws.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize

from .coalescent import rate_table, simulate_chain
from .io import write_csv
from .measure import LambdaMeasure, psi
from .speed import SpeedTable, grey_verdict

DEFAULT_CAP = 200
_CAP_MARGIN = 40.0          # log q past the cap where psi is taken as its asymptote


class CapacityError(ValueError):
    """The requested depth of the sparse family exceeds the cap on m_r."""


# --------------------------------------------------------------------------
# h = G + K + M


@dataclass(frozen=True)
class HTerms:
    G: float
    K: float
    M: float

    @property
    def h(self) -> float:
        return self.G + self.K + self.M


def h_terms(x: float, measure: LambdaMeasure) -> HTerms:
    """G(x) = nu((x, 1]), K(x) = x^-2 int_{y<=x} y^2 nu(dy) and
    M(x) = x^-1 |int_{y<=x} y^3/(1+y^2) nu(dy) - int_{y>x} y/(1+y^2) nu(dy)|.

    The 1/(1+y^2) factors are split off as y/(1+y^2) = y - y^3/(1+y^2), so the
    leading parts are exact power moments and only bounded remainders use quadrature.
    """
    if not 0.0 < x < 1.0:
        raise ValueError("h needs 0 < x < 1")
    G = measure.integrate_power(-2.0, x, 1.0)
    K = measure.integrate_power(0.0, 0.0, x) / (x * x)
    inner = measure.integrate_power(1.0, 0.0, x) - measure.integrate(lambda y: y ** 3 / (1.0 + y * y), 0.0, x)
    outer = measure.integrate_power(-1.0, x, 1.0) - measure.integrate(lambda y: y / (1.0 + y * y), x, 1.0)
    return HTerms(G, K, abs(inner - outer) / x)


def h_of(x: float, measure: LambdaMeasure) -> float:
    return h_terms(x, measure).h


# --------------------------------------------------------------------------
# index estimates


@dataclass(frozen=True)
class IndexReport:
    beta_hat: float
    delta_hat: float
    n: np.ndarray               # grid n = 1..n_max, x = e^-n
    h: np.ndarray
    exponent: np.ndarray        # log h(e^-n) / n
    slope: float                # least-squares slope of log h on n over the last half
    residuals: np.ndarray       # of that fit

    @property
    def x(self) -> np.ndarray:
        return np.exp(-self.n)

    def write_csv(self, path, comments=None):
        return write_csv(path, ["n", "x", "h", "local_exponent"],
                         zip(self.n, self.x, self.h, self.exponent), comments)


def estimate_indices(measure: LambdaMeasure, n_max: int = 100) -> IndexReport:
    """beta_hat and delta_hat as the max and min of log h(e^-n)/n over the last
    half of n = 1..n_max (finite-grid stand-ins for the limsup and liminf).

    Both are clipped to [0, 2], where the true indices lie because x^2 h(x) -> 0;
    the raw exponents stay in the report.
    """
    if n_max < 30:
        raise ValueError("n_max must be >= 30")
    n = np.arange(1, n_max + 1, dtype=float)
    h = np.array([h_of(math.exp(-k), measure) for k in n])
    e = np.log(h) / n
    tail = n >= n_max / 2
    coef = np.polyfit(n[tail], np.log(h[tail]), 1)
    resid = np.log(h[tail]) - np.polyval(coef, n[tail])
    clip = lambda y: float(min(max(y, 0.0), 2.0))
    return IndexReport(clip(e[tail].max()), clip(e[tail].min()), n, h, e, float(coef[0]), resid)


# --------------------------------------------------------------------------
# sparse-interval family


Schedule = float | Sequence[float] | Callable[[int], float]


def _schedule_fn(schedule: Schedule) -> Callable[[int], float]:
    if callable(schedule):
        return schedule
    if np.isscalar(schedule):
        return lambda r: float(schedule)
    seq = [float(s) for s in schedule]
    if not seq:
        raise ValueError("empty schedule")
    return lambda r: seq[min(r, len(seq) - 1)]


def limsup_schedule(beta: float, first: int = 11) -> Callable[[int], float]:
    """eps_r = 0 except at odd r = first + 2k, where eps_r = (beta - 1)(1 - 1/(k + 7)).

    The spikes approach beta - 1 from below and sit so far apart in n that the
    gaps they open have summable weight.
    """
    if first % 2 == 0:
        raise ValueError("spikes must sit at odd r (they widen the gaps)")

    def eps(r: int) -> float:
        if r < first or (r - first) % 2:
            return 0.0
        k = (r - first) // 2
        return (beta - 1.0) * (1.0 - 1.0 / (k + 7))

    return eps


@dataclass(frozen=True)
class SparseFamily:
    """nu(dx) = sum_k 1_{J_{n_k}}(x) x^{-beta-1} dx with J_n = (e^{-n-1}, e^{-n}].

    m_0 = 1, m_{r+1} = m_r + round(e^{eps_r m_r}); n runs through m_{2r}, ..., m_{2r+1}
    in unit steps and then jumps to m_{2r+2}.  The measure is materialised down to
    x = e^{-cap}.  Below that, a block in progress continues as x^{-beta-1} on
    (0, e^{-cap}], while a gap in progress is carried analytically by ``u``
    (psi is linear there).  ``m_virtual`` follows the recursion in floating point
    past the cap for the series verdict.
    """

    beta: float
    m: tuple[int, ...]               # m_r <= cap
    m_virtual: tuple[float, ...]     # m_r continued past the cap (may end in inf)
    eps: tuple[float, ...]           # eps_r for each step of m_virtual
    cap: int
    measure: LambdaMeasure

    @property
    def blocks(self) -> list[tuple[int, int]]:
        """(m_{2r}, m_{2r+1}) index ranges of the occupied intervals, truncated at the cap."""
        out = []
        for r in range(0, len(self.m), 2):
            end = self.m[r + 1] if r + 1 < len(self.m) else self.cap
            out.append((self.m[r], min(end, self.cap)))
        return out

    @property
    def runs(self) -> list[tuple[int, int]]:
        """Blocks with touching neighbours merged: occupied x = (e^{-(b+1)}, e^{-a}]."""
        out = []
        for a, b in self.blocks:
            if out and out[-1][1] + 1 >= a:
                out[-1] = (out[-1][0], b)
            else:
                out.append((a, b))
        return out

    @property
    def cap_in_gap(self) -> bool:
        """True when a gap starts at or before the cap and runs far past it."""
        return len(self.m) % 2 == 0 and self.m_virtual[len(self.m)] > self.cap + _CAP_MARGIN

    @property
    def gap_end(self) -> float:
        """n at which the gap in progress at the cap ends (m_{r+1} past the cap)."""
        return self.m_virtual[len(self.m)] if self.cap_in_gap else float(self.cap)

    @property
    def n_values(self) -> np.ndarray:
        return np.concatenate([np.arange(a, b + 1) for a, b in self.blocks])

    def gap_log_terms(self) -> np.ndarray:
        """log of (n_l - n_{l-1}) e^{-n_{l-1}(beta-1)} at each gap n_{l-1} = m_{2r+1};
        the series of these terms decides whether the coalescent comes down."""
        out = []
        for r in range(1, len(self.eps), 2):
            mr, ls = self.m_virtual[r], self.eps[r] * self.m_virtual[r]
            if not math.isfinite(mr):
                break
            step = math.log(max(1, round(math.exp(ls)))) if ls < 700 else ls
            out.append(step - mr * (self.beta - 1.0))
        return np.array(out)

    def series_verdict(self, settle: float = -10.0) -> str:
        """'converges' when the last (up to three) gap terms decrease and the last is
        below e^settle, 'diverges' when they all stay above e^-1, else 'inconclusive'."""
        g = self.gap_log_terms()
        if g.size < 2:
            return "inconclusive"
        last = g[-3:]
        if np.all(np.diff(last) < 0) and last[-1] < settle:
            return "converges"
        if np.all(last >= -1.0):
            return "diverges"
        return "inconclusive"

    def grey_verdict(self) -> str:
        """Extinction verdict from the gap series; a finite q window cannot see the gaps."""
        return {"converges": "extinct", "diverges": "non_extinct"}.get(self.series_verdict(), "inconclusive")

    def u(self, t: float) -> float:
        """u(t) = int_t^infty dq / psi(q) with the cap continuation described above."""
        if t <= 0:
            raise ValueError("t must be positive")
        top = self.cap + _CAP_MARGIN
        marks = sorted({float(x) for a, b in self.runs for x in (a, b + 1)} | {float(self.cap), top})
        lo = math.log(t)
        edges = [lo] + [x for x in marks if x > lo]
        f = lambda s: math.exp(s) / psi(math.exp(s), self.measure)
        total = sum(_quad(f, x, y) for x, y in zip(edges[:-1], edges[1:]))
        q = math.exp(top)
        if self.cap_in_gap:
            # all mass sits above 1/q, so psi(q) = C q - nu(total) with C = int x nu(dx)
            c = self.measure.integrate_power(-1.0, 0.0, 1.0)
            total += (self.gap_end - top) / c
        else:
            total += q / (psi(q, self.measure) * (self.beta - 1.0))
        return total

    def v(self, t: float) -> float:
        """Inverse of ``u``: the q with u(q) = t."""
        g = lambda s: math.log(self.u(math.exp(s))) - math.log(t)
        lo, hi = -5.0, 5.0
        while g(lo) < 0:
            lo -= 10.0
        while g(hi) > 0:
            hi += 10.0
            if hi > self.cap:
                raise CapacityError(f"v({t}) lies beyond the cap")
        return math.exp(optimize.brentq(g, lo, hi, xtol=1e-12))


def _quad(f, a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-10, limit=400)[0]


def build_sparse_family(beta: float, schedule: Schedule, cap: int = DEFAULT_CAP,
                          levels: int | None = None) -> SparseFamily:
    """Materialise the sparse family down to x = e^{-cap}.

    ``levels`` asks for m_0..m_{levels-1}; a CapacityError is raised if they do
    not all fit under the cap.
    """
    if not 1.0 < beta < 2.0:
        raise ValueError("beta must lie in (1, 2)")
    eps_of = _schedule_fn(schedule)
    mv, eps = [1.0], []
    while math.isfinite(mv[-1]) and len(mv) < 4096:
        r = len(mv) - 1
        e = eps_of(r)
        if not 0.0 <= e <= beta - 1.0:
            raise ValueError(f"schedule entry eps_{r}={e} outside [0, beta-1]")
        eps.append(e)
        ls = e * mv[-1]
        mv.append(mv[-1] + max(1, round(math.exp(ls))) if ls < 700 else math.inf)
        if sum(x > cap for x in mv) >= 8:
            break
    m = tuple(int(x) for x in mv if x <= cap)
    if levels is not None and len(m) < levels:
        raise CapacityError(f"m_{len(m)} exceeds the cap {cap}; asked for {levels} levels")
    fam = SparseFamily(beta, m, tuple(mv), tuple(eps), cap, LambdaMeasure.zero())
    pieces = [[math.exp(-(b + 1)) if b < cap else math.exp(-cap), math.exp(-a)] for a, b in fam.runs]
    if not fam.cap_in_gap:
        pieces[-1][0] = 0.0
    measure = LambdaMeasure.power_pieces([(lo, hi, 1.0 - beta, 1.0) for lo, hi in pieces])
    return SparseFamily(beta, m, tuple(mv), tuple(eps), cap, measure)


# --------------------------------------------------------------------------
# oscillation of u


@dataclass(frozen=True)
class OscillationRow:
    r: int
    t: float
    u: float
    exponent: float              # log u(t) / log(1/t)
    regime: str                  # "inside" (t = e^{m_2r}) or "boundary" (t = e^{m_{2r+1}+1})


@dataclass(frozen=True)
class OscillationReport:
    rows: tuple[OscillationRow, ...]
    psi_ratio_min: float         # psi(q)/q^beta over 1/q in the occupied intervals
    psi_ratio_max: float

    @property
    def spread(self) -> float:
        e = [row.exponent for row in self.rows]
        return max(e) - min(e)

    def separation(self, r: int) -> float:
        """Inside exponent minus boundary exponent at block r."""
        d = {row.regime: row.exponent for row in self.rows if row.r == r}
        return d["inside"] - d["boundary"]

    def write_csv(self, path, comments=None):
        return write_csv(path, ["r", "t", "u", "local_exponent", "regime"],
                         ((x.r, x.t, x.u, x.exponent, x.regime) for x in self.rows), comments)


def oscillation_experiment(fam: SparseFamily, r_max: int = 2) -> OscillationReport:
    """u at t = e^{m_2r} and t = e^{m_{2r+1}+1} for r = 1..r_max, with local exponents."""
    if 2 * r_max + 1 >= len(fam.m):
        raise CapacityError(f"family depth does not reach block r={r_max}")
    rows = []
    for r in range(1, r_max + 1):
        for regime, logt in (("inside", fam.m[2 * r]), ("boundary", fam.m[2 * r + 1] + 1)):
            t = math.exp(logt)
            u = fam.u(t)
            rows.append(OscillationRow(r, t, u, math.log(u) / -logt, regime))
    # psi against q^beta where 1/q lies in an occupied interval
    qs = np.exp(np.concatenate([np.linspace(a + 0.05, b + 0.95, 4) for a, b in fam.blocks]))
    ratio = np.array([psi(float(q), fam.measure) / q ** fam.beta for q in qs])
    return OscillationReport(tuple(rows), float(ratio.min()), float(ratio.max()))


# --------------------------------------------------------------------------
# power-law bounds on v and N, and the two-term control of psi


@dataclass(frozen=True)
class BoundsReport:
    t: np.ndarray
    upper_scaled: np.ndarray     # t^{1/(beta_hat-1+eps)} v(t)
    lower_scaled: np.ndarray     # t^{1/(delta_hat-eps-1)} v(t), empty if skipped
    upper_trend: bool            # increases as t decreases
    lower_trend: bool | None     # decreases as t decreases; None if skipped
    notice: str
    mc_t: np.ndarray
    mc_upper: np.ndarray         # t^{1/(beta_hat-1+eps)} E N(t)
    mc_lower: np.ndarray
    mc_upper_trend: bool | None
    mc_lower_trend: bool | None


def _increasing_as_t_decreases(t, y) -> bool:
    order = np.argsort(t)[::-1]
    return bool(np.all(np.diff(np.asarray(y)[order]) > 0))


def powerlaw_bounds_check(source, report: IndexReport, t_grid, eps: float = 0.1,
                          table: SpeedTable | None = None, mc_t=(), n: int = 10_000, runs: int = 20,
                          seed: int = 0) -> BoundsReport:
    """Trend tests for t^{1/(beta-1+eps)} v(t) -> infinity and t^{1/(delta-eps-1)} v(t) -> 0,
    and the same scalings of the mean block count E N(t) at the times ``mc_t``.

    ``source`` is a LambdaMeasure, a psi callable (no Monte Carlo part) or an
    SparseFamily, which supplies its own v and extinction verdict because its
    gaps lie outside any finite q window."""
    if isinstance(source, SparseFamily):
        measure, verdict, v_of_t = source.measure, source.grey_verdict(), source.v
    else:
        measure = source if isinstance(source, LambdaMeasure) else None
        verdict, v_of_t = grey_verdict(source), None
    if measure is None and len(mc_t):
        raise ValueError("the Monte Carlo part needs a LambdaMeasure")
    if verdict != "extinct":
        raise ValueError("power-law bounds need Grey's condition (verdict 'extinct')")
    t = np.sort(np.asarray(t_grid, float))[::-1]
    if v_of_t is None:
        table = table or SpeedTable(source, t_min=min(1e-6, t[-1]), t_max=max(1.0, t[0]))
        v_of_t = table.v
    v = np.array([v_of_t(s) for s in t])
    a_up = 1.0 / (report.beta_hat - 1.0 + eps)
    up = t ** a_up * v
    notice = ""
    if report.delta_hat > 1.0 + eps:
        a_lo = 1.0 / (report.delta_hat - eps - 1.0)
        lo = t ** a_lo * v
        lo_trend = _increasing_as_t_decreases(t, -lo)
    else:
        a_lo, lo, lo_trend = None, np.zeros(0), None
        notice = f"lower bound skipped: delta_hat={report.delta_hat:.3f} is not above 1 + eps"
    mc_t = np.sort(np.asarray(mc_t, float))[::-1]
    mc_up = mc_lo = np.zeros(0)
    mc_up_trend = mc_lo_trend = None
    if mc_t.size:
        rng = np.random.default_rng(seed)
        tab = rate_table(measure)
        counts = np.zeros(mc_t.size)
        for _ in range(runs):
            path = simulate_chain(n, measure, float(mc_t[0]), rng, rates=tab).path
            k = np.searchsorted(path.times, mc_t, side="right")
            counts += path.counts[k - 1]
        mean = counts / runs
        mc_up = mc_t ** a_up * mean
        mc_up_trend = _increasing_as_t_decreases(mc_t, mc_up)
        if a_lo is not None:
            mc_lo = mc_t ** a_lo * mean
            mc_lo_trend = _increasing_as_t_decreases(mc_t, -mc_lo)
    return BoundsReport(t, up, lo, _increasing_as_t_decreases(t, up), lo_trend, notice, mc_t, mc_up, mc_lo,
                        mc_up_trend, mc_lo_trend)


@dataclass(frozen=True)
class ControlReport:
    q: np.ndarray
    psi: np.ndarray
    two_term: np.ndarray         # q^2 int_{[0,1/q]} x^2 nu + q int_{(1/q,1]} x nu
    ratio_min: float             # of psi / two_term; the Taylor bounds give [1/6, 1]
    ratio_max: float
    c_lower: float               # min over q of psi / q^{delta_hat - eps}
    c_upper: float               # max over q of psi / q^{beta_hat + eps}
    upper_settles: bool          # psi / q^{beta_hat+eps} at the top of the grid is below its grid max
    lower_settles: bool
    grey: str
    beta_at_least_one: bool | None   # None unless grey == 'extinct'

    @property
    def ok(self) -> bool:
        return (1.0 / 6.0 <= self.ratio_min and self.ratio_max <= 1.0 and self.upper_settles
                and self.lower_settles and self.beta_at_least_one is not False)


def two_term_psi(q: float, measure: LambdaMeasure) -> float:
    """q^2 int_{[0,1/q]} x^2 nu(dx) + q int_{(1/q,1]} x nu(dx)."""
    c = min(1.0 / q, 1.0)
    return q * q * measure.integrate_power(0.0, 0.0, c) + q * measure.integrate_power(-1.0, c, 1.0)


def psi_control_check(measure: LambdaMeasure, report: IndexReport, q_grid, eps: float = 0.1) -> ControlReport:
    """psi against its two-term control on a large-q grid, and the constants of
    c_lo q^{delta_hat-eps} <= psi(q) <= c_hi q^{beta_hat+eps} fitted on the grid."""
    q = np.sort(np.asarray(q_grid, float))
    if q[0] < 1e2:
        raise ValueError("q_grid must lie in the large-q regime (min >= 1e2)")
    p = np.array([psi(float(x), measure) for x in q])
    two = np.array([two_term_psi(float(x), measure) for x in q])
    ratio = p / two
    up = p / q ** (report.beta_hat + eps)
    lo = p / q ** (report.delta_hat - eps)
    top = q >= q[len(q) // 2]
    grey = grey_verdict(measure)
    return ControlReport(q, p, two, float(ratio.min()), float(ratio.max()), float(lo.min()), float(up.max()),
                         bool(up[-1] <= up[~top].max()), bool(lo[-1] >= lo[~top].min()), grey,
                         report.beta_hat >= 1.0 if grey == "extinct" else None)


# --------------------------------------------------------------------------
# bundled measures


def bundled_measures(cap: int = DEFAULT_CAP) -> dict[str, LambdaMeasure]:
    """Beta(2-a, a) for a in {1.2, 1.5, 1.8}, the uniform measure, atoms at 0.2, 0.5
    and 0.9, and sparse families (beta = 1.5) with eps = 0, 0.3 and beta - 1."""
    out = {f"beta_alpha_{a}": LambdaMeasure.beta_alpha(a) for a in (1.2, 1.5, 1.8)}
    out["uniform"] = LambdaMeasure.uniform()
    out.update({f"atom_{x}": LambdaMeasure.atom(x, 1.0) for x in (0.2, 0.5, 0.9)})
    for e in (0.0, 0.3, 0.5):
        out[f"sparse_eps_{e}"] = build_sparse_family(1.5, e, cap=cap).measure
    return out

