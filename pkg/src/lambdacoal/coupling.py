"""Coupling of the Levy jump process with the CSBPs of the scaled processes
X+ = (1 + eps) X - eps and X- = (1 - eps) X + eps, the domination order between
point processes, and the Monte Carlo experiments built on it.

Up to the stopping time T = T_eps+ ^ T_eps- ^ T_eta ^ horizon every jump of X
gives three atoms sharing one coin index: (1 - eps) Delta / X-(t) at U-(t),
Delta at t, and (1 + eps) Delta / X+(t) at U+(t).  With shared coins the three
lookdown type counts are ordered pathwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .coalescent import _conditional_coins, _SmallAtoms, rate_table, simulate_chain
from .io import write_csv
from .levy import JumpSkeleton, dropped_variance_rate, lamperti, pi_x, simulate_csbp, simulate_levy
from .lookdown import CoinSource, DrivingPoints, run_lookdown
from .measure import BufferedSampler, LambdaMeasure, log_binom
from .speed import SpeedTable, grey_verdict


def scaled_skeleton(skel: JumpSkeleton, eps: float, sign: int) -> JumpSkeleton:
    """Skeleton of (1 + sign eps) X - sign eps."""
    f = 1.0 + sign * eps
    return JumpSkeleton(f * skel.x0 - sign * eps, skel.times, f * skel.jumps, f * skel.drift, skel.cutoff,
                        skel.horizon, f * f * skel.error_variance)


def exit_time(skel: JumpSkeleton, lo: float, hi: float) -> float:
    """inf{s : X_s < lo or X_s > hi}, or inf if X stays in [lo, hi] up to the horizon."""
    starts = np.concatenate([[skel.x0], skel.after])
    knots = np.concatenate([[0.0], skel.times])
    ends = np.concatenate([skel.before, [skel.x0 + skel.drift * skel.horizon + skel.jumps.sum()]])
    up = np.flatnonzero(starts > hi)
    down = np.flatnonzero(ends < lo)
    best = math.inf
    if up.size:
        best = float(knots[up[0]])
    if down.size:
        k = int(down[0])
        cross = knots[k] + (lo - starts[k]) / skel.drift if skel.drift != 0 else knots[k]
        best = min(best, float(max(cross, knots[k])))
    return best


@dataclass(frozen=True)
class DominationWitness:
    """``base`` is dominated by ``dominating``: atom i of base at time t_i maps to atom i
    of dominating at r(t_i), with size p_i <= q_i, for t_i <= horizon."""

    base: DrivingPoints
    dominating: DrivingPoints
    r_pairs: np.ndarray          # (k, 2): base time -> dominating time, starting at (0, 0)
    horizon: float               # validity horizon in base time
    label: str = ""


@dataclass(frozen=True)
class DominationResult:
    ok: bool
    kind: str = ""               # "time", "size" or "count"
    index: int = -1
    time: float = math.nan
    events_checked: int = 0


def verify_domination(w: DominationWitness, coins: CoinSource, n: int, runs=None) -> DominationResult:
    """Atom alignment, size order, and N^dominating(r(s)) <= N^base(s) at every atom time
    s <= horizon, with both lookdowns reading the same coins.

    ``runs`` may pass precomputed (base, dominating) lookdown runs on those coins.
    """
    r = w.r_pairs
    if r.size and (r[0, 0] != 0 or r[0, 1] != 0):
        return DominationResult(False, "time", 0, 0.0)
    if np.any(np.diff(r[:, 0]) <= 0) or np.any(np.diff(r[:, 1]) <= 0):
        k = int(np.flatnonzero((np.diff(r[:, 0]) <= 0) | (np.diff(r[:, 1]) <= 0))[0])
        return DominationResult(False, "time", k, float(r[k + 1, 0]))
    keep = w.base.times <= w.horizon
    m = int(keep.sum())
    if len(w.dominating) < m:
        return DominationResult(False, "time", len(w.dominating), math.nan)
    base_t, dom_t = w.base.times[:m], w.dominating.times[:m]
    mapped = np.interp(base_t, r[:, 0], r[:, 1])
    bad = np.flatnonzero(~np.isclose(mapped, dom_t, rtol=1e-12, atol=0.0))
    if bad.size:
        return DominationResult(False, "time", int(bad[0]), float(base_t[bad[0]]))
    if not np.array_equal(w.base.coin_index[:m], w.dominating.coin_index[:m]):
        return DominationResult(False, "time", -1, math.nan)
    bad = np.flatnonzero(w.base.sizes[:m] > w.dominating.sizes[:m])
    if bad.size:
        return DominationResult(False, "size", int(bad[0]), float(base_t[bad[0]]))
    if m == 0:
        return DominationResult(True)
    if runs is None:
        runs = (run_lookdown(w.base, n, float(base_t[-1]), coins),
                run_lookdown(w.dominating, n, float(dom_t[-1]), coins))
    b, d = runs
    nb = _counts_after(b, base_t)
    nd = _counts_after(d, dom_t)
    bad = np.flatnonzero(nd > nb)
    if bad.size:
        return DominationResult(False, "count", int(bad[0]), float(base_t[bad[0]]), m)
    return DominationResult(True, events_checked=m)


def _counts_after(run, times) -> np.ndarray:
    """Type count right after each of the given atom times."""
    k = np.searchsorted(run.event_times, times, side="right")
    full = np.concatenate([[run.initial.type_count], run.counts])
    return full[k]


@dataclass
class CouplingTranscript:
    seed: int
    eps: float
    eta: float
    n: int
    skeleton: JumpSkeleton
    T_plus: float
    T_minus: float
    T_eta: float
    T_stop: float
    jump_times: np.ndarray           # X-time of the jumps strictly before T_stop
    U_plus: np.ndarray               # U+ at those jumps
    U_minus: np.ndarray
    pi_x: DrivingPoints
    pi_z_plus: DrivingPoints
    pi_z_minus: DrivingPoints
    N_minus: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))   # N^{Z-} o U-
    N_base: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))    # N^pi
    N_plus: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))    # N^{Z+} o U+
    size_violations: int = 0         # jumps breaking (1-eps)D/X- <= D <= (1+eps)D/X+
    clock_violations: int = 0        # points breaking t/(1+eps) <= U+-(t) <= t/(1-eps)
    lower: DominationResult | None = None     # pi^{Z-} below pi
    upper: DominationResult | None = None     # pi below pi^{Z+}

    @property
    def ok(self) -> bool:
        return (self.size_violations == 0 and self.clock_violations == 0
                and bool(self.lower and self.lower.ok) and bool(self.upper and self.upper.ok))

    @property
    def error_budget(self) -> float:
        """Variance of the dropped small jumps accumulated up to T_stop."""
        h = self.skeleton.horizon
        return self.skeleton.error_variance * min(self.T_stop, h) / h if h > 0 else 0.0

    def write(self, directory) -> list:
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = [self.skeleton.write_csv(d / "skeleton.csv")]
        for name, pts in (("pi_x", self.pi_x), ("pi_z_plus", self.pi_z_plus), ("pi_z_minus", self.pi_z_minus)):
            out.append(write_csv(d / f"{name}.csv", ["t", "p", "coin_index"],
                                 zip(pts.times, pts.sizes, pts.coin_index)))
        out.append(write_csv(d / "N_paths.csv", ["t", "U_minus", "U_plus", "N_minus", "N", "N_plus"],
                             zip(self.jump_times, self.U_minus, self.U_plus, self.N_minus, self.N_base, self.N_plus)))
        out.append(write_csv(d / "stopping_times.csv", ["name", "value"],
                             [("T_eps_plus", self.T_plus), ("T_eps_minus", self.T_minus), ("T_eta", self.T_eta),
                              ("T_stop", self.T_stop)]))
        return out


def build_coupling(measure: LambdaMeasure, eps: float, eta: float = 1.0, horizon: float = 1.0,
                   cutoff: float = 1e-3, seed: int = 0, n: int = 64) -> CouplingTranscript:
    """One coupled path: X from ``simulate_levy``, the scaled processes, stopping
    times, exact Lamperti clocks, the three point processes on [0, T_stop), the
    pathwise size and clock checks, and both domination checks with shared coins."""
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must lie in (0, 1]")
    skel = simulate_levy(measure, 1.0, horizon, cutoff, seed)
    plus, minus = scaled_skeleton(skel, eps, 1), scaled_skeleton(skel, eps, -1)
    T_plus = exit_time(plus, 1.0 - eps, 1.0 + eps)
    T_minus = exit_time(minus, 1.0 - eps, 1.0 + eps)
    big = np.flatnonzero(skel.jumps > eta)
    T_eta = float(skel.times[big[0]]) if big.size else math.inf
    T_stop = min(T_plus, T_minus, T_eta, horizon)
    m = int(np.searchsorted(skel.times, T_stop, side="left"))     # jumps strictly before T_stop
    times, delta = skel.times[:m], skel.jumps[:m]
    Zp, Zm = lamperti(plus), lamperti(minus)
    U_plus, U_minus = Zp.u_knots[1:m + 1], Zm.u_knots[1:m + 1]
    Xp, Xm = plus.after[:m], minus.after[:m]
    p_plus, p_minus = (1.0 + eps) * delta / Xp, (1.0 - eps) * delta / Xm
    size_bad = int(np.sum((p_minus > delta) | (delta > p_plus)))
    grid = np.concatenate([times, np.linspace(0.0, T_stop, 33)[1:]]) if math.isfinite(T_stop) else times
    up, um = Zp.U_many(grid), Zm.U_many(grid)
    tol = 1e-12 * grid
    clock_bad = int(np.sum((np.minimum(up, um) < grid / (1 + eps) - tol) | (np.maximum(up, um) > grid / (1 - eps) + tol)))
    idx = np.arange(m)
    base = DrivingPoints(times, delta, idx, {}, "pi_X", skel.error_variance)
    zp = DrivingPoints(U_plus, np.minimum(p_plus, 1.0), idx, {}, "pi_Z", skel.error_variance)
    zm = DrivingPoints(U_minus, p_minus, idx, {}, "pi_Z", skel.error_variance)
    coins = CoinSource(seed)
    if m:
        shared = coins.uniforms(np.arange(1, n + 1), idx)
        runs = {key: run_lookdown(pts, n, float(pts.times[-1]), coins, coin_matrix=shared) for key, pts in
                (("base", base), ("plus", zp), ("minus", zm))}
        N_base = _counts_after(runs["base"], times)
        N_plus = _counts_after(runs["plus"], U_plus)
        N_minus = _counts_after(runs["minus"], U_minus)
    else:
        runs = {"base": None, "plus": None, "minus": None}
        N_base = N_plus = N_minus = np.zeros(0, dtype=np.int64)
    u_stop_minus = float(Zm.U(T_stop)) if m else 0.0
    lower = verify_domination(DominationWitness(zm, base, np.vstack([[0.0, 0.0], np.column_stack([U_minus, times])]),
                                                u_stop_minus, "pi_Z- < pi"), coins, n, (runs["minus"], runs["base"]))
    upper = verify_domination(DominationWitness(base, zp, np.vstack([[0.0, 0.0], np.column_stack([times, U_plus])]),
                                                T_stop, "pi < pi_Z+"), coins, n, (runs["base"], runs["plus"]))
    return CouplingTranscript(seed, eps, eta, n, skel, T_plus, T_minus, T_eta, T_stop, times, U_plus, U_minus,
                              pi_x(skel), zp, zm, N_minus, N_base, N_plus, size_bad, clock_bad, lower, upper)


def tightest_cutoff(measure: LambdaMeasure, horizon: float, budget: float = 1e-3, start: float = 0.1) -> float:
    """Halve the cutoff until the dropped variance horizon * Lambda((0, cutoff)) is below ``budget``."""
    c = start
    while horizon * dropped_variance_rate(measure, c) >= budget:
        c /= 2.0
        if c < 1e-12:
            raise ValueError("no cutoff meets the budget")
    return c


# --------------------------------------------------------------------------
# Sandwich and marginal-law experiments


def sandwich_bounds(table: SpeedTable, t: float, eps: float) -> tuple[float, float]:
    lo = table.v(t * (1 + eps) / (1 - eps)) / (1 + eps) ** 2
    hi = table.v(t * (1 - eps) / (1 + eps)) / (1 - eps) ** 2
    return lo, hi


@dataclass(frozen=True)
class SandwichReport:
    branch: str                  # "finite" or "no_saturation"
    t: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    coverage: np.ndarray
    mean_count: np.ndarray
    nondecreasing: bool
    n_values: tuple = ()
    min_counts: tuple = ()
    mean_counts: tuple = ()


def _chain_counts(measure, n, ts, runs, rng) -> np.ndarray:
    ts = np.sort(np.asarray(ts, float))
    out = np.empty((runs, len(ts)), dtype=np.int64)
    tab = rate_table(measure)
    for r in range(runs):
        path = simulate_chain(n, measure, float(ts[-1]), rng, rates=tab).path
        k = np.searchsorted(path.times, ts, side="right")
        out[r] = path.counts[k - 1]
    return out


def sandwich_experiment(measure: LambdaMeasure, eps: float, t_list, n: int, runs: int, seed: int,
                        table: SpeedTable | None = None, n_list=(1000, 10000)) -> SandwichReport:
    """Coverage of N(t) by [v(t(1+eps)/(1-eps))/(1+eps)^2, v(t(1-eps)/(1+eps))/(1-eps)^2].

    If Grey's condition fails the no-saturation branch runs instead: N(t) at the
    smallest t for each n in ``n_list``, whose mean and minimum must increase with n.
    """
    ts = np.sort(np.asarray(t_list, float))[::-1]
    rng = np.random.default_rng(seed)
    if grey_verdict(measure) != "extinct":
        mins, means = [], []
        for m in n_list:
            c = _chain_counts(measure, m, [ts[-1]], runs, rng)[:, 0]
            mins.append(int(c.min()))
            means.append(float(c.mean()))
        grows = all(a < b for a, b in zip(mins, mins[1:])) and all(a < b for a, b in zip(means, means[1:]))
        return SandwichReport("no_saturation", ts, np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), grows,
                              tuple(n_list), tuple(mins), tuple(means))
    table = table or SpeedTable(measure, t_min=min(1e-6, ts[-1] / 10), t_max=max(1.0, ts[0] * 10))
    bounds = np.array([sandwich_bounds(table, t, eps) for t in ts])
    counts = _chain_counts(measure, n, ts, runs, rng)[:, ::-1]     # columns follow ts (decreasing t)
    cover = np.mean((counts >= bounds[:, 0]) & (counts <= bounds[:, 1]), axis=0)
    return SandwichReport("finite", ts, bounds[:, 0], bounds[:, 1], cover, counts.mean(axis=0),
                          bool(np.all(np.diff(cover) >= 0)))


@dataclass(frozen=True)
class MarginalReport:
    t: float
    n: int
    runs: int
    pvalue: float
    mean_levy: float
    mean_chain: float
    mean_levy_2n: float          # saturation check: same atoms and coins with 2n levels
    pvalue_reversed: float       # time-reversed atoms against the forward ones


def _chi2(a, b) -> float:
    cats = np.union1d(a, b)
    table = np.array([[np.sum(a == c) for c in cats], [np.sum(b == c) for c in cats]])
    if table.shape[1] < 2:
        return 1.0
    return float(stats.chi2_contingency(table).pvalue)


def with_small_jumps(points: DrivingPoints, measure: LambdaMeasure, cutoff: float, horizon: float,
                     levels: int, rng) -> DrivingPoints:
    """``points`` plus the jumps below ``cutoff`` in which two or more of the first
    ``levels`` levels participate (exact thinning, coins attached as overrides).

    Jumps below the cutoff touching at most one of those levels cannot change the
    type count of any lookdown with at most ``levels`` levels, so the result drives
    such lookdowns exactly as the untruncated jump process would.
    """
    small = _SmallAtoms(measure, cutoff, rng)
    st, sx, sc = [], [], []
    t = 0.0
    while (nxt := small.next(t, levels, horizon)) is not None:
        t, x = nxt
        st.append(t)
        sx.append(x)
        sc.append(_conditional_coins(rng, levels, x))
    if not st:
        return points
    times = np.concatenate([points.times, st])
    order = np.argsort(times, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    overrides = {int(rank[k]): v for k, v in points.overrides.items()}
    overrides.update({int(rank[len(points) + q]): c for q, c in enumerate(sc)})
    sizes = np.concatenate([points.sizes, sx])[order]
    return DrivingPoints(times[order], sizes, None, overrides, points.source, 0.0)


def marginal_law_test(measure: LambdaMeasure, t: float, n: int, runs: int, seed: int,
                      cutoff: float = 1e-3) -> MarginalReport:
    """Law of the lookdown type count driven by the jumps of X at time t against the
    chain's N(t).  Also compares against the time-reversed jump list on [0, t].

    Jumps below ``cutoff`` enter through ``with_small_jumps`` for 2n levels, so the
    n- and 2n-level counts are exact in law.
    """
    rng = np.random.default_rng([seed, 0x3A7])
    if t == 0:
        return MarginalReport(0.0, n, runs, 1.0, float(n), float(n), float(2 * n), 1.0)
    fwd, rev, fwd2 = np.empty(runs, np.int64), np.empty(runs, np.int64), np.empty(runs, np.int64)
    seeds = np.random.SeedSequence(seed).generate_state(runs, dtype=np.uint64)
    for r in range(runs):
        s = int(seeds[r])
        skel = simulate_levy(measure, 1.0, t, cutoff, s)
        pts = with_small_jumps(pi_x(skel), measure, cutoff, t, 2 * n, np.random.default_rng([s, 0x5A11]))
        coins = CoinSource(s)
        fwd[r] = run_lookdown(pts, n, t, coins).n_at(t)
        fwd2[r] = run_lookdown(pts, 2 * n, t, coins).n_at(t)
        # each atom keeps its own coins, so the coin columns are met in reverse order
        last = len(pts) - 1
        back = DrivingPoints((t - pts.times)[::-1], pts.sizes[::-1], pts.coin_index[::-1],
                             {last - k: v for k, v in pts.overrides.items()}, "pi_X")
        rev[r] = run_lookdown(back, n, t, coins).n_at(t)
    chain = _chain_counts(measure, n, [t], runs, rng)[:, 0]
    return MarginalReport(t, n, runs, _chi2(fwd, chain), float(fwd.mean()), float(chain.mean()),
                          float(fwd2.mean()), _chi2(fwd, rev))


# --------------------------------------------------------------------------
# Saturated type count of the CSBP lookdown


_BATCH = 64


def _cond_heads(rng, b: int, p: float) -> int:
    """K ~ Bin(b, p) conditioned on K >= 2, by inverting the upper tail."""
    target = (1.0 - rng.random()) * special.bdtrc(1, b, p)
    for lo in range(2, b + 1, 32):
        ks = np.arange(lo, min(lo + 32, b + 1))
        hit = np.flatnonzero(special.bdtrc(ks, b, p) <= target)
        if hit.size:
            return int(ks[hit[0]])
    return b


def csbp_type_count(path, t: float, n: int, rng, sampler: BufferedSampler | None = None,
                    small_mass: float = 0.0) -> int:
    """Type count at CSBP time t of an n-level lookdown driven by the normalised
    jumps of Z, through its backward (ancestral) chain.

    Started from n lineages at time t and run back to 0: at an atom p the
    lineages' coins give K ~ Bin(b, p) heads and b drops by (K - 1)+.  This is
    the law of the number of blocks of the ancestral partition at time 0.  Jumps
    below the skeleton cutoff enter as a Poisson stream of intensity nu(dD) ds in
    X-time given the path, by thinning against C(b,2) Lambda((0,c)) / X_min^2
    (``sampler`` draws from Lambda on (0, c), of mass ``small_mass``).
    """
    if path.extinct and t >= path.zeta:
        return 0
    S = path.U_inv(t)
    skel = path.skeleton
    d = skel.drift
    k_last = int(np.searchsorted(path.knots, S, side="right")) - 1
    b = n
    for k in range(k_last, -1, -1):
        seg_lo = path.knots[k]
        seg_hi = S if k == k_last else path.knots[k + 1]
        y = path.start_values[k]
        if sampler is not None and small_mass > 0 and b >= 2:
            s = seg_hi
            x_min = y + d * (seg_hi - seg_lo)
            while b >= 2:
                # a batch of proposals at the rate for the current b, which bounds
                # the intensity for every smaller b, so it is reused after a merger
                pair = b * (b - 1) / 2.0
                s_prop = s - np.cumsum(rng.exponential(x_min * x_min / (pair * small_mass), _BATCH))
                D = sampler.draw_many(_BATCH)
                p = D / (y + d * (s_prop - seg_lo) + D)
                scale = x_min * x_min / (pair * D * D)
                u = rng.random(_BATCH)
                end = int(np.searchsorted(-s_prop, -seg_lo))      # proposals with s_prop > seg_lo
                j = 0
                while b >= 2:
                    hit = np.flatnonzero(u[j:end] < special.bdtrc(1, b, p[j:end]) * scale[j:end])
                    if hit.size == 0:
                        break
                    j += int(hit[0])
                    b -= _cond_heads(rng, b, float(p[j])) - 1
                    j += 1
                if end < _BATCH:
                    break
                s = s_prop[-1]
        if k >= 1 and b >= 2:
            p = skel.jumps[k - 1] / y
            heads = rng.binomial(b, p)
            if heads >= 2:
                b -= heads - 1
    return b


@dataclass(frozen=True)
class PoissonCountReport:
    t: float
    n: int
    runs: int
    cutoff: float
    v: float
    mean: float
    var: float
    z_mean: float
    z_var: float
    mean_2n: float               # same paths with 2n lineages; saturation check
    z_saturation: float
    error_budget: float

    @property
    def saturated(self) -> bool:
        return abs(self.z_saturation) <= 3.0

    @property
    def ok(self) -> bool:
        return self.saturated and abs(self.z_mean) <= 3.0 and abs(self.z_var) <= 3.0


def poisson_count_check(measure: LambdaMeasure, t: float, n: int, runs: int, seed: int,
                        cutoff: float = 1e-3, table: SpeedTable | None = None) -> PoissonCountReport:
    """Mean and variance of the CSBP lookdown type count at time t against v(t).

    The count should be Poisson(v(t)); standard errors use the sample fourth
    moment for the variance.  The count at n and 2n lineages on the same paths
    checks saturation.
    """
    table = table or SpeedTable(measure, t_min=min(1e-6, t / 10), t_max=max(1.0, 10 * t))
    v = table.v(t)
    small = dropped_variance_rate(measure, cutoff)
    seeds = np.random.SeedSequence(seed).generate_state(runs, dtype=np.uint64)
    counts, counts2 = np.empty(runs), np.empty(runs)
    for r in range(runs):
        s = int(seeds[r])
        path = simulate_csbp(measure, 1.0, t, cutoff, s)
        rng = np.random.default_rng([s, 0xB0C])
        sampler = BufferedSampler(measure, 0.0, float(np.nextafter(cutoff, 0.0)), 0.0, rng) if small > 0 else None
        counts[r] = csbp_type_count(path, t, n, rng, sampler, small)
        rng2 = np.random.default_rng([s, 0xB0D])
        sampler2 = BufferedSampler(measure, 0.0, float(np.nextafter(cutoff, 0.0)), 0.0, rng2) if small > 0 else None
        counts2[r] = csbp_type_count(path, t, 2 * n, rng2, sampler2, small)
    mean, var = float(counts.mean()), float(counts.var(ddof=1))
    se_mean = math.sqrt(var / runs)
    m4 = float(np.mean((counts - mean) ** 4))
    se_var = math.sqrt(max(m4 - var * var, 0.0) / runs)
    diff = counts2 - counts
    se_diff = float(diff.std(ddof=1)) / math.sqrt(runs) if runs > 1 else math.inf
    z_sat = float(diff.mean()) / se_diff if se_diff > 0 else (0.0 if diff.mean() == 0 else math.inf)
    return PoissonCountReport(t, n, runs, cutoff, v, mean, var, (mean - v) / se_mean if se_mean > 0 else math.inf,
                              (var - v) / se_var if se_var > 0 else math.inf, float(counts2.mean()), z_sat,
                              t * small)
