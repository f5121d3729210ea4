"""Spectrally positive Levy process with Levy measure nu = x^-2 Lambda(dx), its
Lamperti time change into a CSBP, and the point processes of (normalised) jumps.

Jumps below ``cutoff`` are dropped and their compensator is kept in the drift,
so X is a pure-jump path, linear between jumps.  Sizes are drawn per dyadic
size band [2^-k-1, 2^-k) from a generator keyed by (seed, chunk, band): lowering
the cutoff adds bands but leaves the jumps above the old cutoff unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .io import write_csv
from .lookdown import DrivingPoints
from .measure import LambdaMeasure, sample_weighted, weighted_mass

MAX_EXPECTED_JUMPS = 5e7


def _bands(cutoff: float) -> list[tuple[int, float, float]]:
    """(band index, lo, hi) covering [cutoff, 1]; band 0 is [1/2, 1], band k >= 1 is [2^-k-1, 2^-k)."""
    out = [(0, 0.5, 1.0)]
    k = 1
    while 2.0 ** -k > cutoff:
        out.append((k, 2.0 ** -(k + 1), float(np.nextafter(2.0 ** -k, 0.0))))
        k += 1
    return out


@dataclass(frozen=True)
class JumpSkeleton:
    """X_s = x0 + drift s + sum of jumps up to s, for 0 <= s <= horizon."""

    x0: float
    times: np.ndarray
    jumps: np.ndarray
    drift: float
    cutoff: float
    horizon: float
    error_variance: float = 0.0      # horizon * int_{(0,cutoff)} x^2 nu(dx), the dropped part

    def __post_init__(self):
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("jump times must be strictly increasing")

    @property
    def after(self) -> np.ndarray:
        """X right after each jump."""
        return self.x0 + self.drift * self.times + np.cumsum(self.jumps)

    @property
    def before(self) -> np.ndarray:
        """X right before each jump."""
        return self.after - self.jumps

    def value(self, s: float) -> float:
        """Right-continuous X_s."""
        if not 0.0 <= s <= self.horizon:
            raise ValueError(f"s={s} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.times, s, side="right"))
        return float(self.x0 + self.drift * s + self.jumps[:k].sum())

    def write_csv(self, path, comments=None):
        meta = {"x0": self.x0, "drift": self.drift, "cutoff": self.cutoff, "horizon": self.horizon,
                "error_variance": self.error_variance}
        meta.update(comments or {})
        return write_csv(path, ["t_i", "delta_i"], zip(self.times, self.jumps), meta)


def levy_drift(measure: LambdaMeasure, cutoff: float) -> float:
    """-int_{[cutoff, 1]} x nu(dx)."""
    return -weighted_mass(measure, cutoff, 1.0, -1.0)


def dropped_variance_rate(measure: LambdaMeasure, cutoff: float) -> float:
    """int_{(0, cutoff)} x^2 nu(dx) = Lambda((0, cutoff))."""
    return weighted_mass(measure, 0.0, float(np.nextafter(cutoff, 0.0)), 0.0)


def simulate_levy(measure: LambdaMeasure, x0: float, horizon: float, cutoff: float, seed: int,
                  chunk: int = 0) -> JumpSkeleton:
    """Skeleton on [0, horizon] keeping the jumps of size >= cutoff.

    ``chunk`` selects an independent stream, used to extend a path in time.
    """
    if not 0.0 < cutoff < 1.0:
        raise ValueError("cutoff must lie in (0, 1)")
    if measure.kingman_mass:
        raise ValueError("a Kingman atom has no jump representation")
    total = weighted_mass(measure, cutoff, 1.0, -2.0)
    if total * horizon > MAX_EXPECTED_JUMPS:
        raise ValueError(f"expected {total * horizon:.3g} jumps; raise the cutoff or shorten the horizon")
    times, sizes = [], []
    for k, lo, hi in _bands(cutoff):
        rate = weighted_mass(measure, lo, hi, -2.0)
        if rate <= 0.0:
            continue
        rng = np.random.default_rng([seed, chunk, k])
        count = rng.poisson(rate * horizon)
        t = rng.uniform(0.0, horizon, count)
        x = sample_weighted(measure, rng, count, lo, hi, -2.0)
        keep = x >= cutoff
        times.append(t[keep])
        sizes.append(x[keep])
    times = np.concatenate(times) if times else np.zeros(0)
    sizes = np.concatenate(sizes) if sizes else np.zeros(0)
    order = np.argsort(times, kind="stable")
    return JumpSkeleton(float(x0), times[order], sizes[order], levy_drift(measure, cutoff), float(cutoff),
                        float(horizon), horizon * dropped_variance_rate(measure, cutoff))


def concatenate(first: JumpSkeleton, second: JumpSkeleton) -> JumpSkeleton:
    """Skeleton on [0, h1 + h2] running ``second`` (whose x0 is ignored) after ``first``."""
    if first.drift != second.drift or first.cutoff != second.cutoff:
        raise ValueError("skeletons need equal drift and cutoff")
    return JumpSkeleton(first.x0, np.concatenate([first.times, first.horizon + second.times]),
                        np.concatenate([first.jumps, second.jumps]), first.drift, first.cutoff,
                        first.horizon + second.horizon, first.error_variance + second.error_variance)


def pi_x(skel: JumpSkeleton) -> DrivingPoints:
    """The jump point process (Delta X, t) as lookdown driving points."""
    return DrivingPoints(skel.times, np.minimum(skel.jumps, 1.0), None, {}, "pi_X", skel.error_variance)


# --------------------------------------------------------------------------
# Lamperti transform


def _segment_integral(y: np.ndarray, d: float, ds: np.ndarray) -> np.ndarray:
    """int_0^ds du / (y + d u), elementwise; inf where the segment reaches 0."""
    if d == 0.0:
        return ds / y
    end = y + d * ds
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(end / y) / d
    return np.where(end > 0, out, np.inf)


@dataclass(frozen=True)
class CsbpPath:
    """Z_t = X_{U^-1(t)} with U(s) = int_0^s du / X_u, absorbed once X reaches ``floor``.

    Knots are 0 and the jump times of the skeleton (up to the absorption time);
    ``u_knots`` holds U there, evaluated exactly from the per-segment logarithms.
    """

    skeleton: JumpSkeleton
    floor: float
    knots: np.ndarray           # X-time segment starts
    start_values: np.ndarray    # X at each segment start (after the jump)
    u_knots: np.ndarray         # U at each segment start
    hit_time: float             # X-time of absorption (inf if none)
    zeta: float                 # U(hit_time): extinction time of Z (inf if none)
    u_end: float                # U(horizon) (or zeta)

    @property
    def extinct(self) -> bool:
        return math.isfinite(self.zeta)

    @property
    def z_horizon(self) -> float:
        """Largest CSBP time the skeleton determines."""
        return math.inf if self.extinct else self.u_end

    def _segment(self, s: float) -> int:
        return int(np.searchsorted(self.knots, s, side="right")) - 1

    def U(self, s: float) -> float:
        if not 0.0 <= s <= self.skeleton.horizon:
            raise ValueError("s outside the skeleton horizon")
        if s >= self.hit_time:
            return self.zeta
        k = self._segment(s)
        return float(self.u_knots[k] + _segment_integral(np.array([self.start_values[k]]), self.skeleton.drift,
                                                          np.array([s - self.knots[k]]))[0])

    def U_many(self, s) -> np.ndarray:
        """U on an array of X-times (vectorised ``U``)."""
        s = np.asarray(s, float)
        if np.any(s < 0) or np.any(s > self.skeleton.horizon):
            raise ValueError("s outside the skeleton horizon")
        k = np.searchsorted(self.knots, s, side="right") - 1
        out = self.u_knots[k] + _segment_integral(self.start_values[k], self.skeleton.drift, s - self.knots[k])
        return np.where(s >= self.hit_time, self.zeta, out)

    def U_inv(self, t: float) -> float:
        """X-time at CSBP time t (the hit time once absorbed)."""
        if t < 0:
            raise ValueError("t must be >= 0")
        if t >= self.zeta:
            return self.hit_time
        if t > self.u_end:
            raise ValueError(f"t={t} beyond the transformed horizon {self.u_end}")
        k = int(np.searchsorted(self.u_knots, t, side="right")) - 1
        y, d, dt = self.start_values[k], self.skeleton.drift, t - self.u_knots[k]
        if d == 0.0:
            return float(self.knots[k] + y * dt)
        return float(self.knots[k] + y * math.expm1(d * dt) / d)

    def Z(self, t: float) -> float:
        if t >= self.zeta:
            return 0.0
        if t > self.u_end:
            raise ValueError(f"t={t} beyond the transformed horizon {self.u_end}")
        k = int(np.searchsorted(self.u_knots, t, side="right")) - 1
        return float(self.start_values[k] * math.exp(self.skeleton.drift * (t - self.u_knots[k])))

    @property
    def jump_count(self) -> int:
        """Jumps of X strictly before absorption."""
        return len(self.knots) - 1

    @property
    def jump_times(self) -> np.ndarray:
        """CSBP times of Z's jumps."""
        return self.u_knots[1:]

    @property
    def jump_sizes(self) -> np.ndarray:
        return self.skeleton.jumps[:self.jump_count]

    @property
    def after_jump(self) -> np.ndarray:
        return self.start_values[1:]

    def write_csv(self, path, comments=None):
        meta = {"x0": self.skeleton.x0, "drift": self.skeleton.drift, "cutoff": self.skeleton.cutoff,
                "floor": self.floor, "zeta": self.zeta}
        meta.update(comments or {})
        return write_csv(path, ["t_tilde_i", "delta_i", "Z_after"],
                         zip(self.jump_times, self.jump_sizes, self.after_jump), meta)


def lamperti(skel: JumpSkeleton, floor: float = 0.0) -> CsbpPath:
    """Exact Lamperti transform of a skeleton.

    X is linear between jumps, so U on each segment is a logarithm.  With
    ``floor`` > 0 the CSBP is absorbed when X first reaches ``floor`` and zeta is
    the finite value of U there; with floor = 0 a linear approach to 0 makes U
    diverge and Z never reaches 0.
    """
    if skel.x0 <= floor:
        return CsbpPath(skel, floor, np.zeros(1), np.array([skel.x0]), np.zeros(1), 0.0, 0.0, 0.0)
    knots = np.concatenate([[0.0], skel.times])
    starts = np.concatenate([[skel.x0], skel.after])
    ends = np.concatenate([skel.before, [skel.x0 + skel.drift * skel.horizon + skel.jumps.sum()]])
    lengths = np.diff(np.concatenate([knots, [skel.horizon]]))
    d = skel.drift
    hit = np.flatnonzero(ends <= floor) if floor > 0 else np.flatnonzero(ends <= 0)
    last = int(hit[0]) if hit.size else len(knots) - 1
    if hit.size:
        # X reaches the floor inside segment ``last``
        lengths = lengths.copy()
        lengths[last] = (floor - starts[last]) / d
    seg = _segment_integral(starts[:last + 1], d, lengths[:last + 1])
    u_knots = np.concatenate([[0.0], np.cumsum(seg[:last])])
    u_end = float(u_knots[-1] + seg[last])
    if hit.size:
        hit_time = float(knots[last] + lengths[last])
        zeta = u_end
    else:
        hit_time, zeta = math.inf, math.inf
    return CsbpPath(skel, floor, knots[:last + 1], starts[:last + 1], u_knots, hit_time, zeta, u_end)


def pi_z(path: CsbpPath, horizon: float | None = None) -> DrivingPoints:
    """Normalised jumps (Delta Z / Z(t), t) of the CSBP, Z taken right after the jump.

    No atoms after absorption.  ``horizon`` restricts to CSBP times <= horizon.
    """
    t = path.jump_times
    p = path.jump_sizes / path.after_jump
    if horizon is not None:
        keep = t <= horizon
        t, p = t[keep], p[keep]
    return DrivingPoints(t, p, None, {}, "pi_Z", path.skeleton.error_variance)


def simulate_csbp(measure: LambdaMeasure, z0: float, horizon: float, cutoff: float, seed: int,
                  floor: float | None = None, chunk_length: float | None = None, max_chunks: int = 10_000) -> CsbpPath:
    """CSBP path up to CSBP time ``horizon``: the Levy skeleton is extended chunk by chunk
    until U covers the horizon or the path is absorbed.  ``floor`` defaults to the cutoff."""
    floor = cutoff if floor is None else floor
    h = chunk_length or max(horizon * z0, 1e-3)
    skel = simulate_levy(measure, z0, h, cutoff, seed, chunk=0)
    for chunk in range(1, max_chunks):
        path = lamperti(skel, floor)
        if path.extinct or path.u_end >= horizon:
            return path
        skel = concatenate(skel, simulate_levy(measure, 0.0, h, cutoff, seed, chunk=chunk))
    raise RuntimeError("CSBP horizon not reached; increase chunk_length")
