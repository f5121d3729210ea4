"""Lookdown label process driven by a point process of (size, time) atoms.

Types are integer ancestor ids.  At an atom (p, t) every level flips a coin
with heads probability p; heads adopt the type of the lowest head, the others
keep their relative order and are pushed up past the extra copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .io import write_csv

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CoinSource:
    """Counter-based uniforms U[i, j] for level i >= 1 and atom index j >= 0.

    U is a pure function of (seed, i, j), so any two systems built from the same
    seed see identical coins without storing them.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        with np.errstate(over="ignore"):
            self._key = _splitmix(np.array([self.seed], dtype=np.uint64) * _GOLDEN + _GOLDEN)[0]

    def uniforms(self, levels, atoms) -> np.ndarray:
        """Matrix of U[i, j] with shape (len(levels), len(atoms))."""
        i = np.asarray(levels, dtype=np.uint64)[:, None]
        j = np.asarray(atoms, dtype=np.uint64)[None, :]
        with np.errstate(over="ignore"):
            z = _splitmix(((i << np.uint64(40)) | j) * _GOLDEN + self._key)
        return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def column(self, j: int, n: int) -> np.ndarray:
        return self.uniforms(np.arange(1, n + 1), [j])[:, 0]

    def __call__(self, i: int, j: int) -> float:
        return float(self.uniforms([i], [j])[0, 0])


@dataclass
class DrivingPoints:
    """Atoms (p_i, t_i) with the coin column each one uses.

    ``overrides`` maps an atom position to explicit coins for levels 1..len;
    levels beyond the override read the coin source.
    """

    times: np.ndarray
    sizes: np.ndarray
    coin_index: np.ndarray | None = None
    overrides: dict = field(default_factory=dict)
    source: str = "synthetic"
    truncation_budget: float = 0.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.sizes = np.asarray(self.sizes, dtype=float)
        if self.times.shape != self.sizes.shape:
            raise ValueError("times and sizes must have equal length")
        if self.coin_index is None:
            self.coin_index = np.arange(len(self.times))
        self.coin_index = np.asarray(self.coin_index, dtype=np.int64)
        if np.any(self.sizes < 0) or np.any(self.sizes > 1):
            raise ValueError("atom sizes must lie in [0, 1]")

    def __len__(self):
        return len(self.times)

    @property
    def sum_p2(self) -> float:
        return float(np.sum(self.sizes ** 2))

    def restricted(self, horizon: float) -> "DrivingPoints":
        keep = self.times <= horizon
        pos = np.flatnonzero(keep)
        remap = {int(k): v for k, v in self.overrides.items() if keep[k]}
        new_pos = {int(p): q for q, p in enumerate(pos)}
        return DrivingPoints(self.times[keep], self.sizes[keep], self.coin_index[keep],
                             {new_pos[k]: v for k, v in remap.items()}, self.source, self.truncation_budget)

    def coins(self, coins: CoinSource, n: int, positions) -> np.ndarray:
        """Coins of levels 1..n for the atoms at the given positions, shape (n, len)."""
        positions = np.asarray(positions, dtype=np.int64)
        mat = coins.uniforms(np.arange(1, n + 1), self.coin_index[positions])
        for col, pos in enumerate(positions):
            over = self.overrides.get(int(pos))
            if over is not None:
                k = min(n, len(over))
                mat[:k, col] = over[:k]
        return mat

    def write_csv(self, path):
        return write_csv(path, ["t", "p", "coin_index"], zip(self.times, self.sizes, self.coin_index),
                         {"source": self.source, "truncation_budget": self.truncation_budget})


@dataclass(frozen=True)
class LabelState:
    n: int
    types: np.ndarray

    @classmethod
    def initial(cls, n: int) -> "LabelState":
        return cls(n, np.arange(1, n + 1, dtype=np.int64))

    @property
    def type_count(self) -> int:
        return int(np.unique(self.types).size)


def push_up(types: np.ndarray, heads: np.ndarray) -> np.ndarray:
    """New types after a birth event with participant mask ``heads`` (at least two heads)."""
    m = np.cumsum(heads)
    first = int(np.argmax(heads))
    src = np.arange(types.size) - np.maximum(m - 1, 0)
    return np.where(heads, types[first], types[src])


def apply_event(state: LabelState, p: float, j: int, coins: CoinSource,
                points: DrivingPoints | None = None, position: int | None = None) -> LabelState:
    """State after atom j of size p.  Unchanged unless two or more levels participate."""
    if points is not None and position is not None:
        u = points.coins(coins, state.n, [position])[:, 0]
    else:
        u = coins.column(j, state.n)
    heads = u <= p
    if heads.sum() < 2:
        return state
    return LabelState(state.n, push_up(state.types, heads))


@dataclass
class LookdownRun:
    n: int
    horizon: float
    initial: LabelState
    final: LabelState
    event_times: np.ndarray
    event_sizes: np.ndarray
    participants: list            # per processed event, 1-based participating levels
    counts: np.ndarray            # type count after each processed event
    states: list | None = None    # type vectors after each event when recorded

    def n_at(self, t: float) -> int:
        """Right-continuous type count."""
        if t < 0 or t > self.horizon:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        k = int(np.searchsorted(self.event_times, t, side="right"))
        return self.initial.type_count if k == 0 else int(self.counts[k - 1])

    def types_at(self, t: float) -> np.ndarray:
        if t < 0 or t > self.horizon:
            raise ValueError(f"t={t} outside [0, {self.horizon}]")
        types = self.initial.types.copy()
        for k in range(int(np.searchsorted(self.event_times, t, side="right"))):
            types = push_up(types, self._mask(k))
        return types

    def _mask(self, k):
        mask = np.zeros(self.n, dtype=bool)
        mask[self.participants[k] - 1] = True
        return mask

    def write_event_csv(self, path):
        rows = ((t, p, len(I), c) for t, p, I, c in
                zip(self.event_times, self.event_sizes, self.participants, self.counts))
        return write_csv(path, ["t", "p", "participants", "n_after"], rows, {"n": self.n})


def run_lookdown(points: DrivingPoints, n: int, horizon: float, coins: CoinSource,
                 initial: LabelState | None = None, record_states: bool = False,
                 chunk: int = 4096, coin_matrix: np.ndarray | None = None) -> LookdownRun:
    """Label process on n levels up to ``horizon``; only atoms with two or more heads act.

    ``coin_matrix`` may hold precomputed coins of levels 1..n for every atom
    (shape (n, len(points))), e.g. when several systems share them.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(points) > 1 and np.any(np.diff(points.times) <= 0):
        raise ValueError("driving atoms must have strictly increasing times")
    state = initial or LabelState.initial(n)
    types = state.types.copy()
    count = state.type_count
    ev_t, ev_p, parts, counts, states = [], [], [], [], [] if record_states else None
    upto = int(np.searchsorted(points.times, horizon, side="right"))
    step = max(1, chunk * 64 // max(n, 1))
    for start in range(0, upto, step):
        pos = np.arange(start, min(start + step, upto))
        u = points.coins(coins, n, pos) if coin_matrix is None else coin_matrix[:n, pos]
        heads = u <= points.sizes[pos][None, :]
        active = np.flatnonzero(heads.sum(axis=0) >= 2)
        for col in active:
            mask = heads[:, col]
            keep = n - int(mask.sum()) + 1
            count = int(np.unique(types[:keep]).size)
            types = push_up(types, mask)
            ev_t.append(points.times[pos[col]])
            ev_p.append(points.sizes[pos[col]])
            parts.append(np.flatnonzero(mask) + 1)
            counts.append(count)
            if record_states:
                states.append(types.copy())
    return LookdownRun(n, horizon, state, LabelState(n, types), np.array(ev_t), np.array(ev_p),
                       parts, np.array(counts, dtype=np.int64), states)


def canonical_blocks(labels: np.ndarray) -> np.ndarray:
    """Block ids 1, 2, ... in order of each block's smallest level."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return rank[inverse] + 1


def ancestral_partition(run: LookdownRun, T: float, t: float) -> np.ndarray:
    """Canonical block ids of the partition where levels are equivalent iff their
    time-T types descend from the same level at time t."""
    if t > T:
        raise ValueError("need t <= T")
    if T > run.horizon or t < 0:
        raise ValueError("times outside the simulated horizon")
    lo = int(np.searchsorted(run.event_times, t, side="right"))
    hi = int(np.searchsorted(run.event_times, T, side="right"))
    labels = np.arange(1, run.n + 1)
    for k in range(lo, hi):
        labels = push_up(labels, run._mask(k))
    return canonical_blocks(labels)


def is_coarser(coarse: np.ndarray, fine: np.ndarray) -> bool:
    """True if every block of ``fine`` lies inside a block of ``coarse``."""
    for b in np.unique(fine):
        if np.unique(coarse[fine == b]).size != 1:
            return False
    return True


def empirical_measure(state: LabelState) -> dict:
    """Fraction of the n levels carrying each type."""
    vals, cnt = np.unique(state.types, return_counts=True)
    return {int(v): c / state.n for v, c in zip(vals, cnt)}


def total_variation(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


@dataclass(frozen=True)
class DualityReport:
    n: int
    t: float
    runs: int
    power: float
    lookdown_mean: float
    lookdown_se: float
    coalescent_mean: float
    coalescent_se: float
    exact: float            # from the exact block-size law
    z: float                # lookdown vs coalescent
    z_lookdown_exact: float
    z_coalescent_exact: float


def _block_moment(sizes, power: float) -> float:
    """E prod_b V_b^(power s_b) for independent uniforms V_b."""
    return float(np.prod(1.0 / (power * np.asarray(sizes, float) + 1.0)))


def duality_test(measure, n: int, t: float, runs: int, seed: int, power: float = 1.0) -> DualityReport:
    """Product moment E[prod_i g(xi_i(t))], g(x) = x^power, two ways.

    Lookdown side: levels 1..n start with distinct uniform types V_1..V_n and are
    driven by the Poisson atoms of the coalescent.  Coalescent side: an
    independent rate-chain partition at time t, every block carrying its own
    uniform.  The exact value follows from the block-size law at t.
    """
    from .coalescent import block_size_law, coalescent_points, simulate_chain

    if not 1 <= n <= 12:
        raise ValueError("duality_test needs 1 <= n <= 12")
    seeds = np.random.SeedSequence(seed).generate_state(runs, dtype=np.uint64)
    v_rng = np.random.default_rng([seed, 0xD0A1])
    c_rng = np.random.default_rng([seed, 0xC4A1])
    look = np.empty(runs)
    coal = np.empty(runs)
    for r in range(runs):
        s = int(seeds[r])
        if n > 1:
            pts = coalescent_points(n, measure, t, s)
            types = run_lookdown(pts, n, t, CoinSource(s)).final.types
        else:
            types = np.ones(1, dtype=np.int64)
        look[r] = np.prod(v_rng.random(n)[types - 1] ** power)
        if n > 1:
            block_of = simulate_chain(n, measure, t, c_rng, track_partition=True).partitions[-1][1].block_of
        else:
            block_of = np.ones(1, dtype=np.int64)
        coal[r] = np.prod(c_rng.random(n)[block_of - 1] ** power)
    exact = sum(p * _block_moment(s, power) for s, p in block_size_law(n, measure, t).items()) \
        if n > 1 else 1.0 / (power + 1.0)
    ml, mc = float(look.mean()), float(coal.mean())
    sl, sc = float(look.std(ddof=1)) / math.sqrt(runs), float(coal.std(ddof=1)) / math.sqrt(runs)
    return DualityReport(n, t, runs, power, ml, sl, mc, sc, exact,
                         (ml - mc) / math.hypot(sl, sc), (ml - exact) / sl, (mc - exact) / sc)
