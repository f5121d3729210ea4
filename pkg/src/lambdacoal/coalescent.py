"""Finite-n Lambda-coalescent: a rate-chain simulator and a Poisson (paintbox) construction.

The Poisson construction keeps every atom of intensity x^-2 Lambda(dx) dt above a
cutoff c and handles the atoms below c by exact thinning: with b lineages,
proposals arrive at rate C(b,2) Lambda((0,c)), a proposed size x is drawn from
Lambda restricted to (0,c), and it is kept with probability
P(Bin(b,x) >= 2) / (C(b,2) x^2) <= 1.  Kept atoms get coins conditioned on two or
more heads.  Nothing is dropped, so the construction is exact for b lineages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .io import write_csv
from .lookdown import CoinSource, DrivingPoints, canonical_blocks
from .measure import (
    BufferedSampler, LambdaMeasure, lambda_rates, log_binom, merge_weights, sample_weighted, weighted_mass,
)


@dataclass(frozen=True)
class Partition:
    """Partition of levels 1..n as canonical block ids (block of the smallest level is 1)."""

    n: int
    block_of: np.ndarray

    @classmethod
    def from_labels(cls, labels) -> "Partition":
        labels = np.asarray(labels)
        return cls(labels.size, canonical_blocks(labels))

    @classmethod
    def singletons(cls, n: int) -> "Partition":
        return cls(n, np.arange(1, n + 1))

    @property
    def block_count(self) -> int:
        return int(self.block_of.max()) if self.n else 0

    def blocks(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.block_of == b) + 1 for b in range(1, self.block_count + 1)]

    def restrict(self, m: int) -> "Partition":
        return Partition.from_labels(self.block_of[:m])

    def __eq__(self, other):
        return isinstance(other, Partition) and self.n == other.n and np.array_equal(self.block_of, other.block_of)

    def __hash__(self):
        return hash((self.n, self.block_of.tobytes()))


@dataclass
class BlockCountPath:
    """Right-continuous step function N(t) on [0, horizon]."""

    n: int
    horizon: float
    times: np.ndarray = field(default_factory=lambda: np.zeros(1))
    counts: np.ndarray | None = None
    merged: np.ndarray | None = None     # k of each event

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.counts is None:
            self.counts = np.array([self.n])
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.merged is None:
            self.merged = np.zeros(0, dtype=np.int64)

    @property
    def absorbed(self) -> bool:
        return int(self.counts[-1]) == 1

    def write_csv(self, path, comments=None):
        rows = zip(self.times[1:], self.merged, self.counts[1:])
        return write_csv(path, ["event_time", "k_merged", "block_count_after"], rows, comments)


def blocks_at(path: BlockCountPath, t: float) -> int:
    """N(t), right-continuous; t beyond the horizon is an error unless the path is absorbed."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t > path.horizon and not path.absorbed:
        raise ValueError(f"t={t} beyond the simulated horizon {path.horizon}")
    k = int(np.searchsorted(path.times, t, side="right"))
    return int(path.counts[k - 1])


class RateTable:
    """Per-b total rates and k-distributions of the block counting chain, built lazily.

    Only the first ``head`` entries of each k-distribution are kept; draws that
    land in the tail recompute the full distribution for that b.
    """

    def __init__(self, measure: LambdaMeasure, head: int = 256):
        self.measure = measure
        self.head = head
        self._total: dict[int, float] = {}
        self._cdf: dict[int, np.ndarray] = {}

    def _weights(self, b: int) -> np.ndarray:
        return merge_weights(b, self.measure)

    def _build(self, b: int):
        w = self._weights(b)
        total = float(w.sum())
        self._total[b] = total
        cdf = np.cumsum(w) / total if total > 0 else np.ones(b - 1)
        self._cdf[b] = cdf[:self.head]

    def total(self, b: int) -> float:
        if b < 2:
            return 0.0
        if b not in self._total:
            self._build(b)
        return self._total[b]

    def draw_k(self, b: int, u: float) -> int:
        if b not in self._cdf:
            self._build(b)
        cdf = self._cdf[b]
        if u >= cdf[-1] and cdf.size < b - 1:
            w = self._weights(b)
            cdf = np.cumsum(w) / w.sum()
        return 2 + min(int(np.searchsorted(cdf, u, side="right")), b - 2)


_TABLES: dict = {}


def rate_table(measure: LambdaMeasure) -> RateTable:
    tab = _TABLES.get(measure)
    if tab is None:
        tab = _TABLES[measure] = RateTable(measure)
    return tab


@dataclass
class CoalescentRun:
    path: BlockCountPath
    partitions: list | None       # (time, Partition) after each event when tracked

    def partition_at(self, t: float) -> Partition:
        if self.partitions is None:
            raise ValueError("partition tracking was off")
        k = int(np.searchsorted(self.path.times, t, side="right"))
        return self.partitions[k - 1][1]


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _merge(block_of: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    """Merge the blocks with canonical ids in ``chosen`` and re-canonicalise."""
    labels = block_of.copy()
    labels[np.isin(labels, chosen)] = chosen.min()
    return canonical_blocks(labels)


def simulate_chain(n: int, measure: LambdaMeasure, horizon: float, seed,
                   track_partition: bool = False, rates: RateTable | None = None) -> CoalescentRun:
    """Exact continuous-time chain: with b blocks wait Exp(total rate), pick k with
    probability proportional to C(b,k) lambda_{b,k} and merge a uniform k-subset."""
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = _rng(seed)
    rates = rates or rate_table(measure)
    times, counts, ks = [0.0], [n], []
    part = Partition.singletons(n) if track_partition else None
    parts = [(0.0, part)] if track_partition else None
    t, b = 0.0, n
    while b > 1:
        total = rates.total(b)
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t > horizon:
            break
        k = rates.draw_k(b, rng.random())
        if track_partition:
            chosen = rng.choice(b, size=k, replace=False) + 1
            part = Partition(n, _merge(part.block_of, chosen))
            parts.append((t, part))
        b -= k - 1
        times.append(t)
        counts.append(b)
        ks.append(k)
    path = BlockCountPath(n, horizon, np.array(times), np.array(counts), np.array(ks, dtype=np.int64))
    return CoalescentRun(path, parts)


# --------------------------------------------------------------------------
# Poisson construction


def default_cutoff(n: int) -> float:
    return min(0.5, 1.0 / n)


def _prob_two_heads(b: int, x):
    """P(Bin(b, x) >= 2)."""
    return special.betainc(2.0, b - 1.0, x)


def large_atoms(measure: LambdaMeasure, horizon: float, cutoff: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Exact Poisson atoms of x^-2 Lambda(dx) dt with x >= cutoff, t <= horizon, time ordered."""
    if measure.kingman_mass:
        raise ValueError("the Poisson construction needs a measure without an atom at 0")
    rate = weighted_mass(measure, cutoff, 1.0, -2.0) if cutoff <= 1.0 else 0.0
    count = rng.poisson(rate * horizon) if rate > 0 else 0
    times = np.sort(rng.uniform(0.0, horizon, count))
    sizes = sample_weighted(measure, rng, count, cutoff, 1.0, -2.0) if count else np.zeros(0)
    return times, sizes


class _LargeAtoms:
    """Time-ordered stream of the atoms above the cutoff, drawn in batches (horizon may be infinite)."""

    def __init__(self, measure, cutoff, rng, batch=64):
        if measure.kingman_mass:
            raise ValueError("the Poisson construction needs a measure without an atom at 0")
        self.args = (measure, cutoff)
        self.rate = weighted_mass(measure, cutoff, 1.0, -2.0) if cutoff <= 1.0 else 0.0
        self.rng, self.batch = rng, batch
        self.t = 0.0
        self._times, self._sizes, self._pos = np.empty(0), np.empty(0), 0

    def next(self):
        if self.rate <= 0:
            return math.inf, 0.0
        if self._pos >= self._times.size:
            gaps = self.rng.exponential(1.0 / self.rate, self.batch)
            self._times = self.t + np.cumsum(gaps)
            self.t = float(self._times[-1])
            self._sizes = sample_weighted(self.args[0], self.rng, self.batch, self.args[1], 1.0, -2.0)
            self._pos = 0
        self._pos += 1
        return float(self._times[self._pos - 1]), float(self._sizes[self._pos - 1])


def _conditional_coins(rng, b: int, x: float) -> np.ndarray:
    """Coins for b lineages with heads probability x, conditioned on at least two heads."""
    k = np.arange(2, b + 1)
    logp = log_binom(b, k) + k * math.log(x) + (b - k) * math.log1p(-x)
    p = np.exp(logp - logp.max())
    heads = 2 + int(rng.choice(b - 1, p=p / p.sum()))
    mask = np.zeros(b, dtype=bool)
    mask[rng.choice(b, size=heads, replace=False)] = True
    v = rng.random(b)
    return np.where(mask, x * v, x + (1.0 - x) * v)


class _SmallAtoms:
    """Thinned proposals for atoms below the cutoff."""

    def __init__(self, measure, cutoff, rng):
        self.rng = rng
        self.mass = weighted_mass(measure, 0.0, np.nextafter(cutoff, 0.0), 0.0)
        self.sampler = BufferedSampler(measure, 0.0, np.nextafter(cutoff, 0.0), 0.0, rng, batch=32) \
            if self.mass > 0 else None

    def next(self, t: float, b: int, limit: float):
        """Next accepted small atom after t for b lineages, or None before ``limit``."""
        if self.mass <= 0 or b < 2:
            return None
        pair = b * (b - 1) / 2.0
        rate = pair * self.mass
        while True:
            t += self.rng.exponential(1.0 / rate)
            if t > limit:
                return None
            x = self.sampler.draw()
            if self.rng.random() * pair * x * x <= _prob_two_heads(b, x):
                return t, x


def simulate_poisson(n: int, measure: LambdaMeasure, horizon: float, coins: CoinSource,
                     cutoff: float | None = None, track_partition: bool = False) -> CoalescentRun:
    """Coalescent from Poisson atoms: at each atom every current block flips a coin
    (U[i, j] for the i-th block in canonical order) and the heads merge."""
    if n < 2:
        raise ValueError("n must be >= 2")
    cutoff = default_cutoff(n) if cutoff is None else cutoff
    rng = np.random.default_rng([coins.seed, 0xC0A1])
    big = _LargeAtoms(measure, cutoff, rng)
    small = _SmallAtoms(measure, cutoff, rng)
    part = Partition.singletons(n)
    parts = [(0.0, part)] if track_partition else None
    times, counts, ks = [0.0], [n], []
    b, t, j = n, 0.0, 0
    pending = small.next(0.0, b, horizon)
    t_big, x_big = big.next()
    while b > 1:
        if pending is not None and pending[0] < t_big:
            t, x = pending
            heads = _conditional_coins(rng, b, x) <= x
        elif t_big <= horizon:
            t, x = t_big, x_big
            heads = coins.uniforms(np.arange(1, b + 1), [j])[:, 0] <= x
            j += 1
            t_big, x_big = big.next()
        else:
            break
        k = int(heads.sum())
        if k >= 2:
            if track_partition:
                part = Partition(n, _merge(part.block_of, np.flatnonzero(heads) + 1))
                parts.append((t, part))
            b -= k - 1
            times.append(t)
            counts.append(b)
            ks.append(k)
        # thinning rate depends on b, so the pending proposal is redrawn after any change
        if pending is not None and t >= pending[0] or k >= 2:
            pending = small.next(t, b, horizon)
    path = BlockCountPath(n, horizon, np.array(times), np.array(counts), np.array(ks, dtype=np.int64))
    return CoalescentRun(path, parts)


def coalescent_points(n: int, measure: LambdaMeasure, horizon: float, seed: int,
                      cutoff: float | None = None) -> DrivingPoints:
    """Driving atoms for an n-level lookdown: every atom above the cutoff, plus the
    below-cutoff atoms in which two or more of the n levels participate (exact
    thinning, coins attached as overrides).  Exact in law for the first n levels."""
    cutoff = default_cutoff(n) if cutoff is None else cutoff
    rng = np.random.default_rng([seed, 0x10D0])
    big_t, big_x = large_atoms(measure, horizon, cutoff, rng)
    small = _SmallAtoms(measure, cutoff, rng)
    st, sx, sc = [], [], []
    t = 0.0
    while True:
        nxt = small.next(t, n, horizon)
        if nxt is None:
            break
        t, x = nxt
        st.append(t)
        sx.append(x)
        sc.append(_conditional_coins(rng, n, x))
    times = np.concatenate([big_t, st])
    sizes = np.concatenate([big_x, sx])
    order = np.argsort(times, kind="stable")
    overrides = {}
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    for q, coins_q in enumerate(sc):
        overrides[int(rank[len(big_t) + q])] = coins_q
    return DrivingPoints(times[order], sizes[order], None, overrides, "coalescent-PPP", 0.0)


# --------------------------------------------------------------------------
# Exact law of the block sizes


def _integer_partitions(n: int, largest: int | None = None):
    largest = n if largest is None else largest
    if n == 0:
        yield ()
        return
    for first in range(min(n, largest), 0, -1):
        for rest in _integer_partitions(n - first, first):
            yield (first,) + rest


def block_size_law(n: int, measure: LambdaMeasure, t: float) -> dict:
    """Exact law of the sorted block sizes of the n-coalescent at time t.

    The chain on block-size multisets (integer partitions of n) has generator
    entries summed over every k-subset of blocks, each merging at rate
    lambda_{b,k}; the law at t is the first row of expm(t Q).  Meant for n <= 12.
    """
    if n > 12:
        raise ValueError("block_size_law enumerates subsets; use n <= 12")
    states = list(_integer_partitions(n))
    index = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for s, i in index.items():
        b = len(s)
        if b < 2:
            continue
        lam = np.zeros(b + 1)
        lam[2:] = lambda_rates(b, np.arange(2, b + 1), measure)
        for mask in range(1, 1 << b):
            members = [s[j] for j in range(b) if mask >> j & 1]
            k = len(members)
            if k < 2:
                continue
            rest = [s[j] for j in range(b) if not mask >> j & 1]
            target = tuple(sorted(rest + [sum(members)], reverse=True))
            Q[i, index[target]] += lam[k]
            Q[i, i] -= lam[k]
    row = linalg.expm(t * Q)[index[(1,) * n]]
    return {s: float(max(row[i], 0.0)) for s, i in index.items()}
