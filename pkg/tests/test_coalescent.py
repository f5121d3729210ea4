import math

import numpy as np
import pytest
from scipy import stats

from lambdacoal.coalescent import (
    BlockCountPath, Partition, block_size_law, blocks_at, coalescent_points, default_cutoff,
    RateTable, large_atoms, rate_table, simulate_chain, simulate_poisson,
)
from lambdacoal.lookdown import CoinSource
from lambdacoal.measure import LambdaMeasure, merge_weights, total_merge_rate

B15 = LambdaMeasure.beta_alpha(1.5)
U = LambdaMeasure.uniform()


def law(values, cats):
    return np.array([np.sum(np.asarray(values) == c) for c in cats])


def chi2_same(a, b, cats):
    table = np.array([law(a, cats), law(b, cats)])
    table = table[:, table.sum(axis=0) > 0]
    return stats.chi2_contingency(table).pvalue


def test_pair_merge_time_is_exp_one():
    rng = np.random.default_rng(0)
    times = [simulate_chain(2, U, math.inf, rng).path.times[1] for _ in range(100_000)]
    assert 0.99 <= np.mean(times) <= 1.01
    assert stats.kstest(times, "expon").pvalue > 0.001


def test_three_blocks_first_event():
    rng = np.random.default_rng(1)
    ks = [simulate_chain(3, U, math.inf, rng).path.merged[0] for _ in range(100_000)]
    counts = law(ks, [2, 3])
    assert stats.chisquare(counts, [75_000, 25_000]).pvalue > 0.001


def test_zero_horizon_and_zero_measure():
    for run in (simulate_chain(6, B15, 0.0, 1), simulate_poisson(6, B15, 0.0, CoinSource(1))):
        assert run.path.times.tolist() == [0.0] and run.path.counts.tolist() == [6]
    run = simulate_chain(6, LambdaMeasure.zero(), 5.0, 1)
    assert run.path.counts.tolist() == [6]


def test_chain_path_shape():
    run = simulate_chain(50, B15, 2.0, 4, track_partition=True)
    p = run.path
    assert np.all(np.diff(p.times) > 0) and np.all(np.diff(p.counts) < 0)
    assert np.array_equal(-np.diff(p.counts), p.merged - 1)
    for (t, part), c in zip(run.partitions, p.counts):
        assert part.block_count == c
        assert sorted(set(part.block_of)) == list(range(1, c + 1))
        first_seen = [part.block_of[np.flatnonzero(part.block_of == b)[0]] for b in range(1, c + 1)]
        assert first_seen == list(range(1, c + 1))
    # canonical ids: the block of level i is at most 1 + max id among levels < i
    bo = run.partitions[-1][1].block_of
    assert np.all(bo[1:] <= np.maximum.accumulate(bo)[:-1] + 1)


def test_blocks_at_semantics():
    path = BlockCountPath(5, 2.0, np.array([0.0, 0.5, 1.0]), np.array([5, 3, 2]), np.array([3, 2]))
    assert blocks_at(path, 0.0) == 5
    assert blocks_at(path, 0.5) == 3 and blocks_at(path, 0.4999) == 5
    assert blocks_at(path, 2.0) == 2
    with pytest.raises(ValueError):
        blocks_at(path, 2.5)
    with pytest.raises(ValueError):
        blocks_at(path, -1.0)
    absorbed = BlockCountPath(5, 2.0, np.array([0.0, 0.5]), np.array([5, 1]), np.array([5]))
    assert blocks_at(absorbed, 100.0) == 1


def test_atom_intensity_rate():
    m = 0.7
    atom = LambdaMeasure.atom(0.5, m)
    rng = np.random.default_rng(3)
    counts = [large_atoms(atom, 10.0, 0.25, rng)[0].size for _ in range(4000)]
    assert np.mean(counts) == pytest.approx(4 * m * 10.0, rel=0.01)
    t, x = large_atoms(atom, 10.0, 0.25, rng)
    assert np.all(x == 0.5) and np.all(np.diff(t) >= 0)


def test_atom_coin_flips():
    # with an atom at 1/2 and n = 2 lineages, each atom merges them with probability 1/4
    atom = LambdaMeasure.atom(0.5, 1.0)
    times = [simulate_poisson(2, atom, math.inf, CoinSource(s)).path.times[1] for s in range(20_000)]
    # effective rate 4m * 1/4 = lambda_{2,2} = m
    assert np.mean(times) == pytest.approx(1.0, rel=0.03)
    assert total_merge_rate(2, atom) == pytest.approx(1.0)


def test_poisson_rejects_kingman():
    with pytest.raises(ValueError):
        simulate_poisson(5, LambdaMeasure.kingman(1.0), 1.0, CoinSource(0))


def test_poisson_matches_chain():
    runs, n, t = 20_000, 5, 0.3
    rng = np.random.default_rng(5)
    chain = [simulate_chain(n, B15, t, rng).path.counts[-1] for _ in range(runs)]
    ppp = [simulate_poisson(n, B15, t, CoinSource(s)).path.counts[-1] for s in range(runs)]
    assert chi2_same(chain, ppp, range(1, n + 1)) > 0.001


def test_exact_law_matches_chain():
    n, t, runs = 6, 0.4, 40_000
    exact = block_size_law(n, B15, t)
    by_count = np.zeros(n + 1)
    for sizes, p in exact.items():
        by_count[len(sizes)] += p
    rng = np.random.default_rng(6)
    sim = law([simulate_chain(n, B15, t, rng).path.counts[-1] for _ in range(runs)], range(1, n + 1))
    expected = by_count[1:] * runs
    keep = expected > 5
    obs = np.append(sim[keep], sim[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    if exp[-1] == 0:
        obs, exp = obs[:-1], exp[:-1]
    assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 0.001


def test_block_size_law_closed_forms():
    law2 = block_size_law(2, U, 1.3)
    assert law2[(1, 1)] == pytest.approx(math.exp(-1.3), rel=1e-12)
    # n = 3, uniform: leave (1,1,1) at rate 2
    law3 = block_size_law(3, U, 0.7)
    assert law3[(1, 1, 1)] == pytest.approx(math.exp(-1.4), rel=1e-12)
    assert sum(law3.values()) == pytest.approx(1.0)


def test_sampling_consistency():
    runs, t = 20_000, 0.3
    rng = np.random.default_rng(8)
    big = [simulate_chain(7, B15, t, rng, track_partition=True).partitions[-1][1].restrict(6).block_count
           for _ in range(runs)]
    small = [simulate_chain(6, B15, t, rng).path.counts[-1] for _ in range(runs)]
    assert stats.ks_2samp(big, small).pvalue > 0.001
    assert chi2_same(big, small, range(1, 7)) > 0.001


def test_exchangeability_of_partition():
    runs, t = 20_000, 0.3
    rng = np.random.default_rng(9)
    parts = [simulate_chain(5, B15, t, rng, track_partition=True).partitions[-1][1] for _ in range(runs)]
    sigma = rng.permutation(5)
    a = [int(p.block_of[0] == p.block_of[1]) for p in parts]
    b = [int(p.block_of[sigma[0]] == p.block_of[sigma[1]]) for p in parts]
    assert chi2_same(a, b, [0, 1]) > 0.001
    relabelled = [Partition.from_labels(p.block_of[sigma]).block_count for p in parts]
    assert relabelled == [p.block_count for p in parts]


def test_coalescent_points_cover_all_merging_atoms():
    pts = coalescent_points(8, B15, 1.0, 3)
    assert pts.source == "coalescent-PPP" and pts.truncation_budget == 0.0
    assert np.all(np.diff(pts.times) > 0)
    small = [k for k in pts.overrides]
    assert all(pts.sizes[k] < default_cutoff(8) for k in small)
    assert all(pts.sizes[k] >= default_cutoff(8) for k in range(len(pts)) if k not in pts.overrides)
    for k in small:
        assert np.sum(pts.overrides[k] <= pts.sizes[k]) >= 2


def test_rate_table_cache():
    tab = rate_table(B15)
    assert rate_table(B15) is tab
    assert tab.total(10) == pytest.approx(total_merge_rate(10, B15), rel=1e-12)
    assert tab.draw_k(10, 0.0) == 2 and tab.draw_k(10, 1.0 - 1e-16) <= 10


def test_rate_table_tail_draws_follow_the_full_law():
    # a short head forces most draws through the recomputed tail
    b = 12
    tab = RateTable(U, head=4)
    w = merge_weights(b, U)
    cdf = np.cumsum(w) / w.sum()
    for u in np.linspace(0.0, 1.0 - 1e-12, 401):
        assert tab.draw_k(b, u) == 2 + int(np.searchsorted(cdf, u, side="right"))


def test_transcript_csv(tmp_path):
    run = simulate_chain(10, B15, 1.0, 2)
    text = run.path.write_csv(tmp_path / "p.csv", {"seed": 2}).read_text().splitlines()
    assert text[0] == "# seed=2"
    assert text[1] == "event_time,k_merged,block_count_after"
    assert len(text) == 2 + len(run.path.merged)
