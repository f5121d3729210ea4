import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lambdacoal.coalescent import coalescent_points, simulate_chain
from lambdacoal.lookdown import (
    CoinSource, DrivingPoints, LabelState, ancestral_partition, apply_event, canonical_blocks,
    duality_test, empirical_measure, is_coarser, push_up, run_lookdown, total_variation,
)
from lambdacoal.measure import LambdaMeasure

B15 = LambdaMeasure.beta_alpha(1.5)


def single_atom(coins_col, p=0.5, t=1.0):
    return DrivingPoints([t], [p], overrides={0: np.asarray(coins_col, float)})


class PerturbedCoins(CoinSource):
    """Same coins as CoinSource(seed) on levels <= level, other coins above."""

    def __init__(self, seed, level, other_seed):
        super().__init__(seed)
        self.level = level
        self.other = CoinSource(other_seed)

    def uniforms(self, levels, atoms):
        mine, theirs = super().uniforms(levels, atoms), self.other.uniforms(levels, atoms)
        return np.where(np.asarray(levels)[:, None] > self.level, theirs, mine)


def perturb_overrides(points, level, rng):
    over = {}
    for k, v in points.overrides.items():
        v = v.copy()
        v[level:] = rng.random(v.size - level)
        over[k] = v
    return DrivingPoints(points.times, points.sizes, points.coin_index, over, points.source)


# ---------------------------------------------------------------- single events

def test_worked_example_two_and_five():
    state = LabelState.initial(5)
    pts = single_atom([0.9, 0.1, 0.9, 0.9, 0.1])
    out = apply_event(state, 0.5, 0, CoinSource(0), pts, 0)
    assert out.types.tolist() == [1, 2, 3, 4, 2]
    assert push_up(np.array([10, 20, 30, 40, 50]), np.array([0, 1, 0, 0, 1], bool)).tolist() == [10, 20, 30, 40, 20]


def test_all_heads_and_lonely_head():
    state = LabelState(6, np.array([4, 2, 9, 9, 1, 7]))
    assert apply_event(state, 1.0, 3, CoinSource(1)).types.tolist() == [4] * 6
    for col in ([0.9] * 6, [0.9, 0.1, 0.9, 0.9, 0.9, 0.9]):
        assert apply_event(state, 0.5, 0, CoinSource(1), single_atom(col), 0) is state


@given(st.lists(st.integers(0, 5), min_size=2, max_size=30), st.data())
@settings(max_examples=300, deadline=None)
def test_push_up_restricts(types, data):
    types = np.array(types)
    n = types.size
    heads = np.array(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    if heads.sum() < 2:
        heads[:2] = True
    new = push_up(types, heads)
    m = data.draw(st.integers(1, n))
    if heads[:m].sum() >= 2:
        assert np.array_equal(new[:m], push_up(types[:m], heads[:m]))
    else:
        assert np.array_equal(new[:m], types[:m])
    # type set after the event is the set carried by the first n - |I| + 1 levels
    assert set(new) == set(types[:n - heads.sum() + 1])


def test_type_count_decrement():
    # distinct types: decrement is exactly |I| - 1
    types = np.arange(1, 9)
    heads = np.zeros(8, bool)
    heads[[1, 4, 6]] = True
    assert np.unique(push_up(types, heads)).size == 8 - 2
    # repeated types: the decrement can be smaller than |I| - 1
    types = np.array([1, 2, 3, 4, 2])
    heads = np.array([1, 1, 0, 0, 0], bool)
    assert np.unique(push_up(types, heads)).size == 4


# ---------------------------------------------------------------- whole runs

def test_empty_and_total_atom_runs():
    run = run_lookdown(DrivingPoints([], []), 7, 1.0, CoinSource(0))
    assert run.n_at(0.0) == run.n_at(1.0) == 7
    run = run_lookdown(DrivingPoints([0.3], [1.0]), 7, 1.0, CoinSource(0))
    assert run.n_at(0.29) == 7 and run.n_at(0.3) == 1 and run.n_at(1.0) == 1


def test_unsorted_atoms_rejected():
    with pytest.raises(ValueError):
        run_lookdown(DrivingPoints([0.2, 0.1], [0.5, 0.5]), 4, 1.0, CoinSource(0))
    with pytest.raises(ValueError):
        run_lookdown(DrivingPoints([0.2, 0.2], [0.5, 0.5]), 4, 1.0, CoinSource(0))


def test_run_counts_match_types():
    pts = coalescent_points(30, B15, 0.5, 3)
    run = run_lookdown(pts, 30, 0.5, CoinSource(3), record_states=True)
    assert len(run.event_times) > 0
    assert np.all(np.diff(run.counts) <= 0)
    for k, t in enumerate(run.event_times):
        assert run.n_at(t) == np.unique(run.states[k]).size
        assert np.array_equal(run.types_at(t), run.states[k])
        assert run.participants[k].size >= 2


def test_restriction_consistency():
    for seed in range(200):
        pts = coalescent_points(20, B15, 0.5, seed)
        coins = CoinSource(seed)
        big = run_lookdown(pts, 20, 0.5, coins)
        small = run_lookdown(pts, 10, 0.5, coins)
        for t in np.concatenate([big.event_times, [0.5]]):
            assert np.array_equal(big.types_at(t)[:10], small.types_at(t))


def test_lookdown_property_metamorphic():
    rng = np.random.default_rng(5)
    for seed in range(200):
        level = int(rng.integers(1, 10))
        pts = coalescent_points(10, B15, 0.5, seed)
        a = run_lookdown(pts, 10, 0.5, CoinSource(seed))
        b = run_lookdown(perturb_overrides(pts, level, rng), 10, 0.5, PerturbedCoins(seed, level, seed + 10**6))
        for t in np.concatenate([a.event_times, b.event_times, [0.5]]):
            assert np.array_equal(a.types_at(t)[:level], b.types_at(t)[:level])


def test_override_prefix_only():
    pts = DrivingPoints([0.1], [0.5], overrides={0: np.array([0.1, 0.1])})
    coins = CoinSource(9)
    mat = pts.coins(coins, 5, [0])
    assert mat[:2, 0].tolist() == [0.1, 0.1]
    assert np.array_equal(mat[2:, 0], coins.column(0, 5)[2:])


def test_restricted_keeps_overrides_aligned():
    pts = DrivingPoints([0.1, 0.2, 0.3], [0.5, 0.6, 0.7], overrides={1: np.array([0.0, 0.0])})
    r = pts.restricted(0.25)
    assert len(r) == 2 and list(r.overrides) == [1]
    assert r.sum_p2 == pytest.approx(0.25 + 0.36)


# ---------------------------------------------------------------- coins

def test_coin_source_is_pure_and_uniform():
    a, b = CoinSource(11), CoinSource(11)
    m = a.uniforms(np.arange(1, 301), np.arange(300))
    assert np.array_equal(m, b.uniforms(np.arange(1, 301), np.arange(300)))
    assert a(7, 123) == m[6, 123]
    assert np.all((m >= 0) & (m < 1))
    assert stats.kstest(m.ravel(), "uniform").pvalue > 0.001
    # neighbouring levels and atoms are uncorrelated
    assert abs(np.corrcoef(m[:-1].ravel(), m[1:].ravel())[0, 1]) < 0.01
    assert abs(np.corrcoef(m[:, :-1].ravel(), m[:, 1:].ravel())[0, 1]) < 0.01
    assert not np.array_equal(m, CoinSource(12).uniforms(np.arange(1, 301), np.arange(300)))


# ---------------------------------------------------------------- partitions and measures

def test_ancestral_partition():
    pts = coalescent_points(15, B15, 1.0, 21)
    run = run_lookdown(pts, 15, 1.0, CoinSource(21))
    assert np.array_equal(ancestral_partition(run, 1.0, 1.0), np.arange(1, 16))
    grid = np.linspace(0.0, 1.0, 21)
    parts = [ancestral_partition(run, 1.0, t) for t in grid]
    for early, late in zip(parts, parts[1:]):
        assert is_coarser(early, late)
    assert np.array_equal(parts[0], canonical_blocks(run.final.types))
    with pytest.raises(ValueError):
        ancestral_partition(run, 0.5, 0.6)


def test_ancestral_partition_single_type():
    run = run_lookdown(DrivingPoints([0.3], [1.0]), 6, 1.0, CoinSource(0))
    assert ancestral_partition(run, 1.0, 0.0).tolist() == [1] * 6


def test_empirical_measure():
    assert empirical_measure(LabelState.initial(4)) == {1: 0.25, 2: 0.25, 3: 0.25, 4: 0.25}
    run = run_lookdown(DrivingPoints([0.3], [1.0]), 4, 1.0, CoinSource(0))
    assert empirical_measure(run.final) == {1: 1.0}
    assert total_variation({1: 0.5, 2: 0.5}, {1: 1.0}) == pytest.approx(0.5)


def test_empirical_measure_stabilises():
    t, reps = 0.2, 6
    tv = {n: [] for n in (250, 500, 1000)}
    for seed in range(reps):
        pts = coalescent_points(2000, B15, t, seed)
        types = run_lookdown(pts, 2000, t, CoinSource(seed)).final.types
        for n in tv:
            tv[n].append(total_variation(empirical_measure(LabelState(n, types[:n])),
                                         empirical_measure(LabelState(2 * n, types[:2 * n]))))
    means = [np.mean(tv[n]) for n in sorted(tv)]
    assert means[0] > means[1] > means[2]


def test_exchangeability_of_levels():
    runs, t = 4000, 0.3
    same_low, same_high = 0, 0
    for seed in range(runs):
        types = run_lookdown(coalescent_points(6, B15, t, seed), 6, t, CoinSource(seed)).final.types
        same_low += types[0] == types[1]
        same_high += types[4] == types[5]
    table = [[same_low, runs - same_low], [same_high, runs - same_high]]
    assert stats.chi2_contingency(table).pvalue > 0.001


def test_lookdown_matches_chain_law():
    runs, n, t = 20000, 10, 0.3
    look = np.array([run_lookdown(coalescent_points(n, B15, t, s), n, t, CoinSource(s)).n_at(t)
                     for s in range(runs)])
    rng = np.random.default_rng(77)
    chain = np.array([simulate_chain(n, B15, t, rng).path.counts[-1] for _ in range(runs)])
    cats = np.arange(1, n + 1)
    table = np.array([[np.sum(look == c) for c in cats], [np.sum(chain == c) for c in cats]])
    table = table[:, table.sum(axis=0) > 0]
    assert stats.chi2_contingency(table).pvalue > 0.001


# ---------------------------------------------------------------- duality

def test_duality_single_level_is_uniform_moment():
    rep = duality_test(B15, 1, 0.5, 4000, 1, power=2.0)
    assert rep.exact == pytest.approx(1 / 3)
    assert abs(rep.z_lookdown_exact) < 4 and abs(rep.z_coalescent_exact) < 4


def test_single_level_marginal_is_uniform():
    # each level's type is a uniform, whatever Lambda does
    vals = []
    rng = np.random.default_rng(3)
    for s in range(4000):
        types = run_lookdown(coalescent_points(2, B15, 0.5, s), 2, 0.5, CoinSource(s)).final.types
        vals.append(rng.random(2)[types[1] - 1])
    assert stats.kstest(vals, "uniform").pvalue > 0.001


def test_duality_four_levels():
    rep = duality_test(B15, 4, 0.5, 20000, 8)
    assert abs(rep.z) <= 3 and abs(rep.z_lookdown_exact) <= 3 and abs(rep.z_coalescent_exact) <= 3
    assert rep.exact == pytest.approx(0.1144426824517584, rel=1e-9)


def test_duality_rejects_large_n():
    with pytest.raises(ValueError):
        duality_test(B15, 13, 0.5, 10, 0)
