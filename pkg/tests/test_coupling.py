import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from lambdacoal.coupling import (
    DominationWitness, _cond_heads, build_coupling, csbp_type_count, exit_time, marginal_law_test,
    poisson_count_check, sandwich_bounds, sandwich_experiment, scaled_skeleton, tightest_cutoff, verify_domination,
    with_small_jumps,
)
from lambdacoal.levy import JumpSkeleton, dropped_variance_rate, pi_x, pi_z, simulate_csbp, simulate_levy
from lambdacoal.lookdown import CoinSource, DrivingPoints, run_lookdown
from lambdacoal.measure import BufferedSampler, LambdaMeasure
from lambdacoal.speed import SpeedTable

B15 = LambdaMeasure.beta_alpha(1.5)


def skeleton(times, jumps, drift=0.0, x0=1.0, horizon=1.0):
    return JumpSkeleton(x0, np.asarray(times, float), np.asarray(jumps, float), drift, 0.01, horizon)


def points(times, sizes):
    return DrivingPoints(np.asarray(times, float), np.asarray(sizes, float), np.arange(len(times)))


# ---------------------------------------------------------------- scaled processes

@given(st.floats(0.01, 0.9), st.integers(0, 500))
@settings(max_examples=30, deadline=None)
def test_scaled_skeletons_are_affine_images(eps, seed):
    sk = simulate_levy(B15, 1.0, 0.2, 0.01, seed)
    for sign in (1, -1):
        sc = scaled_skeleton(sk, eps, sign)
        f = 1 + sign * eps
        for s in np.linspace(0, 0.2, 7):
            assert sc.value(s) == pytest.approx(f * sk.value(s) - sign * eps, abs=1e-12)
    # the two scaled processes average back to X
    p, m = scaled_skeleton(sk, eps, 1), scaled_skeleton(sk, eps, -1)
    assert 0.5 * (p.value(0.1) + m.value(0.1)) == pytest.approx(sk.value(0.1), abs=1e-12)


def test_exit_time_by_hand():
    assert exit_time(skeleton([], [], drift=-1.0), 0.8, 1.2) == pytest.approx(0.2)
    assert exit_time(skeleton([0.1], [0.5]), 0.8, 1.2) == pytest.approx(0.1)
    assert math.isinf(exit_time(skeleton([0.3], [0.05], drift=-0.1), 0.8, 1.2))


def test_tightest_cutoff_meets_the_budget():
    c = tightest_cutoff(B15, 0.5, 1e-3)
    assert 0.5 * dropped_variance_rate(B15, c) < 1e-3 <= 0.5 * dropped_variance_rate(B15, 2 * c)


# ---------------------------------------------------------------- domination order

def test_identical_points_dominate_each_other():
    pts = points([0.1, 0.2, 0.5], [0.3, 0.6, 0.2])
    r = np.array([[0.0, 0.0], [1.0, 1.0]])
    res = verify_domination(DominationWitness(pts, pts, r, 1.0), CoinSource(1), 20)
    assert res.ok and res.events_checked == 3


@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
@settings(max_examples=30, deadline=None)
def test_enlarged_sizes_dominate(seed, eps):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.random(12))
    p = rng.random(12) * 0.5
    base = points(t, p)
    big = points(t * 1.3, np.minimum((1 + eps) * p, 1.0))
    w = DominationWitness(base, big, np.array([[0.0, 0.0], [1.0, 1.3]]), 1.0)
    assert verify_domination(w, CoinSource(seed), 16).ok


def test_domination_violations_are_named():
    base = points([0.1, 0.2], [0.3, 0.6])
    shrunk = points([0.1, 0.2], [0.3, 0.5])
    ident = np.array([[0.0, 0.0], [1.0, 1.0]])
    res = verify_domination(DominationWitness(base, shrunk, ident, 1.0), CoinSource(0), 8)
    assert not res.ok and res.kind == "size" and res.index == 1
    res = verify_domination(DominationWitness(base, base, np.array([[0.0, 0.0], [1.0, 2.0]]), 1.0), CoinSource(0), 8)
    assert not res.ok and res.kind == "time"
    res = verify_domination(DominationWitness(base, base, np.array([[0.1, 0.0], [1.0, 1.0]]), 1.0), CoinSource(0), 8)
    assert not res.ok and res.kind == "time"


# ---------------------------------------------------------------- coupled paths

def test_zero_measure_coupling_is_empty():
    tr = build_coupling(LambdaMeasure.zero(), 0.3, horizon=2.0, seed=1)
    assert tr.ok and tr.T_stop == 2.0 and tr.jump_times.size == 0 and tr.error_budget == 0.0


def test_single_atom_coupling():
    for seed in range(20):
        tr = build_coupling(LambdaMeasure.atom(0.05, 1.0), 0.3, horizon=1.0, seed=seed, n=32)
        assert tr.ok
        x = tr.skeleton.after[: tr.jump_times.size]
        assert np.allclose(tr.pi_z_plus.sizes, np.minimum(1.3 * 0.05 / (1.3 * x - 0.3), 1.0))


@pytest.mark.parametrize("seed", range(25))
def test_coupling_orders_the_three_type_counts(seed):
    tr = build_coupling(B15, 0.3, horizon=0.5, cutoff=1e-3, seed=seed, n=64)
    assert tr.ok, (tr.size_violations, tr.clock_violations, tr.lower, tr.upper)
    assert np.all(tr.N_plus <= tr.N_base) and np.all(tr.N_base <= tr.N_minus)
    assert tr.T_stop <= 0.5 and tr.jump_times.size == 0 or tr.jump_times[-1] < tr.T_stop
    assert tr.error_budget <= tr.skeleton.error_variance


def test_coupling_rejects_bad_parameters():
    with pytest.raises(ValueError):
        build_coupling(B15, 0.0)
    with pytest.raises(ValueError):
        build_coupling(B15, 0.3, eta=1.5)


def test_transcript_files(tmp_path):
    tr = build_coupling(B15, 0.3, horizon=0.2, seed=5, n=16)
    names = sorted(p.name for p in tr.write(tmp_path))
    assert names == ["N_paths.csv", "pi_x.csv", "pi_z_minus.csv", "pi_z_plus.csv", "skeleton.csv",
                     "stopping_times.csv"]
    assert "T_stop" in (tmp_path / "stopping_times.csv").read_text()


# ---------------------------------------------------------------- sandwich

def test_sandwich_bounds_bracket_v():
    table = SpeedTable(B15, t_min=1e-4, t_max=2.0)
    lo, hi = sandwich_bounds(table, 0.05, 0.3)
    assert lo < table.v(0.05) < hi


def test_kingman_sandwich_covers():
    rep = sandwich_experiment(LambdaMeasure.kingman(1.0), 0.3, (0.2, 0.1), n=2000, runs=200, seed=2)
    assert rep.branch == "finite" and np.all(rep.coverage == 1.0) and rep.nondecreasing


def test_bolthausen_sznitman_takes_the_no_saturation_branch():
    rep = sandwich_experiment(LambdaMeasure.uniform(), 0.3, (0.1,), n=100, runs=50, seed=1, n_list=(100, 1000))
    assert rep.branch == "no_saturation" and rep.nondecreasing
    assert rep.mean_counts[1] > rep.mean_counts[0]


# ---------------------------------------------------------------- marginal law

def test_marginal_law_atom():
    rep = marginal_law_test(LambdaMeasure.atom(0.5, 1.0), 0.5, 8, 3000, seed=4)
    assert rep.pvalue > 1e-3 and rep.pvalue_reversed > 1e-3
    assert rep.mean_levy_2n >= rep.mean_levy


def test_marginal_law_beta():
    rep = marginal_law_test(B15, 0.1, 8, 1500, seed=7, cutoff=1e-2)
    assert rep.pvalue > 1e-3 and rep.pvalue_reversed > 1e-3


def test_marginal_law_at_time_zero():
    rep = marginal_law_test(B15, 0.0, 8, 10, seed=0)
    assert rep.mean_levy == rep.mean_chain == 8


def test_small_jumps_are_merged_in_order():
    sk = simulate_levy(B15, 1.0, 0.3, 0.05, 11)
    base = pi_x(sk)
    pts = with_small_jumps(base, B15, 0.05, 0.3, 16, np.random.default_rng(3))
    assert np.all(np.diff(pts.times) >= 0) and len(pts) > len(base)
    big = pts.sizes >= 0.05
    assert np.array_equal(pts.times[big], base.times) and np.array_equal(pts.sizes[big], base.sizes)
    small = np.flatnonzero(~big)
    assert set(pts.overrides) == set(small.tolist())
    for k in small:
        assert np.sum(pts.overrides[k] <= pts.sizes[k]) >= 2


# ---------------------------------------------------------------- CSBP type count

def test_conditioned_binomial_law():
    rng = np.random.default_rng(0)
    b, p, runs = 10, 0.2, 20_000
    draws = np.array([_cond_heads(rng, b, p) for _ in range(runs)])
    ks = np.arange(2, b + 1)
    probs = stats.binom.pmf(ks, b, p)
    probs /= probs.sum()
    obs = np.array([np.sum(draws == k) for k in ks])
    keep = probs * runs >= 5
    exp = np.append(probs[keep] * runs, probs[~keep].sum() * runs)
    obs = np.append(obs[keep], obs[~keep].sum())
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_backward_count_matches_forward_lookdown():
    atom = LambdaMeasure.atom(0.3, 2.0)
    n, t, runs = 10, 0.5, 2000
    fwd, back = [], []
    for s in range(runs):
        path = simulate_csbp(atom, 1.0, t, 0.1, s)
        count = csbp_type_count(path, t, n, np.random.default_rng([s, 1]))
        if path.extinct and path.zeta <= t:
            # extinct by t: the count is 0 by convention, while a finite lookdown keeps its types
            assert count == 0
            continue
        fwd.append(run_lookdown(pi_z(path, horizon=t), n, t, CoinSource(s)).n_at(t))
        back.append(count)
    fwd, back = np.array(fwd), np.array(back)
    table = np.array([[np.sum(a == k) for k in range(n + 1)] for a in (fwd, back)])
    table = table[:, table.sum(axis=0) > 0]
    assert stats.chi2_contingency(table).pvalue > 1e-3


def test_small_jump_stream_is_consistent_across_cutoffs():
    n, t, runs = 20, 0.3, 800
    means = []
    for cutoff in (0.05, 0.005):
        small = dropped_variance_rate(B15, cutoff)
        c = []
        for s in range(runs):
            path = simulate_csbp(B15, 1.0, t, cutoff, s)
            rng = np.random.default_rng([s, 9])
            sampler = BufferedSampler(B15, 0.0, float(np.nextafter(cutoff, 0.0)), 0.0, rng)
            c.append(csbp_type_count(path, t, n, rng, sampler, small))
        means.append((np.mean(c), np.std(c, ddof=1) / math.sqrt(runs)))
    (m1, s1), (m2, s2) = means
    assert abs(m1 - m2) <= 3 * math.hypot(s1, s2)


def test_extinct_path_has_no_types():
    path = simulate_csbp(B15, 1.0, 5.0, 1e-2, 0)
    seed = 0
    while not (path.extinct and path.zeta < 5.0):
        seed += 1
        path = simulate_csbp(B15, 1.0, 5.0, 1e-2, seed)
    assert csbp_type_count(path, 5.0, 10, np.random.default_rng(0)) == 0


def test_poisson_count_at_moderate_time():
    rep = poisson_count_check(B15, 2.0, 100, 400, seed=1, cutoff=1e-2)
    assert rep.saturated and abs(rep.z_mean) <= 3.0
    # the cutoff drops the small jumps from Z, which thins the variance a little
    assert abs(rep.var / rep.v - 1.0) <= 0.25
