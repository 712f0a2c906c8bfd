import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from phidelta.baselines import (
    UnsupportedInstanceError,
    chernoff_run,
    d_min,
    gjl_action,
    gjl_expected_samples,
    gjl_mean_samples,
    maximin_distribution,
    nj1_run,
    posterior_sampler,
    vanilla_vs_gjl_check,
)
from phidelta.dist import Density
from phidelta.model import ProblemInstance, build_counterexample


def _grid_maximin(D, steps=200):
    """Brute-force simplex search for up to three actions."""
    n = D.shape[1]
    best = -np.inf
    if n == 1:
        return D[:, 0].min()
    for i in range(steps + 1):
        if n == 2:
            nus = [np.array([i, steps - i]) / steps]
        else:
            nus = [np.array([i, j, steps - i - j]) / steps for j in range(steps + 1 - i)]
        for nu in nus:
            best = max(best, (D @ nu).min())
    return best


@settings(max_examples=40)
@given(st.integers(1, 3).flatmap(lambda n: st.lists(
    st.lists(st.floats(0, 5), min_size=n, max_size=n), min_size=1, max_size=5)))
def test_maximin_matches_grid(rows):
    D = np.array(rows)
    res = maximin_distribution(D)
    assert res.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert (D @ res.probs).min() >= res.value - 1e-9
    grid = _grid_maximin(D)
    assert grid <= res.value + 1e-8
    # grid spacing 1/200 can lose at most that fraction of the largest entry
    assert res.value <= grid + D.max() / 100 + 1e-9


def test_maximin_pure_strategy():
    D = np.array([[1.0, 3.0], [2.0, 4.0]])
    res = maximin_distribution(D)
    np.testing.assert_allclose(res.probs, [0, 1], atol=1e-9)
    assert res.value == pytest.approx(3.0)


def test_maximin_matching_pennies():
    res = maximin_distribution(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(res.probs, [0.5, 0.5], atol=1e-9)
    assert res.value == pytest.approx(0.5)


def _posterior(inst, trace):
    """Full-density log posterior after each prefix of the trace."""
    logp = np.zeros(inst.H)
    out = [logp.copy()]
    for a, x in trace:
        logp = logp + [inst.density(i, a).log_density(x) for i in range(inst.H)]
        out.append(logp.copy())
    return [np.exp(lp - np.logaddexp.reduce(lp)) for lp in out]


@pytest.mark.parametrize("runner", [chernoff_run, nj1_run])
def test_stop_rule_from_trace(runner):
    inst = ProblemInstance.from_params("normal", [[0, 1], [1, 1], [0, 3]])
    sampler = posterior_sampler(inst)
    delta = 1e-3
    for seed in range(10):
        theta = seed % 3
        rho = 0.8 if runner is nj1_run else None
        tr = sampler.run(delta, theta, seed, rho, "x", trace=True)
        post = _posterior(inst, tr.trace)
        assert len(post) == tr.total_samples + 1
        for p in post[:-1]:
            assert p.max() < 1 - delta + 1e-12
        assert post[-1].max() >= 1 - delta - 1e-12
        assert int(np.argmax(post[-1])) == tr.decision


def test_chernoff_actions_follow_map():
    inst = ProblemInstance.from_params("normal", [[0, 0, 2], [1, 0, 2], [0, 2, 0]])
    sampler = posterior_sampler(inst)
    tr = sampler.run(1e-4, 2, 7, None, "chernoff", trace=True)
    post = _posterior(inst, tr.trace)
    for p, (a, _) in zip(post, tr.trace):
        assert sampler.chernoff_nu(int(np.argmax(p))).probs[a] > 1e-9


def test_nj1_explores_until_rho():
    inst = ProblemInstance.from_params("normal", [[0, 0, 2], [1, 0, 2], [0, 2, 0]])
    sampler = posterior_sampler(inst)
    explore = sampler.explore_nu().probs
    for seed in range(5):
        tr = sampler.run(1e-4, seed % 3, seed, 0.8, "nj1", trace=True)
        post = _posterior(inst, tr.trace)
        for p, (a, _) in zip(post, tr.trace):
            if p.max() <= 0.8 - 1e-9:
                assert explore[a] > 1e-9


def test_posterior_deterministic():
    inst = build_counterexample(0.1)
    a = chernoff_run(inst, 1e-3, 1, 5)
    b = chernoff_run(inst, 1e-3, 1, 5)
    assert (a.total_samples, a.decision, a.action_counts) == (b.total_samples, b.decision, b.action_counts)


def test_nj1_rho_range():
    with pytest.raises(ValueError):
        nj1_run(build_counterexample(0.1), 1e-3, 0, 0, rho=0.3)


def test_inverse_cdf_sampling_distribution():
    # baselines draw observations by inverse CDF; check the draws are Exp(2)
    d = Density.exponential(2.0)
    u = np.random.default_rng(0).random(20000)
    x = np.array([d.quantile(v) for v in u])
    assert stats.kstest(x, "expon", args=(0, 0.5)).pvalue > 1e-3


class TestGjl:
    def test_single_action_formula(self):
        inst = ProblemInstance.from_params("normal", [[0.0], [1.5]])
        delta = 1e-3
        kl = 1.5**2 / 2
        for theta in (0, 1):
            n, seq = gjl_expected_samples(inst, delta, theta)
            assert seq == [0]
            assert n == pytest.approx(math.log(2 / delta) / kl)

    def test_d_min_exponential(self):
        inst = ProblemInstance.from_params("exponential", [[1.0], [2.0], [4.0]])
        K = inst.kld_matrix(0)
        assert d_min(inst, 0, [0, 1, 2]) == pytest.approx(min(K[i, j] for i, j in itertools.permutations(range(3), 2)))
        assert d_min(inst, 0, [1]) == math.inf

    def test_action_prefers_distinct_means(self):
        inst = ProblemInstance.from_params("normal", [[0, 0, 0], [0, 5, 1], [0, 10, 2]])
        assert gjl_action(inst, range(3)) == 1
        # equal group counts: larger D_min wins
        inst2 = ProblemInstance.from_params("normal", [[0, 0], [1, 3]])
        assert gjl_action(inst2, range(2)) == 1

    def test_ties_smallest_action(self):
        inst = ProblemInstance.from_params("normal", [[0, 0], [1, 1]])
        assert gjl_action(inst, range(2)) == 0

    def test_multi_stage_sequence(self):
        inst = ProblemInstance.from_params("normal", [[0, 0], [0, 1], [2, 0], [2, 1]])
        delta = 1e-2
        n, seq = gjl_expected_samples(inst, delta, 3)
        assert len(seq) == 2
        L = math.log(4 / delta)
        # stage one: means {0,2} gap 2; stage two: means {0,1} gap 1
        assert n == pytest.approx(L / 2 + L / 0.5)
        mean_n, mean_r = gjl_mean_samples(inst, delta)
        assert mean_r == 2

    def test_mixed_family_rejected(self):
        inst = ProblemInstance(((Density.normal(0.0),), (Density.exponential(1.0),)))
        with pytest.raises(UnsupportedInstanceError):
            gjl_expected_samples(inst, 0.1, 0)

    def test_vanilla_replay_small(self):
        # small gaps keep stages long, where overshoot is a minor share of N
        inst = ProblemInstance.from_params("normal", [[0, 0], [0, 0.5], [0.5, 0]])
        rows = vanilla_vs_gjl_check(inst, 1e-3, trials=300, seed=1)
        assert all(r.ok for r in rows)
