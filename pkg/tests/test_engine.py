import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from phidelta.analysis import chain_instance, chain_stage_counts, halving_instance
from phidelta.cluster import build_plan
from phidelta.engine import (
    LlrState,
    NoEligibleActionError,
    RunawayStageError,
    action_scores,
    armitage_stage,
    run,
    run_random,
    select_action,
    threshold,
)
from phidelta.model import ProblemInstance, build_counterexample


def _one_at_a_time(inst, plan, a, contestants, gamma, xs):
    """Unbatched oracle: walk the sample stream one draw at a time."""
    ac = plan[a]
    reps = [ac.reps[ac.labels[i]] for i in contestants]
    S = np.zeros(len(contestants))
    for n, x in enumerate(xs, start=1):
        S += [r.log_density(inst, a, x) for r in reps]
        best = [t for t in range(len(S)) if all(S[t] - S[u] >= gamma for u in range(len(S)) if u != t)]
        if best:
            return contestants[best[0]], n
    raise AssertionError("oracle ran out of samples")


def test_threshold():
    assert threshold(2, 0.5) == pytest.approx(math.log(2))
    assert threshold(32, 1e-5) == pytest.approx(math.log(31e5))
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            threshold(3, bad)


def test_llr_antisymmetric():
    st_ = LlrState((0, 3, 5), np.array([0.5, -1.25, 2.0]))
    L = st_.L
    np.testing.assert_array_equal(L, -L.T)
    assert st_.winners(1.4) == [5]
    assert st_.winners(2.0) == []


class TestSelection:
    inst = build_counterexample(0.1)
    plan = build_plan(inst, "zero")

    def test_counterexample_choices(self):
        assert select_action(self.inst, self.plan, {0, 1, 2}) == 0
        assert select_action(self.inst, self.plan, {1, 2}) == 1
        assert select_action(self.inst, self.plan, {0, 1}) == 0

    def test_scores_are_min_tvd(self):
        s = action_scores(self.inst, self.plan, {0, 1, 2})
        for a in self.inst.actions:
            T = self.inst.tvd_matrix(a)
            lab = self.plan.labels(a)
            cross = [T[i, j] for i, j in ((0, 1), (0, 2), (1, 2)) if lab[i] != lab[j]]
            assert s[a] == pytest.approx(min(cross))

    def test_ties_go_to_smallest_action(self):
        inst = ProblemInstance.from_params("normal", [[0, 0, 0], [1, 1, 1]])
        assert select_action(inst, build_plan(inst, "zero"), {0, 1}) == 0

    def test_same_cluster_pairs_ignored(self):
        # action 0 lumps {0,1}; its score only sees pairs across clusters
        inst = ProblemInstance.from_params("normal", [[0, 0], [0.05, 1], [5, 2]])
        plan = build_plan(inst, [0.1, 0.0])
        assert action_scores(inst, plan, {0, 1, 2})[0] == pytest.approx(inst.tvd_matrix(0)[1, 2])
        assert action_scores(inst, plan, {0, 1})[0] == -np.inf

    def test_no_eligible_action(self):
        inst = ProblemInstance.from_params("normal", [[0.0], [0.1]])
        plan = build_plan(inst, 0.5)
        with pytest.raises(NoEligibleActionError):
            select_action(inst, plan, {0, 1})
        with pytest.raises(NoEligibleActionError):
            run(inst, plan, 0.1, 0, 0)


class TestStage:
    def test_tiny_threshold_one_sample(self):
        inst = ProblemInstance.from_params("normal", [[0.0], [3.0]])
        plan = build_plan(inst, "zero")
        for seed in range(20):
            _, n, _ = armitage_stage(inst, plan, 0, (0, 1), 1e-9, seed, 0)
            assert n == 1

    @pytest.mark.parametrize("family,params", [
        ("normal", [[0.0], [0.7], [1.5], [1.6]]),
        ("exponential", [[1.0], [1.8], [3.0]]),
    ])
    def test_batched_matches_sequential(self, family, params):
        inst = ProblemInstance.from_params(family, params)
        plan = build_plan(inst, "zero")
        H = inst.H
        for seed in range(15):
            theta = seed % H
            w, n, _ = armitage_stage(inst, plan, 0, range(H), 4.0, seed, theta)
            xs = inst.density(theta, 0).sample(np.random.default_rng(seed), 200_000)
            assert (w, n) == _one_at_a_time(inst, plan, 0, tuple(range(H)), 4.0, xs)

    def test_runaway(self):
        inst = ProblemInstance.from_params("normal", [[0.0], [1e-4]])
        plan = build_plan(inst, "zero")
        with pytest.raises(RunawayStageError) as ei:
            armitage_stage(inst, plan, 0, (0, 1), 30.0, 0, 0, cap=500)
        assert ei.value.state.n == 500

    def test_bad_arguments(self):
        inst = build_counterexample(0.1)
        plan = build_plan(inst, "zero")
        with pytest.raises(ValueError):
            armitage_stage(inst, plan, 0, (1,), 1.0, 0, 0)
        with pytest.raises(ValueError):
            armitage_stage(inst, plan, 0, (0, 1), 0.0, 0, 0)


class TestRuns:
    def test_deterministic(self):
        inst = build_counterexample(0.2)
        plan = build_plan(inst, "zero")
        a = run(inst, plan, 1e-3, 2, 99)
        b = run(inst, plan, 1e-3, 2, 99)
        assert a.lines() == b.lines()

    def test_transcript(self):
        inst = build_counterexample(0.1)
        plan = build_plan(inst, "zero")
        tr = run(inst, plan, 1e-3, 1, 5)
        assert tr.decision is not None
        assert tr.total_samples == sum(s.samples for s in tr.stages)
        assert tr.lines()[-1].startswith(f"decision {tr.decision} true 1")

    @pytest.mark.parametrize("H", [3, 5, 7])
    def test_chain_stage_counts(self, H):
        inst = chain_instance(H, gap=3.0)
        plan = build_plan(inst, "zero")
        got = [run(inst, plan, 1e-6, t, t).n_stages for t in range(H)]
        assert got == list(chain_stage_counts(H))

    def test_halving(self):
        inst = halving_instance(16, gap=3.0)
        plan = build_plan(inst, "zero")
        assert {run(inst, plan, 1e-6, t, t).n_stages for t in range(16)} == {4}

    def test_dynamic_threshold(self):
        inst = chain_instance(4, gap=3.0)
        plan = build_plan(inst, "zero")
        tr = run(inst, plan, 1e-3, 3, 0, dynamic_threshold=True)
        for s in tr.stages:
            assert s.gamma == pytest.approx(math.log((len(s.contestants) - 1) / 1e-3))
        fixed = run(inst, plan, 1e-3, 3, 0)
        assert all(s.gamma == pytest.approx(math.log(3 / 1e-3)) for s in fixed.stages)

    def test_action_policy_override(self):
        inst = build_counterexample(0.1)
        plan = build_plan(inst, "zero")
        tr = run(inst, plan, 1e-3, 0, 3, action_policy=lambda alive: 2)
        assert [s.action for s in tr.stages] == [2]

    def test_run_random_uniform(self):
        inst = chain_instance(5, gap=4.0)
        plan = build_plan(inst, "zero")
        rng = np.random.default_rng(11)
        counts = np.bincount([run_random(inst, plan, 0.1, rng)[0] for _ in range(2000)], minlength=5)
        assert stats.chisquare(counts).pvalue > 1e-3


@st.composite
def instances(draw):
    fam = draw(st.sampled_from(["normal", "exponential"]))
    H = draw(st.integers(2, 6))
    A = draw(st.integers(1, 3))
    lo, hi = (-3.0, 3.0) if fam == "normal" else (0.3, 4.0)
    p = draw(st.lists(st.lists(st.floats(lo, hi), min_size=A, max_size=A), min_size=H, max_size=H))
    # keep every pair separated somewhere so the run can finish
    p = np.array(p)
    p[:, 0] = np.linspace(lo, hi, H) if fam == "normal" else np.geomspace(lo, hi, H)
    return ProblemInstance.from_params(fam, p), draw(st.floats(0, 0.3)), draw(st.integers(0, 2**32 - 1))


@settings(max_examples=60)
@given(instances())
def test_stage_invariants(case):
    inst, eps, seed = case
    plan = build_plan(inst, "zero")
    plan = build_plan(inst, [min(eps, 0.5 * plan[a].safe_epsilon) if a == 0 else eps
                             for a in inst.actions])
    rng = np.random.default_rng(seed)
    theta, tr = run_random(inst, plan, 0.05, rng, cap=10**6)
    alive = frozenset(range(inst.H))
    for s in tr.stages:
        assert s.contestants == tuple(sorted(plan.repr_set(alive, s.action)))
        assert s.winner in s.contestants
        assert s.alive_after < alive
        assert s.alive_after == alive & plan.equiv(s.winner, s.action)
        alive = s.alive_after
    assert alive == {tr.decision}
