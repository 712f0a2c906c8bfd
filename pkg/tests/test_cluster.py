import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phidelta.cluster import (
    ClusteringError,
    build_plan,
    check_condition,
    components,
    dbscan_tvd,
    equiv,
    extend_with_unclustered,
    one_minus_alpha_bound,
    plan_from_dict,
    plan_to_dict,
    repr_set,
    safe_epsilon,
    select_epsilon,
    select_representative,
)
from phidelta.dist import Family
from phidelta.model import ProblemInstance, build_counterexample


def _exp(rates):
    return ProblemInstance.from_params("exponential", [[r] for r in rates])


def _norm(means):
    return ProblemInstance.from_params("normal", [[m] for m in means])


def _oracle_components(D, eps):
    """Breadth-first flood fill, labels by smallest member."""
    n = len(D)
    lab = [-1] * n
    nxt = 0
    for s in range(n):
        if lab[s] >= 0:
            continue
        lab[s] = nxt
        queue = [s]
        while queue:
            u = queue.pop()
            for v in range(n):
                if lab[v] < 0 and D[u][v] <= eps:
                    lab[v] = nxt
                    queue.append(v)
        nxt += 1
    return lab


class TestDbscan:
    def test_close_rates_merge(self):
        inst = _exp([1.0, 1.05, 3.0])
        # TVD(Exp(1), Exp(1.05)) is about 0.0178
        assert list(dbscan_tvd(inst, 0, 0.05)) == [0, 0, 1]
        assert list(dbscan_tvd(inst, 0, 0.01)) == [0, 1, 2]

    def test_chaining(self):
        inst = _norm([0.0, 0.1, 0.2, 0.3, 5.0])
        eps = inst.tvd_matrix(0)[0, 1] * 1.0000001
        assert list(dbscan_tvd(inst, 0, eps)) == [0, 0, 0, 0, 1]
        assert inst.tvd_matrix(0)[0, 3] > eps

    def test_zero_eps_groups_identical(self):
        inst = _norm([2.0, 2.0, 1.0, 2.0])
        assert list(dbscan_tvd(inst, 0, 0.0)) == [0, 0, 1, 0]

    def test_negative_eps(self):
        with pytest.raises(ClusteringError):
            dbscan_tvd(_norm([0, 1]), 0, -0.1)

    @settings(max_examples=200)
    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=9), st.floats(0, 0.8))
    def test_matches_flood_fill(self, means, eps):
        D = _norm(means).tvd_matrix(0)
        assert list(components(D, eps)) == _oracle_components(D.tolist(), eps)

    @settings(max_examples=200)
    @given(st.lists(st.floats(0.2, 5), min_size=2, max_size=9), st.floats(0, 0.6))
    def test_partition_and_separation(self, rates, eps):
        inst = _exp(rates)
        lab = dbscan_tvd(inst, 0, eps)
        T = inst.tvd_matrix(0)
        assert sorted(set(lab)) == list(range(lab.max() + 1))
        # canonical: first appearance order
        firsts = [list(lab).index(c) for c in range(lab.max() + 1)]
        assert firsts == sorted(firsts)
        for i, j in itertools.combinations(range(len(rates)), 2):
            if lab[i] != lab[j]:
                assert T[i, j] > eps


class TestEpsilon:
    def test_exponential_rule(self):
        assert select_epsilon(_exp([1.0, 2.0, 4.0]), 0) == pytest.approx(0.5, abs=1e-15)

    def test_normal_rule(self):
        assert select_epsilon(_norm([0.0, 1.0]), 0) == pytest.approx(0.3829249225480262, abs=1e-12)

    def test_rule_equals_smallest_pairwise_tvd(self):
        # for unit normals 2 Phi(gap/2) - 1 is exactly the TVD of the closest pair
        inst = _norm([-1.0, 0.4, 0.45, 2.0])
        T = inst.tvd_matrix(0)
        assert select_epsilon(inst, 0) == pytest.approx(T[np.triu_indices(len(T), 1)].min(), rel=1e-9)

    def test_exponential_rule_dominates_tvd(self):
        inst = _exp([0.7, 1.3, 2.9, 3.1])
        T = inst.tvd_matrix(0)
        assert select_epsilon(inst, 0) == pytest.approx(1 - 2.9 / 3.1)
        assert select_epsilon(inst, 0) >= T[np.triu_indices(len(T), 1)].min()

    def test_identical_pair_falls_back(self):
        inst = _norm([0.0, 0.0, 3.0])
        assert select_epsilon(inst, 0) == pytest.approx(0.5 * inst.tvd_matrix(0)[0, 2])
        assert list(dbscan_tvd(inst, 0, select_epsilon(inst, 0))) == [0, 0, 1]

    def test_safe_isolates_distinct(self):
        inst = _exp([1.0, 1.01, 1.02, 7.0])
        assert list(dbscan_tvd(inst, 0, safe_epsilon(inst, 0))) == [0, 1, 2, 3]

    def test_safe_all_identical(self):
        with pytest.raises(ClusteringError):
            safe_epsilon(_norm([1.0, 1.0]), 0)


class TestRepresentatives:
    def test_exponential_max_mean_is_smaller_rate(self):
        inst = _exp([2.0, 3.0])
        assert select_representative(inst, 0, [0, 1]).index == 0
        assert select_representative(inst, 0, [0, 1], "min_mean").index == 1

    def test_normal_max_mean(self):
        inst = _norm([1.9, 2.1])
        assert select_representative(inst, 0, [0, 1]).index == 1

    def test_ties_smallest_index(self):
        inst = _norm([1.0, 2.0, 2.0])
        assert select_representative(inst, 0, [2, 1, 0]).index == 1

    def test_empty(self):
        with pytest.raises(ClusteringError):
            select_representative(_norm([0, 1]), 0, [])


class TestEquivRepr:
    # three clusters {0,1,3,6}, {2,4,5,8}, {7}
    inst = _norm([0, 0, 5, 0, 5, 5, 0, 10, 5])
    plan = build_plan(inst, "zero")

    def test_labels(self):
        assert self.plan.labels(0) == (0, 0, 1, 0, 1, 1, 0, 2, 1)

    def test_equiv(self):
        assert equiv(self.plan, 3, 0) == {0, 1, 3, 6}
        assert equiv(self.plan, 7, 0) == {7}

    def test_repr(self):
        assert repr_set(self.plan, {3, 5, 8}, 0) == {3, 5}
        assert repr_set(self.plan, range(9), 0) == {0, 2, 7}

    def test_repr_empty(self):
        with pytest.raises(ClusteringError):
            repr_set(self.plan, [], 0)


class TestCondition:
    def test_low_cluster_with_max_mean_rep_passes(self):
        inst = _norm([0.0, 0.1, 4.0])
        plan = build_plan(inst, 0.2)
        assert plan.n_clusters(0) == 2
        assert check_condition(inst, 0, plan).ok

    def test_high_cluster_with_max_mean_rep_fails(self):
        # unit normals: the ratio expectation exceeds one exactly when a member
        # sits below its own rep while the foreign rep is lower still
        inst = _norm([0.0, 4.0, 4.2])
        plan = build_plan(inst, 0.2)
        rep = check_condition(inst, 0, plan)
        assert [e.hypothesis for e in rep.failures()] == [1]

    def test_singletons_pass(self):
        inst = build_counterexample(0.1)
        plan = build_plan(inst, "zero")
        for a in inst.actions:
            rep = check_condition(inst, a, plan)
            assert rep.ok
            assert rep.worst == pytest.approx(1.0, abs=1e-9)

    def test_violation_reported(self):
        inst = _norm([0.0, 0.3, -0.5])
        plan = build_plan(inst, [0.13])
        assert plan.labels(0) == (0, 0, 1)
        rep = check_condition(inst, 0, plan)
        assert not rep.ok
        bad = rep.failures()[0]
        # Gaussian MGF: E exp(c X + b) with c = m_oth - m_own
        m_i, m_own, m_oth = 0.0, 0.3, -0.5
        c = m_oth - m_own
        want = math.exp(c * (m_i - (m_oth + m_own) / 2) + c * c / 2)
        assert bad.hypothesis == 0
        assert bad.expectation == pytest.approx(want, rel=1e-9)

    def test_exponential_precondition_recorded(self):
        inst = _exp([1.0, 1.1, 3.0])
        plan = build_plan(inst, 0.1)
        rep = check_condition(inst, 0, plan)
        assert all(e.precondition_ok is not None for e in rep.entries)


class TestPlan:
    def test_epsilon_policies(self):
        inst = _exp([1.0, 2.0, 4.0])
        assert build_plan(inst, "proposition").epsilons == (0.5,)
        assert build_plan(inst, "zero").epsilons == (0.0,)
        with pytest.raises(ValueError):
            build_plan(inst, "widest")

    def test_per_action_eps(self):
        inst = ProblemInstance.from_params("normal", [[0, 0], [0.1, 3], [5, 6]])
        plan = build_plan(inst, (0.2, 0.0))
        assert plan.labels(0) == (0, 0, 1)
        assert plan.labels(1) == (0, 1, 2)

    def test_round_trip(self):
        inst = ProblemInstance.from_params("exponential", [[1, 2], [1.1, 2], [4, 0.5]])
        plan = build_plan(inst, 0.1)
        data = json.loads(json.dumps(plan_to_dict(plan)))
        back = plan_from_dict(inst, data)
        for a in inst.actions:
            assert back.labels(a) == plan.labels(a)
            assert back[a].reps == plan[a].reps
            assert back[a].epsilon == plan[a].epsilon

    def test_round_trip_bad_format(self):
        with pytest.raises(ClusteringError):
            plan_from_dict(_norm([0, 1]), {"format": "other", "actions": []})

    def test_rep_loglik_columns(self):
        inst = _norm([0.0, 0.05, 3.0])
        plan = build_plan(inst, 0.1)
        x = np.array([0.2, -1.0, 2.5])
        ll = plan[0].rep_loglik(inst, x)
        assert ll.shape == (3, 2)
        np.testing.assert_allclose(ll[:, 0], inst.density(1, 0).log_density(x))
        np.testing.assert_allclose(ll[:, 1], inst.density(2, 0).log_density(x))

    def test_extend_with_unclustered(self):
        inst = _norm([0.0, 0.05, 3.0])
        wide, plan = extend_with_unclustered(inst, build_plan(inst, 0.1))
        assert wide.n_actions == 2
        assert plan.labels(0) == (0, 0, 1)
        assert plan.labels(1) == (0, 1, 2)


class TestVirtual:
    inst = ProblemInstance.from_params("normal", [[0.0], [0.2], [3.0], [3.3]])

    def test_normalization(self):
        plan = build_plan(self.inst, 0.2, "virtual")
        vr = plan[0].virtual
        assert vr.k == 2
        for c in range(vr.k):
            assert vr.normalization(c) == pytest.approx(1.0, abs=1e-6)

    def test_alpha_bound_formula(self):
        vr = build_plan(self.inst, 0.2, "virtual")[0].virtual
        assert vr.one_minus_alpha_max == pytest.approx(one_minus_alpha_bound(vr.M_max, vr.k, vr.delta))
        assert vr.satisfies_alpha_bound

    def test_condition_policy_keeps_ratio_below_one(self):
        plan = build_plan(self.inst, 0.2, "virtual", alpha="condition")
        assert check_condition(self.inst, 0, plan).ok

    def test_single_cluster_falls_back_to_real(self):
        plan = build_plan(self.inst, 5.0, "virtual")
        assert plan[0].virtual is None
        assert plan[0].reps[0].kind == "real"

    def test_round_trip_keeps_alpha(self):
        plan = build_plan(self.inst, 0.2, "virtual")
        back = plan_from_dict(self.inst, plan_to_dict(plan))
        assert back[0].virtual.alpha == plan[0].virtual.alpha
        x = np.linspace(-2, 5, 7)
        np.testing.assert_allclose(back[0].rep_loglik(self.inst, x), plan[0].rep_loglik(self.inst, x))

    def test_all_singleton_action_uses_real_reps(self):
        # with the bound at equality, singleton clusters would share one mixture
        inst = ProblemInstance.from_params("normal", [[0.0, 0.0], [0.2, 1.0], [3.0, 2.0]])
        plan = build_plan(inst, (0.2, 0.0), "virtual")
        assert plan[0].virtual is not None
        assert plan[1].virtual is None
        assert [r.index for r in plan[1].reps] == [0, 1, 2]
