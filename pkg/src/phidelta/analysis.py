"""Predicted sample counts, lower bounds, risk envelopes and exhaustive
decision-tree search for the staged elimination algorithm.

Predictions follow the correctness-conditioned trajectory: every stage is
assumed to keep the true hypothesis' cluster.  Stage lengths use
ln((H - 1) / delta) / d with d the smallest drift of the true
representative's LLR against a rival representative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .baselines import maximin_distribution
from .cluster import ClusterPlan
from .engine import NoEligibleActionError, select_action, threshold
from .model import ProblemInstance

DEFAULT_MAX_H = 8


class ClusteringViolationError(ValueError):
    """A rival representative has non-positive drift; the stage would not end."""


# --------------------------------------------------------------------------
# drifts and stage predictions


def _rep_drift(inst: ProblemInstance, plan: ClusterPlan, a: int, theta: int, c_own: int, c_other: int) -> float:
    ac = plan[a]
    if ac.virtual is not None:
        key = ("vdrift", a, theta, c_own, c_other)
        if key not in plan.cache:
            plan.cache[key] = ac.virtual.delta_kld(inst.density(theta, a), c_own, c_other)
        return plan.cache[key]
    K = inst.kld_matrix(a)
    return float(K[theta, ac.reps[c_other].index] - K[theta, ac.reps[c_own].index])


def delta_kld(inst: ProblemInstance, plan: ClusterPlan, i: int, j: int, k: int, a: int) -> float:
    """Drift of the k-versus-j LLR when samples come from hypothesis i.

    Real densities: KLD(f_i || f_j) - KLD(f_i || f_k).  When the action has
    virtual representatives, j and k stand for their clusters'
    representatives.
    """
    ac = plan[a]
    if ac.virtual is not None:
        cj, ck = ac.labels[j], ac.labels[k]
        if cj == ck:
            return 0.0
        return ac.virtual.delta_kld(inst.density(i, a), ck, cj)
    K = inst.kld_matrix(a)
    return float(K[i, j] - K[i, k])


@dataclass(frozen=True)
class StagePrediction:
    action: int
    theta: int
    contestants: tuple[int, ...]
    drifts: dict[int, float]  # rival contestant -> drift
    d: float
    gamma: float

    @property
    def tau(self) -> float:
        return self.gamma / self.d


def predict_stage(inst: ProblemInstance, plan: ClusterPlan, alive: Iterable[int], a: int, delta: float,
                  true_theta: int, gamma: float | None = None) -> StagePrediction:
    alive = frozenset(alive)
    contestants = tuple(sorted(plan.repr_set(alive, a)))
    if len(contestants) < 2:
        raise ValueError(f"action {a} does not split {sorted(alive)}")
    gamma = threshold(inst.H, delta) if gamma is None else gamma
    lab = plan.labels(a)
    own = lab[true_theta]
    drifts = {j: _rep_drift(inst, plan, a, true_theta, own, lab[j]) for j in contestants if lab[j] != own}
    d = min(drifts.values())
    if not d > 0:
        raise ClusteringViolationError(f"non-positive drift {d:.4g} under action {a} for hypothesis {true_theta}")
    return StagePrediction(a, int(true_theta), contestants, drifts, d, gamma)


# --------------------------------------------------------------------------
# totals


@dataclass(frozen=True)
class UsageProfile:
    """Correctness-conditioned stages for one hypothesis.

    ``usage[a]`` is the share of expected samples spent on action ``a``.
    """

    theta: int
    stages: tuple[StagePrediction, ...]

    @property
    def R(self) -> int:
        return len(self.stages)

    @property
    def total(self) -> float:
        return sum(s.tau for s in self.stages)

    @property
    def usage(self) -> dict[int, float]:
        tot = self.total
        out: dict[int, float] = {}
        for s in self.stages:
            out[s.action] = out.get(s.action, 0.0) + s.tau / tot
        return out

    @property
    def mean_drift(self) -> float:
        """Drift averaged over actions drawn from the usage distribution."""
        tot = self.total
        return sum(s.tau / tot * s.d for s in self.stages)

    def decomposed_total(self, gamma: float) -> float:
        """R * gamma / mean drift; equals ``total`` when every stage uses ``gamma``."""
        return self.R * gamma / self.mean_drift


@dataclass(frozen=True)
class TotalPrediction:
    delta: float
    profiles: tuple[UsageProfile, ...]

    @property
    def per_theta(self) -> np.ndarray:
        return np.array([p.total for p in self.profiles])

    @property
    def mean(self) -> float:
        return float(self.per_theta.mean())

    @property
    def mean_stages(self) -> float:
        return float(np.mean([p.R for p in self.profiles]))


def trajectory(inst: ProblemInstance, plan: ClusterPlan, true_theta: int,
               action_policy: Callable[[frozenset[int]], int] | None = None) -> list[tuple[frozenset[int], int]]:
    """(alive set, action) for every stage when each stage keeps the true cluster."""
    alive = frozenset(range(inst.H))
    out = []
    while len(alive) > 1:
        a = action_policy(alive) if action_policy else select_action(inst, plan, alive)
        out.append((alive, a))
        alive = alive & plan.equiv(true_theta, a)
    return out


def predict_total(inst: ProblemInstance, plan: ClusterPlan, delta: float,
                  action_policy: Callable[[frozenset[int]], int] | None = None) -> TotalPrediction:
    profiles = []
    for theta in range(inst.H):
        stages = tuple(predict_stage(inst, plan, alive, a, delta, theta)
                       for alive, a in trajectory(inst, plan, theta, action_policy))
        profiles.append(UsageProfile(theta, stages))
    return TotalPrediction(delta, tuple(profiles))


# --------------------------------------------------------------------------
# bounds and risk


def lower_bound_phi(inst: ProblemInstance, plan: ClusterPlan, delta: float,
                    profiles: Iterable[UsageProfile] | None = None) -> float:
    """Uniform average of ln((H - 1) / delta) / E_{usage}[drift]: one stage's worth per hypothesis."""
    if profiles is None:
        profiles = predict_total(inst, plan, delta).profiles
    gamma = threshold(inst.H, delta)
    return float(np.mean([gamma / p.mean_drift for p in profiles]))


def nj_rates(inst: ProblemInstance) -> np.ndarray:
    """max over action mixtures of min over rivals of the mixed KLD, per true hypothesis."""
    K = np.stack([inst.kld_matrix(a) for a in inst.actions])
    H = inst.H
    return np.array([maximin_distribution(K[:, i, [j for j in range(H) if j != i]].T).value
                     for i in range(H)])


def lower_bound_nj(inst: ProblemInstance, delta: float, rates: np.ndarray | None = None) -> float:
    """Uniform average of ln(1/delta) over the best worst-case mixed KLD."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    rates = nj_rates(inst) if rates is None else rates
    return float(np.mean(math.log(1.0 / delta) / rates))


def abr(delta: float, mean_n: float, p_e: float) -> float:
    """Average Bayes risk: delta * E[N] + P(error)."""
    if mean_n < 0 or not 0.0 <= p_e <= 1.0:
        raise ValueError("mean_n must be >= 0 and p_e in [0, 1]")
    return delta * mean_n + p_e


@dataclass(frozen=True)
class AbrEnvelope:
    c1: float
    c2: float
    H: int

    def bounds(self, delta: float) -> tuple[float, float]:
        g = threshold(self.H, delta)
        return delta * self.c1 * g, delta * self.c2 * g + delta


def abr_envelope(inst: ProblemInstance, plan: ClusterPlan, deltas: Iterable[float]) -> AbrEnvelope:
    """Per-instance constants c1, c2 with c1 * gamma <= E[N | theta] <= c2 * gamma over the grid."""
    ratios = []
    for d in deltas:
        tp = predict_total(inst, plan, d)
        ratios.extend(tp.per_theta / threshold(inst.H, d))
    return AbrEnvelope(float(min(ratios)), float(max(ratios)), inst.H)


# --------------------------------------------------------------------------
# decision trees


@dataclass
class TreeNode:
    alive: frozenset[int]
    action: int | None = None
    children: list["TreeNode"] = field(default_factory=list)
    stage_cost: float = 0.0  # sum over alive hypotheses of the stage's expected samples

    def subtree_cost(self) -> float:
        return self.stage_cost + sum(c.subtree_cost() for c in self.children)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def lines(self, depth: int = 0) -> list[str]:
        pad = "  " * depth
        if self.action is None:
            out = [f"{pad}{sorted(self.alive)}"]
        else:
            out = [f"{pad}{sorted(self.alive)} action {self.action} cost {self.stage_cost:.6g}"]
        for c in self.children:
            out.extend(c.lines(depth + 1))
        return out


@dataclass
class DecisionTree:
    root: TreeNode
    H: int

    @property
    def cost(self) -> float:
        """Expected samples under the uniform prior."""
        return self.root.subtree_cost() / self.H

    @property
    def edges(self) -> int:
        return sum(1 for n in self.root.walk() if n.action is not None)

    def path_actions(self, theta: int) -> list[int]:
        node, out = self.root, []
        while node.action is not None:
            out.append(node.action)
            node = next(c for c in node.children if theta in c.alive)
        return out


def _split(plan: ClusterPlan, alive: frozenset[int], a: int) -> list[frozenset[int]]:
    lab = plan.labels(a)
    groups: dict[int, set[int]] = {}
    for i in sorted(alive):
        groups.setdefault(lab[i], set()).add(i)
    return [frozenset(g) for g in groups.values()]


def _stage_cost(inst, plan, alive, a, delta) -> float:
    return sum(predict_stage(inst, plan, alive, a, delta, t).tau for t in sorted(alive))


def policy_tree(inst: ProblemInstance, plan: ClusterPlan, delta: float,
                action_policy: Callable[[frozenset[int]], int] | None = None) -> DecisionTree:
    """Tree traced by a deterministic action policy (the TVD rule by default)."""

    def build(alive: frozenset[int]) -> TreeNode:
        if len(alive) == 1:
            return TreeNode(alive)
        a = action_policy(alive) if action_policy else select_action(inst, plan, alive)
        kids = [build(v) for v in _split(plan, alive, a)]
        return TreeNode(alive, a, kids, _stage_cost(inst, plan, alive, a, delta))

    return DecisionTree(build(frozenset(range(inst.H))), inst.H)


def mwdt_bruteforce(inst: ProblemInstance, plan: ClusterPlan, delta: float,
                    max_H: int = DEFAULT_MAX_H) -> DecisionTree:
    """Minimum expected-cost tree over all action choices at every node.

    Dynamic programming over alive subsets.  An action is usable at a node
    when it splits the node into two or more clusters and every stage drift is
    positive.  Ties keep the smallest action id.
    """
    if inst.H > max_H:
        raise ValueError(f"exhaustive search limited to H <= {max_H}, got {inst.H}")
    best: dict[frozenset[int], tuple[float, int | None]] = {}

    def solve(alive: frozenset[int]) -> float:
        if len(alive) == 1:
            return 0.0
        if alive in best:
            return best[alive][0]
        top, top_a = math.inf, None
        for a in inst.actions:
            kids = _split(plan, alive, a)
            if len(kids) < 2:
                continue
            try:
                c = _stage_cost(inst, plan, alive, a, delta)
            except ClusteringViolationError:
                continue
            c += sum(solve(v) for v in kids)
            if c < top:
                top, top_a = c, a
        best[alive] = (top, top_a)
        return top

    root = frozenset(range(inst.H))
    if not math.isfinite(solve(root)):
        raise NoEligibleActionError("no action sequence isolates every hypothesis")

    def build(alive: frozenset[int]) -> TreeNode:
        if len(alive) == 1:
            return TreeNode(alive)
        a = best[alive][1]
        return TreeNode(alive, a, [build(v) for v in _split(plan, alive, a)],
                        _stage_cost(inst, plan, alive, a, delta))

    return DecisionTree(build(root), inst.H)


# --------------------------------------------------------------------------
# stage-count constructions


def chain_instance(H: int, gap: float = 1.0) -> ProblemInstance:
    """Unit normals where action r singles out hypothesis r and lumps the rest.

    The TVD rule then peels off one hypothesis per stage in index order.
    """
    if H < 2:
        raise ValueError("H must be at least 2")
    params = np.zeros((H, H - 1))
    for r in range(H - 1):
        params[r, r] = gap
    return ProblemInstance.from_params("normal", params)


def halving_instance(H: int, gap: float = 1.0) -> ProblemInstance:
    """Unit normals where action b reads bit b of the hypothesis index.

    Every stage halves the alive set; H must be a power of two.
    """
    bits = int(round(math.log2(H)))
    if H < 2 or 2**bits != H:
        raise ValueError("H must be a power of two >= 2")
    params = np.array([[gap * ((i >> b) & 1) for b in range(bits)] for i in range(H)], dtype=float)
    return ProblemInstance.from_params("normal", params)


def chain_stage_counts(H: int) -> np.ndarray:
    """Exact stages per hypothesis for ``chain_instance``: min(theta + 1, H - 1)."""
    return np.minimum(np.arange(H) + 1, H - 1)
