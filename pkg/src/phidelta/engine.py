"""Multi-stage elimination with per-stage Armitage tests.

Each stage picks the action whose closest pair of alive, differently
clustered hypotheses is farthest apart in TVD, runs an Armitage tournament
among one contestant per cluster, and keeps only the winner's cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .cluster import ClusterPlan
from .model import ProblemInstance

DEFAULT_CAP = 10**9
FIRST_BLOCK = 16
MAX_BLOCK = 4096


class NoEligibleActionError(RuntimeError):
    """No action splits the alive set into two or more clusters."""


class RunawayStageError(RuntimeError):
    def __init__(self, state: "LlrState", cap: int):
        super().__init__(f"stage exceeded {cap} samples without a winner")
        self.state = state
        self.cap = cap


class MultipleWinnersError(AssertionError):
    pass


def threshold(H: int, delta: float) -> float:
    """ln((H - 1) / delta), in nats."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.log((H - 1) / delta)


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class LlrState:
    """Accumulated log-likelihood of every contestant's representative.

    Pairwise LLRs are differences ``S[i] - S[j]``, so ``L`` is antisymmetric
    by construction.
    """

    contestants: tuple[int, ...]
    S: np.ndarray
    n: int = 0

    @property
    def L(self) -> np.ndarray:
        return self.S[:, None] - self.S[None, :]

    def winners(self, gamma: float) -> list[int]:
        """Contestants whose LLR against every rival is at least ``gamma``."""
        L = self.L
        np.fill_diagonal(L, np.inf)
        with np.errstate(invalid="ignore"):
            ok = np.all(L >= gamma, axis=1)
        return [self.contestants[t] for t in np.flatnonzero(ok)]


@dataclass(frozen=True)
class StageRecord:
    action: int | None
    epsilon: float
    contestants: tuple[int, ...]
    winner: int
    samples: int
    eliminated: frozenset[int]
    alive_after: frozenset[int]
    gamma: float


@dataclass
class RunTranscript:
    true_theta: int
    stages: list[StageRecord] = field(default_factory=list)
    decision: int | None = None
    algorithm: str = "phi_delta"
    action_counts: dict[int, int] | None = None
    trace: list[tuple[int, float]] | None = field(default=None, repr=False)

    @property
    def total_samples(self) -> int:
        return sum(s.samples for s in self.stages)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def correct(self) -> bool:
        return self.decision == self.true_theta

    @property
    def first_stage_error(self) -> bool:
        """True hypothesis dropped in the first stage."""
        return bool(self.stages) and self.true_theta not in self.stages[0].alive_after

    def lines(self) -> list[str]:
        out = []
        for r, s in enumerate(self.stages):
            elim = " ".join(str(i) for i in sorted(s.eliminated))
            out.append(f"stage {r} action {s.action} samples {s.samples} winner {s.winner} eliminated [{elim}]")
        out.append(f"decision {self.decision} true {self.true_theta} total {self.total_samples}")
        return out


# --------------------------------------------------------------------------
# action selection


def _separation(inst: ProblemInstance, plan: ClusterPlan) -> np.ndarray:
    """TVD tensor (A, H, H) with same-cluster pairs set to +inf."""
    key = ("separation", id(inst))
    cached = plan.cache.get(key)
    if cached is not None and cached[0] is inst:
        return cached[1]
    T = np.empty((inst.n_actions, inst.H, inst.H))
    for a in inst.actions:
        lab = np.asarray(plan.labels(a))
        T[a] = np.where(lab[:, None] == lab[None, :], np.inf, inst.tvd_matrix(a))
    plan.cache[key] = (inst, T)
    return T


def action_scores(inst: ProblemInstance, plan: ClusterPlan, alive: Iterable[int]) -> np.ndarray:
    """Smallest cross-cluster TVD among ``alive`` per action; -inf when ineligible."""
    idx = np.array(sorted(alive))
    T = _separation(inst, plan)[:, idx[:, None], idx[None, :]]
    m = T.reshape(inst.n_actions, -1).min(axis=1)
    return np.where(np.isinf(m), -np.inf, m)


def select_action(inst: ProblemInstance, plan: ClusterPlan, alive: Iterable[int]) -> int:
    alive = frozenset(alive)
    if len(alive) < 2:
        raise ValueError("action selection needs at least two alive hypotheses")
    key = ("action", id(inst), alive)
    hit = plan.cache.get(key)
    if hit is not None:
        return hit
    s = action_scores(inst, plan, alive)
    if not np.isfinite(s).any():
        raise NoEligibleActionError(f"no action separates alive set {sorted(alive)}")
    a = int(np.argmax(s))  # first maximum: smallest id wins ties
    plan.cache[key] = a
    return a


# --------------------------------------------------------------------------
# Armitage stage


def armitage_stage(inst: ProblemInstance, plan: ClusterPlan, a: int, contestants: Iterable[int],
                   gamma: float, rng, true_theta: int, cap: int = DEFAULT_CAP) -> tuple[int, int, LlrState]:
    """Sample under ``a`` until one contestant beats every other by ``gamma``.

    Samples come from the true hypothesis' density; likelihoods use the
    contestants' cluster representatives.  Returns (winner, samples, state).
    """
    contestants = tuple(sorted(contestants))
    if len(contestants) < 2:
        raise ValueError("a stage needs at least two contestants")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    rng = as_rng(rng)
    ac = plan[a]
    cols = np.array([ac.labels[i] for i in contestants])
    f = inst.density(true_theta, a)
    state = LlrState(contestants, np.zeros(len(contestants)))
    block = FIRST_BLOCK
    while True:
        x = f.sample(rng, block)
        ll = ac.rep_loglik(inst, x)[:, cols]
        cs = state.S + np.cumsum(ll, axis=0)
        top2 = np.partition(cs, -2, axis=1)[:, -2:]
        with np.errstate(invalid="ignore"):
            gap = top2[:, 1] - top2[:, 0]
            hit = np.flatnonzero(gap >= gamma)
        if hit.size:
            t = int(hit[0])
            state.S = cs[t]
            state.n += t + 1
            won = state.winners(gamma)
            if len(won) != 1:
                raise MultipleWinnersError(f"stage ended with winners {won}")
            return won[0], state.n, state
        state.S = cs[-1]
        state.n += block
        if state.n >= cap:
            raise RunawayStageError(state, cap)
        block = min(2 * block, MAX_BLOCK, max(cap - state.n, 1))


# --------------------------------------------------------------------------
# full runs


def run(inst: ProblemInstance, plan: ClusterPlan, delta: float, true_theta: int, rng,
        cap: int = DEFAULT_CAP, action_policy: Callable[[frozenset[int]], int] | None = None,
        dynamic_threshold: bool = False) -> RunTranscript:
    """Run stages until a single hypothesis is alive.

    ``action_policy`` replaces the TVD-based action choice (used to replay a
    fixed sequence).  With ``dynamic_threshold`` each stage uses
    ln((number of contestants - 1) / delta) instead of ln((H - 1) / delta).
    """
    rng = as_rng(rng)
    gamma = threshold(inst.H, delta)
    alive = frozenset(range(inst.H))
    tr = RunTranscript(int(true_theta))
    while len(alive) > 1:
        a = action_policy(alive) if action_policy else select_action(inst, plan, alive)
        contestants = plan.repr_set(alive, a)
        if len(contestants) < 2:
            raise NoEligibleActionError(f"action {a} does not split alive set {sorted(alive)}")
        g = math.log((len(contestants) - 1) / delta) if dynamic_threshold else gamma
        winner, n, _ = armitage_stage(inst, plan, a, contestants, g, rng, true_theta, cap)
        after = alive & plan.equiv(winner, a)
        tr.stages.append(StageRecord(a, plan[a].epsilon, tuple(sorted(contestants)), winner, n,
                                     alive - after, after, g))
        alive = after
    (tr.decision,) = alive
    return tr


def run_random(inst: ProblemInstance, plan: ClusterPlan, delta: float, rng, **kw) -> tuple[int, RunTranscript]:
    """Draw the true hypothesis uniformly, then ``run``."""
    rng = as_rng(rng)
    theta = int(rng.integers(inst.H))
    return theta, run(inst, plan, delta, theta, rng, **kw)
