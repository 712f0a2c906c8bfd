"""Comparison policies: Chernoff's randomized rule, the two-phase NJ1 rule,
and an analytic sample count for the fixed-length GJL elimination scheme."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import linprog

from .cluster import vanilla_plan
from .dist import PARAM_EQ_TOL, Family
from .engine import RunTranscript, StageRecord, as_rng, run
from .model import ProblemInstance

DEFAULT_RHO = 0.8
DEFAULT_MAX_SAMPLES = 10**7


class SolverError(RuntimeError):
    pass


class UnsupportedInstanceError(ValueError):
    pass


@dataclass(frozen=True)
class ActionDistribution:
    probs: np.ndarray
    value: float  # guaranteed worst-case weighted divergence
    cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("not a probability vector")

        object.__setattr__(self, "cdf", np.cumsum(self.probs))


def maximin_distribution(D: np.ndarray) -> ActionDistribution:
    """Mixed strategy over columns maximising the smallest row payoff.

    ``D`` has one row per opposing hypothesis (or pair) and one column per
    action.  Solves max t s.t. D @ nu >= t, nu in the simplex.
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    m, n = D.shape
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-D, np.ones((m, 1))])
    A_eq = np.concatenate([np.ones(n), [0.0]])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=np.zeros(m), A_eq=A_eq, b_eq=[1.0],
                  bounds=[(0, None)] * n + [(None, None)], method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise SolverError(f"maximin LP failed: {res.message}")
    nu = np.clip(res.x[:n], 0.0, None)
    nu /= nu.sum()
    return ActionDistribution(nu, float((D @ nu).min()))


class _PosteriorSampler:
    """Shared machinery for the posterior-driven baselines."""

    def __init__(self, inst: ProblemInstance):
        self.inst = inst
        self.K = np.stack([inst.kld_matrix(a) for a in inst.actions])  # (A, H, H)
        self._chernoff: dict[int, ActionDistribution] = {}
        self._explore: ActionDistribution | None = None

    def chernoff_nu(self, i: int) -> ActionDistribution:
        nu = self._chernoff.get(i)
        if nu is None:
            others = [j for j in range(self.inst.H) if j != i]
            nu = self._chernoff[i] = maximin_distribution(self.K[:, i, others].T)
        return nu

    def explore_nu(self) -> ActionDistribution:
        if self._explore is None:
            H = self.inst.H
            rows = [self.K[:, i, j] for i in range(H) for j in range(H) if i != j]
            self._explore = maximin_distribution(np.array(rows))
        return self._explore

    def _loglik_fn(self, a: int):
        fam = self.inst.action_family(a)
        if fam is None:
            return lambda x: self.inst.loglik(a, x)
        p = self.inst.params(a)
        if fam is Family.NORMAL:
            return lambda x: -0.5 * (x - p) ** 2  # constant dropped; cancels in the posterior
        logp = np.log(p)
        return lambda x: logp - p * x

    def _prepare(self):
        if not hasattr(self, "_ll"):
            self._ll = [self._loglik_fn(a) for a in self.inst.actions]

    def run(self, delta: float, true_theta: int, rng, rho: float | None, name: str,
            max_samples: int = DEFAULT_MAX_SAMPLES, trace: bool = False) -> RunTranscript:
        if not 0.0 < delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {delta}")
        rng = as_rng(rng)
        self._prepare()
        inst = self.inst
        truth = [inst.density(true_theta, a) for a in inst.actions]
        # log-likelihood sums; the posterior is their softmax under the uniform prior
        S = np.zeros(inst.H)
        odds_stop = delta / (1.0 - delta)
        rho_odds = (1.0 - rho) / rho if rho is not None else None
        counts = np.zeros(inst.n_actions, dtype=np.int64)
        steps = [] if trace else None
        n, pos, block = 0, 0, 0
        while True:
            top = int(np.argmax(S))
            # MAP posterior >= 1 - delta  <=>  summed odds of the others <= delta / (1 - delta)
            rest = float(np.exp(S - S[top]).sum()) - 1.0
            if rest <= odds_stop:
                break
            if n >= max_samples:
                raise RuntimeError(f"{name} exceeded {max_samples} samples")
            nu = self.explore_nu() if rho_odds is not None and rest > rho_odds else self.chernoff_nu(top)
            if pos == block:
                block = min(max(2 * block, 16), 1024)
                u_act, u_x = rng.random(block), rng.random(block)
                pos = 0
            a = min(int(np.searchsorted(nu.cdf, u_act[pos], side="right")), inst.n_actions - 1)
            x = truth[a].quantile(u_x[pos])
            pos += 1
            S = S + self._ll[a](x)
            counts[a] += 1
            n += 1
            if trace:
                steps.append((a, x))
        tr = RunTranscript(int(true_theta), algorithm=name,
                           action_counts={int(a): int(c) for a, c in enumerate(counts) if c})
        tr.stages.append(StageRecord(None, 0.0, tuple(range(inst.H)), top, n,
                                     frozenset(range(inst.H)) - {top}, frozenset({top}), math.log(1 / odds_stop)))
        tr.decision = top
        tr.trace = steps
        return tr


def posterior_sampler(inst: ProblemInstance) -> _PosteriorSampler:
    return _PosteriorSampler(inst)


def chernoff_run(inst: ProblemInstance, delta: float, true_theta: int, rng,
                 sampler: _PosteriorSampler | None = None) -> RunTranscript:
    """Draw actions from the maximin distribution for the current MAP hypothesis
    until some posterior reaches 1 - delta."""
    sampler = sampler or _PosteriorSampler(inst)
    return sampler.run(delta, true_theta, rng, None, "chernoff")


def nj1_run(inst: ProblemInstance, delta: float, true_theta: int, rng, rho: float = DEFAULT_RHO,
            sampler: _PosteriorSampler | None = None) -> RunTranscript:
    """Like ``chernoff_run``, but while no posterior exceeds ``rho`` actions come
    from the distribution maximising the worst pairwise separation."""
    if not 0.5 < rho < 1.0:
        raise ValueError(f"rho must lie in (0.5, 1), got {rho}")
    sampler = sampler or _PosteriorSampler(inst)
    return sampler.run(delta, true_theta, rng, rho, "nj1")


# --------------------------------------------------------------------------
# GJL


def _check_mean_identifiable(inst: ProblemInstance) -> None:
    for a in inst.actions:
        if inst.action_family(a) is None:
            raise UnsupportedInstanceError(f"action {a} mixes families; means do not identify densities")


def _mean_groups(inst: ProblemInstance, a: int, alive: Iterable[int]) -> dict[int, int]:
    """Map each alive hypothesis to the smallest alive index with the same mean under ``a``."""
    means = inst.means(a)
    reps: list[int] = []
    out = {}
    for i in sorted(alive):
        for r in reps:
            if abs(means[i] - means[r]) <= PARAM_EQ_TOL * max(1.0, abs(means[r])):
                out[i] = r
                break
        else:
            reps.append(i)
            out[i] = i
    return out


def d_min(inst: ProblemInstance, a: int, alive: Iterable[int]) -> float:
    """Smallest nonzero KLD among ordered alive pairs under ``a`` (inf if none)."""
    idx = np.array(sorted(alive))
    K = inst.kld_matrix(a)[np.ix_(idx, idx)]
    nz = K[K > 0]
    return float(nz.min()) if nz.size else math.inf


def gjl_action(inst: ProblemInstance, alive: Iterable[int]) -> int:
    """Most distinct means among alive; ties by larger D_min, then smaller id."""
    alive = sorted(alive)
    best, best_key = None, None
    for a in inst.actions:
        groups = len(set(_mean_groups(inst, a, alive).values()))
        if groups < 2:
            continue
        key = (groups, d_min(inst, a, alive), -a)
        if best_key is None or key > best_key:
            best, best_key = a, key
    if best is None:
        raise UnsupportedInstanceError(f"no action separates alive set {alive}")
    return best


def gjl_action_policy(inst: ProblemInstance) -> Callable[[frozenset[int]], int]:
    cache: dict[frozenset[int], int] = {}

    def policy(alive: frozenset[int]) -> int:
        alive = frozenset(alive)
        if alive not in cache:
            cache[alive] = gjl_action(inst, alive)
        return cache[alive]

    return policy


def gjl_expected_samples(inst: ProblemInstance, delta: float, true_theta: int) -> tuple[float, list[int]]:
    """Analytic GJL sample count for ``true_theta`` and its action sequence.

    Each stage charges ln(H / delta) / D_min samples and keeps the hypotheses
    sharing the true hypothesis' mean under the chosen action.
    """
    _check_mean_identifiable(inst)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    alive = frozenset(range(inst.H))
    total, seq = 0.0, []
    log_h = math.log(inst.H / delta)
    while len(alive) > 1:
        a = gjl_action(inst, alive)
        total += log_h / d_min(inst, a, alive)
        groups = _mean_groups(inst, a, alive)
        alive = frozenset(i for i in alive if groups[i] == groups[true_theta])
        seq.append(a)
    return total, seq


def gjl_mean_samples(inst: ProblemInstance, delta: float) -> tuple[float, float]:
    """(mean N_GJL, mean stage count) under the uniform prior."""
    res = [gjl_expected_samples(inst, delta, t) for t in range(inst.H)]
    return float(np.mean([r[0] for r in res])), float(np.mean([len(r[1]) for r in res]))


@dataclass(frozen=True)
class GjlComparison:
    theta: int
    n_gjl: float
    mean_n: float
    se_n: float
    slack: float
    same_sequence: bool

    @property
    def ok(self) -> bool:
        return self.same_sequence and self.mean_n <= (1.0 + self.slack) * self.n_gjl


def vanilla_vs_gjl_check(inst: ProblemInstance, delta: float, trials: int = 10_000, seed: int = 0,
                         slack: float = 0.1) -> list[GjlComparison]:
    """Replay GJL's actions in the exact-equality engine and compare mean samples per hypothesis."""
    _check_mean_identifiable(inst)
    plan = vanilla_plan(inst)
    policy = gjl_action_policy(inst)
    out = []
    for theta in range(inst.H):
        n_gjl, seq = gjl_expected_samples(inst, delta, theta)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(theta,)))
        N = np.empty(trials)
        same = True
        for t in range(trials):
            tr = run(inst, plan, delta, theta, rng, action_policy=policy)
            N[t] = tr.total_samples
            if tr.correct:
                same &= [s.action for s in tr.stages] == seq
        out.append(GjlComparison(theta, n_gjl, float(N.mean()), float(N.std(ddof=1) / math.sqrt(trials)),
                                 slack, bool(same)))
    return out
