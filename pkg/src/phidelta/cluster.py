"""Per-action hypothesis clustering over the total variation distance.

With MinPts = 1, DBSCAN over a finite point set returns the connected
components of the graph whose edges join densities at TVD <= eps; that is
what ``dbscan_tvd`` computes (union-find over the pairwise TVD matrix).
Clusters are numbered by their smallest member, so labels are canonical.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .dist import (
    Density,
    Family,
    crossings,
    integrate_pieces,
    likelihood_ratio_expectation,
    log_density,
    log_density_matrix,
)
from .model import ProblemInstance

PLAN_FORMAT = "phidelta-plan v1"


class ClusteringError(ValueError):
    pass


# --------------------------------------------------------------------------
# DBSCAN (MinPts = 1)


def _find(parent: list[int], x: int) -> int:
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


def components(dist: np.ndarray, eps: float) -> np.ndarray:
    """Canonical connected-component labels of the graph ``dist <= eps``."""
    n = dist.shape[0]
    parent = list(range(n))
    for i, j in zip(*np.nonzero(np.triu(dist <= eps, 1))):
        ri, rj = _find(parent, int(i)), _find(parent, int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = [_find(parent, i) for i in range(n)]
    relabel: dict[int, int] = {}
    return np.array([relabel.setdefault(r, len(relabel)) for r in roots], dtype=int)


def dbscan_tvd(inst: ProblemInstance, a: int, eps: float) -> np.ndarray:
    if eps < 0:
        raise ClusteringError(f"eps must be non-negative, got {eps}")
    return components(inst.tvd_matrix(a), eps)


# --------------------------------------------------------------------------
# proximity parameter and representatives


def safe_epsilon(inst: ProblemInstance, a: int) -> float:
    """Half the smallest nonzero TVD under ``a``: isolates every distinct density."""
    T = inst.tvd_matrix(a)
    nz = T[T > 0]
    if not nz.size:
        raise ClusteringError(f"all densities under action {a} are identical")
    return 0.5 * float(nz.min())


def select_epsilon(inst: ProblemInstance, a: int) -> float:
    """Proximity parameter for action ``a``.

    Exponential rates (all distinct): min over rate ratios < 1 of 1 - ratio.
    Unit normals (all distinct): min over mean gaps of 2 Phi(gap / 2) - 1.
    Anything else, including actions where some densities coincide, gets the
    safe value from ``safe_epsilon``.
    """
    col = inst.column(a)
    fam = inst.action_family(a)
    p = inst.params(a)
    distinct = all(not x.same_as(y) for x, y in itertools.combinations(col, 2))
    if not distinct or fam is None:
        return safe_epsilon(inst, a)
    if fam is Family.EXPONENTIAL:
        return min(1.0 - min(x, y) / max(x, y) for x, y in itertools.combinations(p, 2))
    gap = min(abs(x - y) for x, y in itertools.combinations(p, 2))
    return math.erf(gap / (2.0 * math.sqrt(2.0)))


@dataclass(frozen=True)
class RepSpec:
    """Cluster representative: a real member hypothesis or a virtual density."""

    kind: str  # "real" | "virtual"
    index: int | None = None
    cluster: int | None = None
    virtual: "VirtualRep | None" = field(default=None, repr=False, compare=False)

    @classmethod
    def real(cls, index: int) -> "RepSpec":
        return cls("real", index=int(index))

    def log_density(self, inst: ProblemInstance, a: int, x):
        if self.kind == "real":
            return inst.density(self.index, a).log_density(x)
        return self.virtual.log_density(self.cluster, x)


def select_representative(inst: ProblemInstance, a: int, members: Iterable[int],
                          rule: str = "max_mean") -> RepSpec:
    """Member with the largest mean (``max_mean``) or smallest (``min_mean``).

    Ties go to the smallest hypothesis index.
    """
    members = sorted(members)
    if not members:
        raise ClusteringError("empty cluster")
    means = [inst.density(i, a).mean for i in members]
    if rule == "max_mean":
        best = max(range(len(members)), key=lambda t: (means[t], -members[t]))
    elif rule == "min_mean":
        best = min(range(len(members)), key=lambda t: (means[t], members[t]))
    else:
        raise ValueError(f"unknown representative rule {rule!r}")
    return RepSpec.real(members[best])


# --------------------------------------------------------------------------
# virtual representatives


@dataclass(eq=False)
class VirtualRep:
    """Mixture-of-envelopes representatives for every cluster of one action.

    ``g_c`` is the pointwise maximum of the member densities of cluster c and
    ``M_c`` its integral.  The representative of c is
    ``r_c = (1 - alpha) g_c + alpha/(k-1) * sum_{c' != c} g_{c'}``,
    normalised by ``B_c = (1 - alpha) M_c + alpha/(k-1) * sum_{c' != c} M_{c'}``.
    """

    action: int
    members: tuple[tuple[int, ...], ...]
    densities: tuple[tuple[Density, ...], ...]
    alpha: float
    M: np.ndarray
    B: np.ndarray
    delta_pairs: np.ndarray
    breakpoints: tuple[float, ...]
    support: tuple[float, float]

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def M_max(self) -> float:
        return float(self.M.max())

    @property
    def delta(self) -> float:
        return float(self.delta_pairs.max())

    @property
    def one_minus_alpha_max(self) -> float:
        return one_minus_alpha_bound(self.M_max, self.k, self.delta)

    @property
    def satisfies_alpha_bound(self) -> bool:
        return (1.0 - self.alpha) <= self.one_minus_alpha_max * (1 + 1e-12)

    def _weights(self) -> np.ndarray:
        k, al = self.k, self.alpha
        W = np.full((k, k), al / (k - 1))
        np.fill_diagonal(W, 1.0 - al)
        return W

    def log_envelopes(self, x) -> np.ndarray:
        """ln g_c(x) for every cluster: shape ``x.shape + (k,)``."""
        x = np.asarray(x, dtype=float)
        cols = [np.max(np.stack([log_density(d, x) for d in dens], axis=-1), axis=-1)
                for dens in self.densities]
        return np.stack(cols, axis=-1)

    def loglik_matrix(self, x) -> np.ndarray:
        """ln(r_c(x) / B_c) for every cluster c: shape ``x.shape + (k,)``."""
        lg = self.log_envelopes(x)
        with np.errstate(divide="ignore"):
            lw = np.log(self._weights())
        out = logsumexp(lg[..., None, :] + lw, axis=-1)
        return out - np.log(self.B)

    def log_density(self, c: int, x):
        out = self.loglik_matrix(x)[..., c]
        return out[()] if np.ndim(out) == 0 else out

    def normalization(self, c: int) -> float:
        return integrate_pieces(lambda x: math.exp(self.log_density(c, x)), self.support, self.breakpoints)

    def ratio_expectation(self, f: Density, c_true: int, c_other: int) -> float:
        """E_f[(r_other/B_other) / (r_true/B_true)] by quadrature."""

        def integrand(x):
            ll = self.loglik_matrix(x)
            return math.exp(log_density(f, x) + ll[c_other] - ll[c_true])

        return integrate_pieces(integrand, f.support, self.breakpoints)

    def delta_kld(self, f: Density, c_true: int, c_other: int) -> float:
        """E_f[ln((r_true/B_true) / (r_other/B_other))] by quadrature."""

        def integrand(x):
            ll = self.loglik_matrix(x)
            return math.exp(log_density(f, x)) * (ll[c_true] - ll[c_other])

        return integrate_pieces(integrand, f.support, self.breakpoints)


def one_minus_alpha_bound(M_max: float, k: int, delta: float) -> float:
    """Largest own-cluster weight 1 - alpha permitted by the envelope lemma."""
    return delta / ((M_max - 1.0) / M_max * (k - 1) + k * delta)


def build_virtual(inst: ProblemInstance, a: int, labels: Sequence[int],
                  alpha: float | str | None = None) -> VirtualRep:
    """Construct virtual representatives for the clusters ``labels`` of action ``a``.

    ``alpha=None`` takes the lemma's bound with equality.  ``alpha="condition"``
    instead searches own-cluster weights above 1/k for the value minimising the
    worst cross-cluster likelihood-ratio expectation.  A float is used as given.
    """
    labels = np.asarray(labels)
    k = int(labels.max()) + 1
    if k < 2:
        raise ClusteringError(f"virtual representatives need at least 2 clusters, action {a} has {k}")
    members = tuple(tuple(int(i) for i in np.flatnonzero(labels == c)) for c in range(k))
    col = inst.column(a)
    dens = tuple(tuple(col[i] for i in m) for m in members)
    support = (min(d.support[0] for d in col), max(d.support[1] for d in col))
    breaks = set()
    for p, q in itertools.combinations(col, 2):
        breaks.update(crossings(p, q))
    breaks.update(d.support[0] for d in col)
    breaks = tuple(sorted(b for b in breaks if math.isfinite(b)))

    def log_g(c, x):
        return max(float(log_density(d, x)) for d in dens[c])

    M = np.array([integrate_pieces(lambda x, c=c: math.exp(log_g(c, x)), support, breaks)
                  for c in range(k)])
    D = np.zeros((k, k))
    for c1, c2 in itertools.combinations(range(k), 2):
        D[c1, c2] = D[c2, c1] = integrate_pieces(
            lambda x: abs(math.exp(log_g(c1, x)) - math.exp(log_g(c2, x))), support, breaks
        )

    def make(al: float) -> VirtualRep:
        W = np.full((k, k), al / (k - 1))
        np.fill_diagonal(W, 1.0 - al)
        return VirtualRep(a, members, dens, float(al), M, W @ M, D, breaks, support)

    if alpha is None:
        bound = one_minus_alpha_bound(float(M.max()), k, float(D.max()))
        return make(1.0 - bound)
    if alpha == "condition":
        return _alpha_for_condition(inst, a, labels, make)
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ClusteringError(f"alpha must lie in (0, 1), got {alpha}")
    return make(alpha)


def _alpha_for_condition(inst, a, labels, make) -> VirtualRep:
    k = int(labels.max()) + 1
    best, best_val = None, math.inf
    for t in (0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.98):
        own = 1.0 / k + (1.0 - 1.0 / k) * t
        vr = make(1.0 - own)
        worst = max(
            vr.ratio_expectation(inst.density(i, a), int(labels[i]), c)
            for i in range(inst.H) for c in range(k) if c != labels[i]
        )
        if worst < best_val:
            best, best_val = vr, worst
    return best


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True, eq=False)
class ActionClusters:
    action: int
    epsilon: float
    labels: tuple[int, ...]
    reps: tuple[RepSpec, ...]
    safe_epsilon: float
    virtual: VirtualRep | None = None
    _params: np.ndarray | None = field(default=None, repr=False)
    _family: Family | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return len(self.reps)

    def members(self, c: int) -> tuple[int, ...]:
        return tuple(i for i, lab in enumerate(self.labels) if lab == c)

    def rep_loglik(self, inst: ProblemInstance, x) -> np.ndarray:
        """ln(rep density of cluster c at x) for every cluster: shape ``x.shape + (k,)``."""
        if self.virtual is not None:
            return self.virtual.loglik_matrix(x)
        if self._family is not None:
            return log_density_matrix(self._family, self._params, x)
        x = np.asarray(x, dtype=float)
        return np.stack([r.log_density(inst, self.action, x) for r in self.reps], axis=-1)

    def rep_density(self, inst: ProblemInstance, c: int) -> Density | None:
        r = self.reps[c]
        return inst.density(r.index, self.action) if r.kind == "real" else None


def _action_clusters(inst, a, eps, labels, reps, virtual=None) -> ActionClusters:
    fam = inst.action_family(a)
    params = None
    if virtual is None and fam is not None:
        params = np.array([inst.density(r.index, a).param for r in reps])
    try:
        safe = safe_epsilon(inst, a)
    except ClusteringError:
        safe = 0.0
    return ActionClusters(a, float(eps), tuple(int(x) for x in labels), tuple(reps), safe,
                          virtual, params, fam if params is not None else None)


@dataclass(frozen=True, eq=False)
class ClusterPlan:
    actions: tuple[ActionClusters, ...]
    cache: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, a: int) -> ActionClusters:
        return self.actions[a]

    def labels(self, a: int) -> tuple[int, ...]:
        return self.actions[a].labels

    def n_clusters(self, a: int) -> int:
        return self.actions[a].k

    def equiv(self, i: int, a: int) -> frozenset[int]:
        lab = self.actions[a].labels
        return frozenset(j for j, l in enumerate(lab) if l == lab[i])

    def repr_set(self, U: Iterable[int], a: int) -> frozenset[int]:
        lab = self.actions[a].labels
        first: dict[int, int] = {}
        for i in sorted(U):
            first.setdefault(lab[i], i)
        return frozenset(first.values())

    @property
    def epsilons(self) -> tuple[float, ...]:
        return tuple(ac.epsilon for ac in self.actions)


def equiv(plan: ClusterPlan, i: int, a: int) -> frozenset[int]:
    """Hypotheses clustered with ``i`` under action ``a``."""
    return plan.equiv(i, a)


def repr_set(plan: ClusterPlan, U: Iterable[int], a: int) -> frozenset[int]:
    """Smallest-index member of every cluster of ``a`` that meets ``U``."""
    U = list(U)
    if not U:
        raise ClusteringError("empty hypothesis set")
    return plan.repr_set(U, a)


def _resolve_epsilon(inst, a, epsilon) -> float:
    if isinstance(epsilon, str):
        if epsilon == "proposition":
            return select_epsilon(inst, a)
        if epsilon == "safe":
            return safe_epsilon(inst, a)
        if epsilon == "zero":
            return 0.0
        raise ValueError(f"unknown epsilon policy {epsilon!r}")
    if np.ndim(epsilon) == 0:
        return float(epsilon)
    return float(epsilon[a])


def build_plan(inst: ProblemInstance, epsilon="zero", representatives: str = "max_mean",
               alpha: float | str | None = None) -> ClusterPlan:
    """Cluster every action and pick representatives.

    ``epsilon`` is a policy name ("proposition", "safe", "zero"), one value
    for all actions, or a per-action sequence.  ``representatives`` is
    "max_mean", "min_mean" or "virtual"; virtual representatives fall back to
    real ones on actions that form a single cluster or only singletons.
    """
    out = []
    for a in inst.actions:
        eps = _resolve_epsilon(inst, a, epsilon)
        labels = dbscan_tvd(inst, a, eps)
        k = int(labels.max()) + 1
        if representatives == "virtual" and 2 <= k < inst.H:
            vr = build_virtual(inst, a, labels, alpha)
            reps = tuple(RepSpec("virtual", cluster=c, virtual=vr) for c in range(k))
            out.append(_action_clusters(inst, a, eps, labels, reps, vr))
            continue
        rule = "max_mean" if representatives == "virtual" else representatives
        reps = tuple(select_representative(inst, a, np.flatnonzero(labels == c), rule)
                     for c in range(k))
        out.append(_action_clusters(inst, a, eps, labels, reps))
    return ClusterPlan(tuple(out))


def vanilla_plan(inst: ProblemInstance) -> ClusterPlan:
    return build_plan(inst, "zero")


def extend_with_unclustered(inst: ProblemInstance, plan: ClusterPlan) -> tuple[ProblemInstance, ClusterPlan]:
    """Offer both the clustered and the exact-equality version of every action.

    Actions ``|A| .. 2|A|-1`` of the returned instance duplicate the originals
    with eps = 0.
    """
    A = inst.n_actions
    wide = ProblemInstance(tuple(row + row for row in inst.densities))
    van = vanilla_plan(inst)
    shifted = []
    for ac in van.actions:
        shifted.append(_action_clusters(wide, ac.action + A, 0.0, ac.labels, ac.reps))
    moved = [_action_clusters(wide, ac.action, ac.epsilon, ac.labels, ac.reps, ac.virtual)
             for ac in plan.actions]
    return wide, ClusterPlan(tuple(moved + shifted))


# --------------------------------------------------------------------------
# condition check


@dataclass(frozen=True)
class ConditionEntry:
    hypothesis: int
    own_cluster: int
    other_cluster: int
    expectation: float
    ok: bool
    precondition_ok: bool | None = None  # exponential rate precondition, when applicable


@dataclass
class ConditionReport:
    action: int
    entries: list[ConditionEntry]

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.expectation for e in self.entries), default=1.0)

    def failures(self) -> list[ConditionEntry]:
        return [e for e in self.entries if not e.ok]


def check_condition(inst: ProblemInstance, a: int, plan: ClusterPlan, tol: float = 1e-12) -> ConditionReport:
    """Evaluate E_{f_i}[rep_j / rep_i] <= 1 for every hypothesis i and foreign cluster j."""
    ac = plan[a]
    entries = []
    for i in range(inst.H):
        ci = ac.labels[i]
        fi = inst.density(i, a)
        for cj in range(ac.k):
            if cj == ci:
                continue
            pre = None
            if ac.virtual is not None:
                val = ac.virtual.ratio_expectation(fi, ci, cj)
            else:
                rep_i, rep_j = ac.rep_density(inst, ci), ac.rep_density(inst, cj)
                val = likelihood_ratio_expectation(fi, rep_j, rep_i)
                if fi.family is rep_i.family is rep_j.family is Family.EXPONENTIAL:
                    pre = rep_j.param + fi.param > rep_i.param
            entries.append(ConditionEntry(i, ci, cj, val, val <= 1.0 + tol, pre))
    return ConditionReport(a, entries)


# --------------------------------------------------------------------------
# (de)serialisation


def plan_to_dict(plan: ClusterPlan) -> dict:
    acts = []
    for ac in plan.actions:
        entry = {
            "action": ac.action,
            "epsilon": ac.epsilon,
            "labels": list(ac.labels),
            "reps": [{"kind": r.kind, "index": r.index} if r.kind == "real"
                     else {"kind": "virtual", "cluster": r.cluster} for r in ac.reps],
        }
        if ac.virtual is not None:
            entry["alpha"] = ac.virtual.alpha
        acts.append(entry)
    return {"format": PLAN_FORMAT, "actions": acts}


def plan_from_dict(inst: ProblemInstance, data: dict) -> ClusterPlan:
    if data.get("format") != PLAN_FORMAT:
        raise ClusteringError(f"unsupported plan format {data.get('format')!r}")
    out = []
    for entry in data["actions"]:
        a = int(entry["action"])
        labels = np.array(entry["labels"], dtype=int)
        if "alpha" in entry:
            vr = build_virtual(inst, a, labels, float(entry["alpha"]))
            reps = tuple(RepSpec("virtual", cluster=c, virtual=vr) for c in range(vr.k))
            out.append(_action_clusters(inst, a, entry["epsilon"], labels, reps, vr))
        else:
            reps = tuple(RepSpec.real(r["index"]) for r in entry["reps"])
            out.append(_action_clusters(inst, a, entry["epsilon"], labels, reps))
    if len(out) != inst.n_actions:
        raise ClusteringError("plan does not cover every action of the instance")
    return ClusterPlan(tuple(out))
