"""Problem instances (hypotheses x actions density matrix) and their validation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dist import Density, Family, llr_second_moment, log_density_matrix, kld, tvd

TVD_ZERO_FLOOR = 1e-9
INSTANCE_FORMAT = "phidelta-instance v1"


class StructuralError(ValueError):
    """The density matrix is incomplete or malformed."""


class ScenarioError(ValueError):
    """A scenario specification cannot produce a valid instance."""


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """H hypotheses, a finite action set, and one density per (hypothesis, action).

    The prior over hypotheses is uniform.  Pairwise divergence matrices are
    computed lazily and cached on the instance.
    """

    densities: tuple[tuple[Density, ...], ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.densities)
        object.__setattr__(self, "densities", rows)
        if len(rows) < 2:
            raise StructuralError(f"need at least 2 hypotheses, got {len(rows)}")
        n_act = len(rows[0])
        if n_act < 1:
            raise StructuralError("need at least one action")
        for i, row in enumerate(rows):
            if len(row) != n_act:
                raise StructuralError(f"hypothesis {i} has {len(row)} actions, expected {n_act}")
            for a, d in enumerate(row):
                if not isinstance(d, Density):
                    raise StructuralError(f"cell ({i}, {a}) is not populated")

    @classmethod
    def from_cells(cls, H: int, n_actions: int, cells: dict[tuple[int, int], Density]) -> "ProblemInstance":
        missing = [(i, a) for i in range(H) for a in range(n_actions) if (i, a) not in cells]
        if missing:
            raise StructuralError(f"missing cells: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return cls(tuple(tuple(cells[i, a] for a in range(n_actions)) for i in range(H)))

    @classmethod
    def from_params(cls, family: Family | str, params) -> "ProblemInstance":
        """Single-family instance from an (H, |A|) parameter array."""
        family = Family(family)
        arr = np.asarray(params, dtype=float)
        return cls(tuple(tuple(Density(family, p) for p in row) for row in arr))

    @property
    def H(self) -> int:
        return len(self.densities)

    @property
    def n_actions(self) -> int:
        return len(self.densities[0])

    @property
    def actions(self) -> range:
        return range(self.n_actions)

    @property
    def prior(self) -> np.ndarray:
        return np.full(self.H, 1.0 / self.H)

    def density(self, i: int, a: int) -> Density:
        return self.densities[i][a]

    def column(self, a: int) -> tuple[Density, ...]:
        return tuple(row[a] for row in self.densities)

    def action_family(self, a: int) -> Family | None:
        fams = {d.family for d in self.column(a)}
        return fams.pop() if len(fams) == 1 else None

    def params(self, a: int) -> np.ndarray:
        return np.array([d.param for d in self.column(a)])

    def means(self, a: int) -> np.ndarray:
        return np.array([d.mean for d in self.column(a)])

    def _matrix(self, kind: str, a: int) -> np.ndarray:
        key = (kind, a)
        if key not in self._cache:
            fn = tvd if kind == "tvd" else kld
            col = self.column(a)
            m = np.zeros((self.H, self.H))
            for i, j in itertools.product(range(self.H), repeat=2):
                if i == j:
                    continue
                if kind == "tvd" and j < i:
                    m[i, j] = m[j, i]
                else:
                    m[i, j] = fn(col[i], col[j]).value
            m.flags.writeable = False
            self._cache[key] = m
        return self._cache[key]

    def tvd_matrix(self, a: int) -> np.ndarray:
        return self._matrix("tvd", a)

    def kld_matrix(self, a: int) -> np.ndarray:
        """``K[i, j] = D(f_i^a || f_j^a)``."""
        return self._matrix("kld", a)

    def loglik(self, a: int, x) -> np.ndarray:
        """Log-density of every hypothesis at x under action a: shape ``x.shape + (H,)``."""
        fam = self.action_family(a)
        if fam is not None:
            return log_density_matrix(fam, self.params(a), x)
        x = np.asarray(x, dtype=float)
        return np.stack([d.log_density(x) for d in self.column(a)], axis=-1)

    def __getstate__(self):
        return {"densities": self.densities}

    def __setstate__(self, state):
        object.__setattr__(self, "densities", state["densities"])
        object.__setattr__(self, "_cache", {})


@dataclass
class AssumptionReport:
    separation_ok: dict[int, bool]
    min_nonzero_tvd: dict[int, float]
    validity_ok: bool
    degenerate_actions: list[int]
    unseparated_pairs: list[tuple[int, int]]
    llr_second_moment_bound: float

    @property
    def ok(self) -> bool:
        return self.validity_ok and all(self.separation_ok.values()) and math.isfinite(
            self.llr_second_moment_bound
        )

    def summary(self) -> str:
        lines = [
            f"separation (A1): {'ok' if all(self.separation_ok.values()) else 'FAILED'}",
            f"validity (A2):   {'ok' if self.validity_ok else 'FAILED'}",
            f"LLR 2nd moment certificate (A3): beta = {self.llr_second_moment_bound:.6g}",
        ]
        for a, v in sorted(self.min_nonzero_tvd.items()):
            lines.append(f"  action {a}: min nonzero TVD = {v:.6g}{'' if self.separation_ok[a] else '  (ambiguous)'}")
        if self.degenerate_actions:
            lines.append(f"  actions with all densities identical: {self.degenerate_actions}")
        if self.unseparated_pairs:
            lines.append(f"  pairs no action separates: {self.unseparated_pairs[:10]}")
        return "\n".join(lines)


def validate(inst: ProblemInstance, floor: float = TVD_ZERO_FLOOR) -> AssumptionReport:
    """Check the separation, validity and finite-LLR-variance assumptions."""
    if not isinstance(inst, ProblemInstance):
        raise StructuralError("not a ProblemInstance")
    H = inst.H
    sep, min_nz, degenerate = {}, {}, []
    covered = np.zeros((H, H), dtype=bool)
    for a in inst.actions:
        T = inst.tvd_matrix(a)
        off = T[~np.eye(H, dtype=bool)]
        ambiguous = (off > 0) & (off <= floor)
        sep[a] = not ambiguous.any()
        nz = off[off > floor]
        min_nz[a] = float(nz.min()) if nz.size else 0.0
        if not nz.size:
            degenerate.append(a)
        covered |= T > floor
    unseparated = [(i, j) for i in range(H) for j in range(i + 1, H) if not covered[i, j]]
    beta = 0.0
    for a in inst.actions:
        col = inst.column(a)
        for i, j in itertools.permutations(range(H), 2):
            beta = max(beta, llr_second_moment(col[i], col[j]))
    return AssumptionReport(
        separation_ok=sep,
        min_nonzero_tvd=min_nz,
        validity_ok=not degenerate and not unseparated,
        degenerate_actions=degenerate,
        unseparated_pairs=unseparated,
        llr_second_moment_bound=beta,
    )


# --------------------------------------------------------------------------
# experiment scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    """Construction parameters for the two-level clustered scenario.

    Per action, a balanced random half of the hypotheses gets ``low_mean``,
    the rest ``high_mean``; each mean is then perturbed by Uniform[-noise, noise].
    With ``tie`` set, hypotheses 0 and H-1 share their parameters on every
    action but the last, where mean_0 = (low + high) - mean_{H-1}.
    Exponential densities use the drawn value as the mean (rate = 1/mean).
    """

    family: Family = Family.NORMAL
    H: int = 32
    n_actions: int = 16
    low_mean: float = 2.0
    high_mean: float = 8.0
    noise: float = 0.1
    tie: bool = True
    seed: int = 0
    # Redraw partitions until every pair differs in base level on some action, so
    # that the level clusters can eventually isolate every hypothesis.
    require_level_separable: bool = True
    max_redraws: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))

    @classmethod
    def two_level(cls, family: Family | str = Family.NORMAL, seed: int = 0) -> "ScenarioSpec":
        return cls(family=Family(family), seed=seed)


def draw_scenario_means(spec: ScenarioSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return (means, levels) arrays of shape (H, |A|); levels hold 0 (low) / 1 (high)."""
    H, A = spec.H, spec.n_actions
    if H < 2 or A < 1:
        raise ScenarioError("need H >= 2 and at least one action")
    if spec.tie and H < 3:
        raise ScenarioError("tie rule needs H >= 3")
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_redraws):
        levels = np.zeros((H, A), dtype=int)
        for a in range(A):
            perm = rng.permutation(H)
            levels[perm[H // 2:], a] = 1
        noise = rng.uniform(-spec.noise, spec.noise, size=(H, A))
        base = np.where(levels == 1, spec.high_mean, spec.low_mean)
        means = base + noise
        if spec.tie:
            means[0, :-1] = means[H - 1, :-1]
            levels[0, :-1] = levels[H - 1, :-1]
            means[0, -1] = spec.low_mean + spec.high_mean - means[H - 1, -1]
            levels[0, -1] = 1 - levels[H - 1, -1]
        if not spec.require_level_separable:
            return means, levels
        signatures = {tuple(row) for row in levels}
        if len(signatures) == H:
            return means, levels
    raise ScenarioError(
        f"no level-separable partition found in {spec.max_redraws} draws (H={H}, |A|={A})"
    )


def build_scenario(spec: ScenarioSpec) -> ProblemInstance:
    means, _ = draw_scenario_means(spec)
    if spec.family is Family.EXPONENTIAL:
        if (means <= 0).any():
            raise ScenarioError("exponential scenario needs positive means")
        inst = ProblemInstance.from_params(Family.EXPONENTIAL, 1.0 / means)
    else:
        inst = ProblemInstance.from_params(Family.NORMAL, means)
    report = validate(inst)
    if not report.validity_ok:
        raise ScenarioError(f"scenario violates validity: {report.summary()}")
    return inst


def build_counterexample(xi: float) -> ProblemInstance:
    """Three unit-normal hypotheses where the greedy action choice is suboptimal.

    Rows of the table are actions; columns hypotheses 0..2.
    """
    if not 0 < xi < 1 / 3:
        raise ValueError(f"xi must lie in (0, 1/3), got {xi}")
    s2 = math.sqrt(2.0)
    m = math.sqrt(4.0 / 3.0 - xi)
    by_action = [
        (0.0, s2, s2),
        (m, m, 0.0),
        (0.0, 1.0, 2.0),
    ]
    return ProblemInstance.from_params(Family.NORMAL, np.array(by_action).T)


# --------------------------------------------------------------------------
# (de)serialisation


def dump_instance(inst: ProblemInstance) -> str:
    lines = [
        f"# {INSTANCE_FORMAT}",
        f"H {inst.H}",
        f"actions {inst.n_actions}",
        "# hypothesis action family param",
    ]
    for i in range(inst.H):
        for a in inst.actions:
            d = inst.density(i, a)
            lines.append(f"{i} {a} {d.family.value} {d.param:.17g}")
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> ProblemInstance:
    H = n_act = None
    cells: dict[tuple[int, int], Density] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "H":
                H = int(parts[1])
            elif parts[0] == "actions":
                n_act = int(parts[1])
            else:
                i, a, fam, param = int(parts[0]), int(parts[1]), parts[2], float(parts[3])
                if (i, a) in cells:
                    raise StructuralError(f"line {lineno}: duplicate cell ({i}, {a})")
                cells[i, a] = Density(Family(fam), param)
        except (IndexError, ValueError) as exc:
            if isinstance(exc, StructuralError):
                raise
            raise StructuralError(f"line {lineno}: cannot parse {raw!r}: {exc}") from exc
    if H is None or n_act is None:
        raise StructuralError("missing 'H' or 'actions' header")
    extra = [k for k in cells if not (0 <= k[0] < H and 0 <= k[1] < n_act)]
    if extra:
        raise StructuralError(f"cells out of range: {extra[:5]}")
    return ProblemInstance.from_cells(H, n_act, cells)


def save_instance(inst: ProblemInstance, path: str | Path) -> None:
    Path(path).write_text(dump_instance(inst))


def load_instance(path: str | Path) -> ProblemInstance:
    return parse_instance(Path(path).read_text())
