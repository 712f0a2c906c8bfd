"""Scalar parametric densities and the divergences built on them.

Two members of the scalar exponential family are supported out of the box,
the exponential law (parameterised by its rate) and the unit-variance normal
(parameterised by its mean).  Both are written in natural form

    f(x) = h(x) exp{eta * T(x) - A(eta)}

with T(x) = x, which is what the closed-form likelihood-ratio expectation
relies on.  Everything is in nats.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize, special

# Parameters closer than this are treated as the same density.
PARAM_EQ_TOL = 1e-12

_STD_NORMAL = NormalDist()

QUAD_EPSABS = 1e-11
QUAD_EPSREL = 1e-9
QUAD_LIMIT = 400

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance."""

    def __init__(self, message: str, abserr: float):
        super().__init__(f"{message} (achieved abs. error {abserr:.3g})")
        self.abserr = abserr


class Family(str, Enum):
    EXPONENTIAL = "exponential"
    NORMAL = "normal"


@dataclass(frozen=True)
class _FamilyOps:
    """Natural-form descriptor of a one-parameter exponential family with T(x) = x."""

    natural: Callable[[float], float]
    log_partition: Callable[[float], float]  # A as a function of the natural parameter
    support: tuple[float, float]
    mean: Callable[[float], float]
    variance: Callable[[float], float]


def _exp_log_partition(eta: float) -> float:
    return -math.log(-eta) if eta < 0 else math.inf


FAMILY_OPS: dict[Family, _FamilyOps] = {
    Family.EXPONENTIAL: _FamilyOps(
        natural=lambda rate: -rate,
        log_partition=_exp_log_partition,
        support=(0.0, math.inf),
        mean=lambda rate: 1.0 / rate,
        variance=lambda rate: 1.0 / rate**2,
    ),
    Family.NORMAL: _FamilyOps(
        natural=lambda mu: mu,
        log_partition=lambda eta: 0.5 * eta * eta,
        support=(-math.inf, math.inf),
        mean=lambda mu: mu,
        variance=lambda mu: 1.0,
    ),
}


@dataclass(frozen=True)
class Density:
    """An immutable scalar density: ``Exponential(rate)`` or ``UnitNormal(mean)``."""

    family: Family
    param: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "param", float(self.param))
        if not math.isfinite(self.param):
            raise ValueError(f"non-finite parameter {self.param!r}")
        if self.family is Family.EXPONENTIAL and self.param <= 0:
            raise ValueError(f"exponential rate must be positive, got {self.param}")

    @classmethod
    def exponential(cls, rate: float) -> "Density":
        return cls(Family.EXPONENTIAL, rate)

    @classmethod
    def normal(cls, mean: float) -> "Density":
        return cls(Family.NORMAL, mean)

    @property
    def ops(self) -> _FamilyOps:
        return FAMILY_OPS[self.family]

    @property
    def mean(self) -> float:
        return self.ops.mean(self.param)

    @property
    def variance(self) -> float:
        return self.ops.variance(self.param)

    @property
    def natural(self) -> float:
        return self.ops.natural(self.param)

    @property
    def log_partition(self) -> float:
        return self.ops.log_partition(self.natural)

    @property
    def support(self) -> tuple[float, float]:
        return self.ops.support

    def log_density(self, x):
        return log_density(self, x)

    def sample(self, rng: np.random.Generator, size=None):
        return sample(self, rng, size)

    def quantile(self, u: float) -> float:
        """Inverse CDF at a scalar ``u`` in [0, 1)."""
        u = max(u, 1e-300)
        if self.family is Family.EXPONENTIAL:
            return -math.log1p(-u) / self.param
        return self.param + _STD_NORMAL.inv_cdf(u)

    def same_as(self, other: "Density") -> bool:
        return self.family is other.family and abs(self.param - other.param) <= PARAM_EQ_TOL

    def quantile_range(self, tail: float = 1e-13) -> tuple[float, float]:
        """Interval holding all but ``tail`` of the mass (used to seed root searches)."""
        if self.family is Family.EXPONENTIAL:
            return 0.0, -math.log(tail) / self.param
        z = -special.ndtri(tail)
        return self.param - z, self.param + z

    def __str__(self):
        name = "Exp" if self.family is Family.EXPONENTIAL else "N"
        return f"{name}({self.param:g})"


@dataclass(frozen=True)
class DivergenceValue:
    value: float
    method: str  # "closed_form" or "quadrature"

    def __float__(self):
        return self.value


# --------------------------------------------------------------------------
# evaluation and sampling


def log_density(d: Density, x):
    """ln f(x); -inf outside the support (exponential at x < 0)."""
    x = np.asarray(x, dtype=float)
    if d.family is Family.NORMAL:
        out = -_LOG_SQRT_2PI - 0.5 * (x - d.param) ** 2
    else:
        with np.errstate(invalid="ignore"):
            out = np.where(x >= 0, math.log(d.param) - d.param * x, -np.inf)
    return out[()] if out.ndim == 0 else out


def log_density_matrix(family: Family, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Log-densities of one family at many parameters: shape ``x.shape + params.shape``."""
    x = np.asarray(x, dtype=float)[..., None]
    if family is Family.NORMAL:
        return -_LOG_SQRT_2PI - 0.5 * (x - params) ** 2
    with np.errstate(invalid="ignore"):
        return np.where(x >= 0, np.log(params) - params * x, -np.inf)


def sample(d: Density, rng: np.random.Generator, size=None):
    if d.family is Family.NORMAL:
        return rng.normal(d.param, 1.0, size)
    return rng.exponential(1.0 / d.param, size)


# --------------------------------------------------------------------------
# quadrature helpers


def crossings(p: Density, q: Density) -> list[float]:
    """Points where the two densities cross (pdf(p) == pdf(q)) inside the joint support."""
    if p.same_as(q):
        return []
    if p.family is q.family is Family.NORMAL:
        return [0.5 * (p.param + q.param)]
    if p.family is q.family is Family.EXPONENTIAL:
        lp, lq = p.param, q.param
        return [math.log(lq / lp) / (lq - lp)]
    return _numeric_crossings([p, q], lambda x: log_density(p, x) - log_density(q, x))


def _numeric_crossings(dens: Sequence[Density], diff: Callable, n_grid: int = 4001) -> list[float]:
    lo = min(d.quantile_range()[0] for d in dens)
    hi = max(d.quantile_range()[1] for d in dens)
    lo = max(lo, max(d.support[0] for d in dens))
    grid = np.linspace(lo, hi, n_grid)
    vals = diff(grid)
    roots = []
    for k in range(n_grid - 1):
        a, b = vals[k], vals[k + 1]
        if not (np.isfinite(a) and np.isfinite(b)):
            continue
        if a == 0.0:
            roots.append(float(grid[k]))
        elif a * b < 0:
            roots.append(optimize.brentq(lambda t: float(diff(t)), grid[k], grid[k + 1], xtol=1e-14))
    return roots


def integrate_pieces(fn: Callable[[float], float], support: tuple[float, float],
                     breakpoints: Sequence[float] = ()) -> float:
    """Integrate ``fn`` over ``support`` splitting at the given kinks.

    Raises QuadratureError when QUADPACK reports non-convergence on any piece.
    """
    lo, hi = support
    pts = sorted({float(b) for b in breakpoints if lo < b < hi})
    edges = [lo, *pts, hi]
    total, err_total = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if a == b:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            val, err, _info, *msg = integrate.quad(
                fn, a, b, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT, full_output=1
            )
        err_total += err
        # QUADPACK appends a message only when it flags a problem; accept tiny
        # residuals unless it suspects divergence.
        if msg and (err > 1e-8 * max(1.0, abs(val)) or "divergent" in str(msg[0])):
            raise QuadratureError(f"quadrature failed on [{a}, {b}]: {msg[0]}", err_total)
        total += val
    return total


def _joint_support(*dens: Density) -> tuple[float, float]:
    return max(d.support[0] for d in dens), min(d.support[1] for d in dens)


# --------------------------------------------------------------------------
# divergences


def kld_closed_form(p: Density, q: Density) -> float | None:
    if p.same_as(q):
        return 0.0
    if p.family is q.family is Family.NORMAL:
        return 0.5 * (p.param - q.param) ** 2
    if p.family is q.family is Family.EXPONENTIAL:
        u = q.param / p.param - 1.0
        return u - math.log1p(u)
    return None


def kld_quadrature(p: Density, q: Density) -> float:
    plo, phi = p.support
    qlo, qhi = q.support
    if plo < qlo or phi > qhi:
        return math.inf

    def integrand(x):
        lp = log_density(p, x)
        return math.exp(lp) * (lp - log_density(q, x))

    return max(integrate_pieces(integrand, p.support, crossings(p, q)), 0.0)


def kld(p: Density, q: Density, method: str | None = None) -> DivergenceValue:
    """KL divergence D(p || q) in nats."""
    if method != "quadrature":
        val = kld_closed_form(p, q)
        if val is not None:
            return DivergenceValue(val, "closed_form")
    return DivergenceValue(kld_quadrature(p, q), "quadrature")


def tvd_closed_form(p: Density, q: Density) -> float | None:
    if p.same_as(q):
        return 0.0
    if p.family is q.family is Family.NORMAL:
        # 2 Phi(|dmu|/2) - 1 written through erf to keep precision for small gaps
        return math.erf(abs(p.param - q.param) / (2.0 * math.sqrt(2.0)))
    if p.family is q.family is Family.EXPONENTIAL:
        rho = min(p.param, q.param) / max(p.param, q.param)
        return (1.0 - rho) * math.exp(rho / (1.0 - rho) * math.log(rho))
    return None


def tvd_quadrature(p: Density, q: Density) -> float:
    lo = min(p.support[0], q.support[0])
    hi = max(p.support[1], q.support[1])
    breaks = crossings(p, q) + [p.support[0], q.support[0]]

    def integrand(x):
        return abs(math.exp(log_density(p, x)) - math.exp(log_density(q, x)))

    return min(0.5 * integrate_pieces(integrand, (lo, hi), breaks), 1.0)


def tvd(p: Density, q: Density, method: str | None = None) -> DivergenceValue:
    """Total variation distance, half the L1 distance between the densities."""
    if method != "quadrature":
        val = tvd_closed_form(p, q)
        if val is not None:
            return DivergenceValue(val, "closed_form")
    return DivergenceValue(tvd_quadrature(p, q), "quadrature")


def likelihood_ratio_expectation(i: Density, j: Density, k: Density,
                                 method: str | None = None) -> float:
    """E_{f_i}[f_j(X) / f_k(X)].

    Closed form for a shared family:
    exp{A(eta_k) - A(eta_j) - A(eta_i) + A(eta_j - eta_k + eta_i)}.
    Returns ``inf`` when the expectation diverges (for exponentials this is
    the case lambda_j - lambda_k + lambda_i <= 0).
    """
    if j.same_as(k):
        return 1.0
    if method != "quadrature" and i.family is j.family is k.family:
        A = i.ops.log_partition
        combined = j.natural - k.natural + i.natural
        a_comb = A(combined)
        if not math.isfinite(a_comb):
            return math.inf
        expo = k.log_partition - j.log_partition - i.log_partition + a_comb
        return math.exp(expo) if expo < 700 else math.inf

    def integrand(x):
        return math.exp(log_density(i, x) + log_density(j, x) - log_density(k, x))

    lo, hi = i.support
    breaks = crossings(j, k)
    try:
        return integrate_pieces(integrand, (lo, hi), breaks)
    except QuadratureError:
        return math.inf


def llr_second_moment(i: Density, j: Density) -> float:
    """E_{f_i}[(ln f_i(X)/f_j(X))^2]; the finite-LLR-variance certificate for the pair."""
    if i.same_as(j):
        return 0.0
    if i.family is j.family:
        # ln f_i/f_j = c0 + c1 x on the common support
        c1 = i.natural - j.natural
        c0 = j.log_partition - i.log_partition
        m = c0 + c1 * i.mean
        return m * m + c1 * c1 * i.variance
    if j.support[0] > i.support[0]:
        return math.inf

    def integrand(x):
        li = log_density(i, x)
        return math.exp(li) * (li - log_density(j, x)) ** 2

    return integrate_pieces(integrand, i.support, crossings(i, j))
