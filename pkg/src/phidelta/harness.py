"""Monte Carlo risk sweeps over delta for every algorithm, plus result files.

Per-trial randomness comes from
``SeedSequence(entropy=master_seed, spawn_key=(algorithm id, delta index, trial index))``,
so results do not depend on how trials are spread over workers.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .analysis import abr, lower_bound_nj, lower_bound_phi, nj_rates, predict_total
from .baselines import DEFAULT_RHO, chernoff_run, gjl_mean_samples, nj1_run, posterior_sampler
from .cluster import build_plan, extend_with_unclustered, vanilla_plan
from .engine import DEFAULT_CAP, run
from .model import ProblemInstance, ScenarioSpec, build_scenario, load_instance, validate

CONFIG_FORMAT = "phidelta-config v1"
MANIFEST_FORMAT = "phidelta-manifest v1"
OUTPUT_ENV = "PHIDELTA_OUTPUT_DIR"
ALGORITHM_IDS = {"phi": 0, "phi_delta": 1, "chernoff": 2, "nj1": 3, "gjl": 4}
DEFAULT_ALGORITHMS = ("phi_delta", "chernoff", "nj1", "gjl")
DEFAULT_DELTAS = tuple(float(d) for d in np.logspace(-1, -5, 9))
CHUNK = 500
ABR_COLUMNS = ["delta", "inv_delta", "mean_N", "se_N", "pe_hat", "pe_ci_lo", "pe_ci_hi", "abr", "mean_stages"]


class ConfigError(ValueError):
    pass


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "results")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec | None = None
    instance_path: str | None = None
    algorithms: tuple[str, ...] = DEFAULT_ALGORITHMS
    deltas: tuple[float, ...] = DEFAULT_DELTAS
    trials: int = 10_000
    epsilon: str | float | tuple[float, ...] = 0.4
    representatives: str = "max_mean"
    alpha: float | str | None = None
    rho: float = DEFAULT_RHO
    master_seed: int = 0
    workers: int = 1
    output_dir: str = field(default_factory=default_output_dir)
    cap: int = DEFAULT_CAP
    dynamic_threshold: bool = False
    extend_actions: bool = False

    def __post_init__(self):
        if (self.scenario is None) == (self.instance_path is None):
            raise ConfigError("give exactly one of scenario or instance_path")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not self.deltas or any(not 0.0 < d < 1.0 for d in self.deltas):
            raise ConfigError("every delta must lie in (0, 1)")
        unknown = set(self.algorithms) - set(ALGORITHM_IDS)
        if unknown or not self.algorithms:
            raise ConfigError(f"unknown algorithms {sorted(unknown)}; choose from {list(ALGORITHM_IDS)}")
        if not 0.5 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0.5, 1), got {self.rho}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.representatives not in ("max_mean", "min_mean", "virtual"):
            raise ConfigError(f"unknown representative rule {self.representatives!r}")
        if isinstance(self.epsilon, str) and self.epsilon not in ("proposition", "safe", "zero"):
            raise ConfigError(f"unknown epsilon policy {self.epsilon!r}")

    # -- (de)serialisation ------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["format"] = CONFIG_FORMAT
        if self.scenario is not None:
            d["scenario"]["family"] = self.scenario.family.value
        d["algorithms"] = list(self.algorithms)
        d["deltas"] = list(self.deltas)
        if isinstance(self.epsilon, tuple):
            d["epsilon"] = list(self.epsilon)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: str | Path | None = None) -> "ExperimentConfig":
        data = dict(data)
        fmt = data.pop("format", CONFIG_FORMAT)
        if fmt != CONFIG_FORMAT:
            raise ConfigError(f"unsupported config format {fmt!r}")
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if data.get("scenario") is not None:
            try:
                data["scenario"] = ScenarioSpec(**data["scenario"])
            except TypeError as exc:
                raise ConfigError(f"bad scenario block: {exc}") from None
        if data.get("instance_path") and base_dir is not None:
            p = Path(data["instance_path"])
            data["instance_path"] = str(p if p.is_absolute() else Path(base_dir) / p)
        for key in ("algorithms", "deltas"):
            if key in data:
                data[key] = tuple(data[key])
        if isinstance(data.get("epsilon"), list):
            data["epsilon"] = tuple(float(e) for e in data["epsilon"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        with open(path) as fh:
            data = json.load(fh)
        return cls.from_dict(data, base_dir=path.parent)

    @classmethod
    def from_manifest(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh)["config"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def digest(self) -> str:
        """SHA-256 of the canonical config, ignoring where and how fast it runs."""
        d = self.to_dict()
        for k in ("workers", "output_dir"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def two_level(cls, family: str = "normal", seed: int = 0, **kw) -> "ExperimentConfig":
        """The two-level 32 x 16 scenario with eps = 0.4 and rho = 0.8."""
        return cls(scenario=ScenarioSpec.two_level(family, seed), **kw)


# --------------------------------------------------------------------------
# per-process context


@dataclass
class _Context:
    cfg: ExperimentConfig
    inst: ProblemInstance
    plans: dict[str, Any]
    sampler: Any


_CTX: _Context | None = None


def load_experiment_instance(cfg: ExperimentConfig) -> ProblemInstance:
    return build_scenario(cfg.scenario) if cfg.scenario is not None else load_instance(cfg.instance_path)


def _make_context(cfg: ExperimentConfig) -> _Context:
    inst = load_experiment_instance(cfg)
    plans: dict[str, Any] = {"phi": (inst, vanilla_plan(inst))}
    if "phi_delta" in cfg.algorithms:
        plan = build_plan(inst, cfg.epsilon, cfg.representatives, cfg.alpha)
        plans["phi_delta"] = extend_with_unclustered(inst, plan) if cfg.extend_actions else (inst, plan)
    return _Context(cfg, inst, plans, posterior_sampler(inst))


def _init_worker(cfg_dict: dict) -> None:
    global _CTX
    _CTX = _make_context(ExperimentConfig.from_dict(cfg_dict))


def trial_rng(master_seed: int, algorithm: str, delta_index: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(ALGORITHM_IDS[algorithm], delta_index, trial))
    return np.random.default_rng(ss)


def _run_chunk(algorithm: str, delta_index: int, delta: float, start: int, stop: int) -> np.ndarray:
    """Rows (samples, error, stages, first-stage error) for trials start..stop-1."""
    ctx = _CTX
    cfg = ctx.cfg
    out = np.zeros((stop - start, 4))
    for row, t in enumerate(range(start, stop)):
        rng = trial_rng(cfg.master_seed, algorithm, delta_index, t)
        theta = int(rng.integers(ctx.inst.H))
        if algorithm in ("phi", "phi_delta"):
            inst, plan = ctx.plans[algorithm]
            tr = run(inst, plan, delta, theta, rng, cap=cfg.cap, dynamic_threshold=cfg.dynamic_threshold)
        elif algorithm == "chernoff":
            tr = chernoff_run(ctx.inst, delta, theta, rng, sampler=ctx.sampler)
        else:
            tr = nj1_run(ctx.inst, delta, theta, rng, rho=cfg.rho, sampler=ctx.sampler)
        out[row] = (tr.total_samples, not tr.correct, tr.n_stages, tr.first_stage_error)
    return out


# --------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class AbrPoint:
    algorithm: str
    delta: float
    trials: int
    mean_N: float
    se_N: float
    pe_hat: float
    pe_ci_lo: float
    pe_ci_hi: float
    abr: float
    mean_stages: float
    first_stage_error: float = math.nan
    diagnostic: str = ""

    @property
    def inv_delta(self) -> float:
        return 1.0 / self.delta

    def row(self) -> list[float]:
        return [self.delta, self.inv_delta, self.mean_N, self.se_N, self.pe_hat,
                self.pe_ci_lo, self.pe_ci_hi, self.abr, self.mean_stages]


@dataclass
class AbrCurve:
    algorithm: str
    points: list[AbrPoint] = field(default_factory=list)

    def at(self, delta: float) -> AbrPoint:
        return min(self.points, key=lambda p: abs(math.log(p.delta / delta)))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: dict[str, AbrCurve]
    bounds: dict[str, list[tuple[float, float]]]  # series -> (delta, bound on E[N])
    diagnostics: list[str]


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def summarize(algorithm: str, delta: float, rows: np.ndarray) -> AbrPoint:
    n = len(rows)
    N, err, R, first = rows.T
    k = int(err.sum())
    lo, hi = clopper_pearson(k, n)
    se = float(N.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    pe = k / n
    return AbrPoint(algorithm, delta, n, float(N.mean()), se, pe, lo, hi,
                    abr(delta, float(N.mean()), pe), float(R.mean()), float(first.mean()))


def _failed(algorithm: str, delta: float, trials: int, msg: str) -> AbrPoint:
    nan = math.nan
    return AbrPoint(algorithm, delta, trials, nan, nan, nan, nan, nan, nan, nan, nan, msg)


def _gjl_point(inst: ProblemInstance, delta: float) -> AbrPoint:
    mean_n, stages = gjl_mean_samples(inst, delta)
    return AbrPoint("gjl", delta, inst.H, mean_n, 0.0, 0.0, 0.0, 0.0, abr(delta, mean_n, 0.0), stages, 0.0)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    global _CTX
    ctx = _make_context(cfg)
    report = validate(ctx.inst)
    if not report.ok:
        raise ConfigError(f"instance fails validation:\n{report.summary()}")
    curves = {alg: AbrCurve(alg) for alg in cfg.algorithms}
    diagnostics: list[str] = []
    jobs = [(alg, di, d) for alg in cfg.algorithms if alg != "gjl" for di, d in enumerate(cfg.deltas)]
    chunks = [(alg, di, d, s, min(s + CHUNK, cfg.trials))
              for alg, di, d in jobs for s in range(0, cfg.trials, CHUNK)]

    results: dict[tuple[str, int], list] = {(alg, di): [] for alg, di, _ in jobs}
    errors: dict[tuple[str, int], str] = {}
    if cfg.workers == 1:
        _CTX = ctx
        for alg, di, d, s, e in chunks:
            if (alg, di) in errors:
                continue
            try:
                results[(alg, di)].append((s, _run_chunk(alg, di, d, s, e)))
            except Exception as exc:  # recorded per cell; other cells proceed
                errors[(alg, di)] = f"{type(exc).__name__}: {exc}"
    else:
        with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(cfg.to_dict(),)) as pool:
            futs = [(c, pool.submit(_run_chunk, *c)) for c in chunks]
            for (alg, di, d, s, e), fut in futs:
                try:
                    results[(alg, di)].append((s, fut.result()))
                except Exception as exc:
                    errors.setdefault((alg, di), f"{type(exc).__name__}: {exc}")

    for alg in cfg.algorithms:
        for di, d in enumerate(cfg.deltas):
            if alg == "gjl":
                try:
                    curves[alg].points.append(_gjl_point(ctx.inst, d))
                except Exception as exc:
                    msg = f"{type(exc).__name__}: {exc}"
                    curves[alg].points.append(_failed(alg, d, 0, msg))
                    diagnostics.append(f"gjl delta={d!r}: {msg}")
                continue
            if (alg, di) in errors:
                curves[alg].points.append(_failed(alg, d, cfg.trials, errors[(alg, di)]))
                diagnostics.append(f"{alg} delta={d!r}: {errors[(alg, di)]}")
                continue
            rows = np.concatenate([r for _, r in sorted(results[(alg, di)], key=lambda x: x[0])])
            curves[alg].points.append(summarize(alg, d, rows))

    bounds = _bound_curves(ctx, cfg, diagnostics)
    return ExperimentResult(cfg, curves, bounds, diagnostics)


def _bound_curves(ctx: _Context, cfg: ExperimentConfig, diagnostics: list[str]) -> dict:
    out: dict[str, list[tuple[float, float]]] = {}
    inst, plan = ctx.plans.get("phi_delta", ctx.plans["phi"])
    try:
        prof = predict_total(inst, plan, cfg.deltas[0]).profiles
        out["lower_bound_phi"] = [(d, lower_bound_phi(inst, plan, d, prof)) for d in cfg.deltas]
    except Exception as exc:
        diagnostics.append(f"lower_bound_phi: {type(exc).__name__}: {exc}")
    try:
        rates = nj_rates(ctx.inst)
        out["lower_bound_nj"] = [(d, lower_bound_nj(ctx.inst, d, rates)) for d in cfg.deltas]
    except Exception as exc:
        diagnostics.append(f"lower_bound_nj: {type(exc).__name__}: {exc}")
    return out


# --------------------------------------------------------------------------
# output


def _fmt(x: float) -> str:
    return repr(float(x))


def abr_table(curve: AbrCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABR_COLUMNS)
    for p in curve.points:
        w.writerow([_fmt(v) for v in p.row()])
    return buf.getvalue()


def plot_table(result: ExperimentResult) -> str:
    """Long-format ABR against 1/delta, each series in ascending 1/delta."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "inv_delta", "delta", "mean_N", "abr"])
    for alg, curve in result.curves.items():
        for p in sorted(curve.points, key=lambda p: p.inv_delta):
            w.writerow([alg, _fmt(p.inv_delta), _fmt(p.delta), _fmt(p.mean_N), _fmt(p.abr)])
    for name, pts in result.bounds.items():
        for d, n in sorted(pts, key=lambda t: -t[0]):
            w.writerow([name, _fmt(1.0 / d), _fmt(d), _fmt(n), _fmt(d * n)])
    return buf.getvalue()


def manifest(result: ExperimentResult) -> dict:
    cfg = result.config
    cells = []
    for alg, curve in result.curves.items():
        for di, p in enumerate(curve.points):
            cell = {"algorithm": alg, "delta_index": di, "delta": p.delta}
            if alg == "gjl":
                cell["analytic"] = True
            else:
                cell["spawn_key"] = [ALGORITHM_IDS[alg], di, "trial"]
                cell["trials"] = p.trials
            if p.diagnostic:
                cell["diagnostic"] = p.diagnostic
            cells.append(cell)
    return {
        "format": MANIFEST_FORMAT,
        "tool_version": __version__,
        "config_sha256": cfg.digest(),
        "master_seed": cfg.master_seed,
        "seed_scheme": "numpy SeedSequence(entropy=master_seed, spawn_key=(algorithm_id, delta_index, trial_index))",
        "algorithm_ids": ALGORITHM_IDS,
        "config": cfg.to_dict(),
        "cells": cells,
        "diagnostics": result.diagnostics,
    }


def emit_results(result: ExperimentResult, out_dir: str | Path | None = None) -> list[Path]:
    out = Path(out_dir if out_dir is not None else result.config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for alg, curve in result.curves.items():
        p = out / f"abr_{alg}.csv"
        p.write_text(abr_table(curve))
        written.append(p)
    p = out / "plot_data.csv"
    p.write_text(plot_table(result))
    written.append(p)
    p = out / "manifest.json"
    p.write_text(json.dumps(manifest(result), indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def summary_lines(result: ExperimentResult) -> list[str]:
    lines = [f"{'algorithm':<10} {'delta':>9} {'mean_N':>12} {'pe_hat':>8} {'abr':>11} {'stages':>7}"]
    for alg, curve in result.curves.items():
        for p in curve.points:
            lines.append(f"{alg:<10} {p.delta:>9.2e} {p.mean_N:>12.4g} {p.pe_hat:>8.4f} {p.abr:>11.4g} {p.mean_stages:>7.3g}"
                         + (f"  [{p.diagnostic}]" if p.diagnostic else ""))
    for name, pts in result.bounds.items():
        for d, n in pts:
            lines.append(f"{name:<10} {d:>9.2e} {n:>12.4g}")
    return lines


def read_abr_table(path: str | Path) -> list[dict[str, float]]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cfg_with_overrides(cfg: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})


__all__: Sequence[str] = [
    "ExperimentConfig", "AbrPoint", "AbrCurve", "ExperimentResult", "run_experiment",
    "emit_results", "trial_rng", "clopper_pearson", "summarize", "ALGORITHM_IDS",
]
