"""Command-line entry point: ``python -m phidelta <command> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    abr_envelope,
    lower_bound_nj,
    lower_bound_phi,
    mwdt_bruteforce,
    policy_tree,
    predict_total,
    trajectory,
)
from .cluster import build_plan, check_condition, plan_from_dict, plan_to_dict
from .harness import ExperimentConfig, cfg_with_overrides, emit_results, run_experiment, summary_lines
from .model import ScenarioSpec, build_counterexample, build_scenario, load_instance, save_instance, validate


def _epsilon_arg(text: str):
    if text in ("proposition", "safe", "zero"):
        return text
    vals = [float(v) for v in text.split(",")]
    return vals[0] if len(vals) == 1 else tuple(vals)


def _plan_for(args, inst):
    if getattr(args, "plan", None):
        return plan_from_dict(inst, json.loads(Path(args.plan).read_text()))
    return build_plan(inst, args.eps, args.reps)


def cmd_validate(args) -> int:
    rep = validate(load_instance(args.instance))
    print(rep.summary())
    return 0 if rep.ok else 1


def cmd_cluster(args) -> int:
    inst = load_instance(args.instance)
    plan = _plan_for(args, inst)
    all_ok = True
    for ac in plan.actions:
        print(f"action {ac.action}: eps {ac.epsilon:.6g}  clusters {ac.k}  (safe eps {ac.safe_epsilon:.6g})")
        for c in range(ac.k):
            rep = ac.reps[c]
            who = f"rep {rep.index}" if rep.kind == "real" else "virtual rep"
            print(f"  cluster {c}: {list(ac.members(c))}  {who}")
        if ac.k >= 2:
            cr = check_condition(inst, ac.action, plan)
            all_ok &= cr.ok
            status = "ok" if cr.ok else f"{len(cr.failures())} violations"
            print(f"  likelihood-ratio condition: {status} (worst {cr.worst:.6g})")
    if args.save:
        Path(args.save).write_text(json.dumps(plan_to_dict(plan), indent=2) + "\n")
    return 0 if all_ok or not args.strict else 1


def cmd_simulate(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    cfg = cfg_with_overrides(cfg, trials=args.trials, workers=args.workers, output_dir=args.output,
                             master_seed=args.seed)
    return _run_and_emit(cfg)


def _run_and_emit(cfg: ExperimentConfig) -> int:
    result = run_experiment(cfg)
    files = emit_results(result)
    print("\n".join(summary_lines(result)))
    print(f"wrote {len(files)} files to {cfg.output_dir}")
    for d in result.diagnostics:
        print(f"diagnostic: {d}", file=sys.stderr)
    return 0


def cmd_bounds(args) -> int:
    inst = load_instance(args.instance)
    plan = _plan_for(args, inst)
    print(f"{'delta':>9} {'predicted':>12} {'stages':>7} {'lb_phi':>12} {'lb_nj':>12}")
    for d in args.delta:
        tp = predict_total(inst, plan, d)
        print(f"{d:>9.2e} {tp.mean:>12.6g} {tp.mean_stages:>7.3g} "
              f"{lower_bound_phi(inst, plan, d, tp.profiles):>12.6g} {lower_bound_nj(inst, d):>12.6g}")
    env = abr_envelope(inst, plan, args.delta)
    print(f"risk envelope constants: c1 = {env.c1:.6g}, c2 = {env.c2:.6g}")
    return 0


def cmd_mwdt(args) -> int:
    inst = load_instance(args.instance)
    plan = _plan_for(args, inst)
    best = mwdt_bruteforce(inst, plan, args.delta)
    greedy = policy_tree(inst, plan, args.delta)
    print("optimal tree:")
    print("\n".join(best.root.lines(1)))
    print(f"optimal expected samples: {best.cost:.10g}")
    print(f"greedy expected samples:  {greedy.cost:.10g}")
    return 0


def cmd_counterexample(args) -> int:
    inst = build_counterexample(args.xi)
    plan = build_plan(inst, "zero")
    greedy = predict_total(inst, plan, args.delta).mean
    best = mwdt_bruteforce(inst, plan, args.delta)
    L = math.log(2 / args.delta)
    print(f"xi = {args.xi}, delta = {args.delta}")
    print(f"greedy expected samples:  {greedy:.10g}  (actions {greedy_paths(inst, plan)})")
    print(f"optimal expected samples: {best.cost:.10g}  (single stage with action {best.root.action})")
    print(f"ln(2/delta) = {L:.10g}")
    return 0


def greedy_paths(inst, plan) -> str:
    return "; ".join(f"H{t}: " + ",".join(str(a) for _, a in trajectory(inst, plan, t)) for t in range(inst.H))


def cmd_scenario(args) -> int:
    inst = build_scenario(ScenarioSpec.two_level(args.family, args.seed))
    save_instance(inst, args.output)
    print(f"wrote {inst.H} x {inst.n_actions} {args.family} instance to {args.output}")
    return 0


def cmd_reproduce(args) -> int:
    out = args.output or f"results/{args.family}_seed{args.seed}"
    cfg = ExperimentConfig.two_level(args.family, args.seed, output_dir=out)
    cfg = cfg_with_overrides(cfg, trials=args.trials, workers=args.workers)
    return _run_and_emit(cfg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phidelta", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def plan_opts(sp):
        sp.add_argument("--eps", type=_epsilon_arg, default="zero",
                        help="proposition | safe | zero | value | comma-separated per-action values")
        sp.add_argument("--reps", choices=["max_mean", "min_mean", "virtual"], default="max_mean")
        sp.add_argument("--plan", help="load a saved plan instead of clustering")

    sp = sub.add_parser("validate", help="check separation, validity and the LLR moment bound")
    sp.add_argument("instance")
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("cluster", help="cluster every action and check the likelihood-ratio condition")
    sp.add_argument("instance")
    plan_opts(sp)
    sp.add_argument("--save", help="write the plan as JSON")
    sp.add_argument("--strict", action="store_true", help="exit 1 if the condition fails anywhere")
    sp.set_defaults(fn=cmd_cluster)

    sp = sub.add_parser("simulate", help="run an experiment config and write result tables")
    sp.add_argument("config")
    sp.add_argument("--trials", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--output")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("bounds", help="predicted sample counts and lower bounds")
    sp.add_argument("instance")
    sp.add_argument("--delta", type=float, nargs="+", required=True)
    plan_opts(sp)
    sp.set_defaults(fn=cmd_bounds)

    sp = sub.add_parser("mwdt", help="exhaustive minimum-cost decision tree (H <= 8)")
    sp.add_argument("instance")
    sp.add_argument("--delta", type=float, required=True)
    plan_opts(sp)
    sp.set_defaults(fn=cmd_mwdt)

    sp = sub.add_parser("counterexample", help="greedy versus optimal on the three-hypothesis instance")
    sp.add_argument("--xi", type=float, required=True)
    sp.add_argument("--delta", type=float, default=1e-3)
    sp.set_defaults(fn=cmd_counterexample)

    sp = sub.add_parser("scenario", help="write a generated two-level scenario instance")
    sp.add_argument("--family", choices=["normal", "exponential"], default="normal")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", required=True)
    sp.set_defaults(fn=cmd_scenario)

    sp = sub.add_parser("reproduce-fig", help="full risk sweep on the two-level scenario")
    sp.add_argument("--family", choices=["normal", "exponential"], default="normal")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--output")
    sp.set_defaults(fn=cmd_reproduce)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"phidelta {args.command}: {exc}", file=sys.stderr)
        return 2
