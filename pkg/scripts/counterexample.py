"""Greedy TVD action choice versus the exhaustive optimum on the
three-hypothesis, three-action instance, swept over xi and delta."""

import argparse
import math

from phidelta.analysis import mwdt_bruteforce, policy_tree, predict_total
from phidelta.cluster import build_plan
from phidelta.model import build_counterexample


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--xi", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.3])
    ap.add_argument("--delta", type=float, nargs="+", default=[1e-2, 1e-3, 1e-6])
    args = ap.parse_args(argv)

    print(f"{'xi':>6} {'delta':>8} {'greedy':>12} {'optimal':>12} {'ratio':>7}  greedy actions by true hypothesis")
    for xi in args.xi:
        inst = build_counterexample(xi)
        plan = build_plan(inst, "zero")
        for delta in args.delta:
            greedy = predict_total(inst, plan, delta).mean
            best = mwdt_bruteforce(inst, plan, delta)
            tree = policy_tree(inst, plan, delta)
            paths = " ".join(f"{t}:{tree.path_actions(t)}" for t in range(inst.H))
            print(f"{xi:>6.3g} {delta:>8.0e} {greedy:>12.6f} {best.cost:>12.6f} {greedy / best.cost:>7.4f}  {paths}")
    # every stage cost is a multiple of ln(2/delta), so the ratio does not depend on delta
    for xi in args.xi:
        print(f"xi {xi:g}: limiting ratio {(1 / 3 + 2 / 3 * (1 + 2 / (4 / 3 - xi))) / 2:.6f}")


if __name__ == "__main__":
    main()
