"""Risk-versus-1/delta sweep on the two-level 32 x 16 scenario.

    python scripts/reproduce_fig.py --family exponential --trials 2000 --workers 4

Writes abr_<algorithm>.csv, plot_data.csv and manifest.json to the output
directory and prints a summary table.
"""

import argparse
import sys

from phidelta.harness import ExperimentConfig, cfg_with_overrides, emit_results, run_experiment, summary_lines


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--family", choices=["normal", "exponential"], default="normal")
    ap.add_argument("--seed", type=int, default=0, help="scenario seed")
    ap.add_argument("--master-seed", type=int, default=0, help="simulation seed")
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--epsilon", type=float, default=0.4)
    ap.add_argument("--with-vanilla", action="store_true",
                    help="also run the eps = 0 engine (slow: stages can stall on near-identical densities)")
    ap.add_argument("--output")
    args = ap.parse_args(argv)

    cfg = ExperimentConfig.two_level(args.family, args.seed, epsilon=args.epsilon)
    if args.with_vanilla:
        cfg = cfg.replace(algorithms=("phi",) + cfg.algorithms, cap=10**6)
    cfg = cfg_with_overrides(cfg, trials=args.trials, workers=args.workers, master_seed=args.master_seed,
                             output_dir=args.output or f"results/{args.family}_seed{args.seed}")
    result = run_experiment(cfg)
    emit_results(result)
    print("\n".join(summary_lines(result)))
    for d in result.diagnostics:
        print("diagnostic:", d, file=sys.stderr)
    print(f"results in {cfg.output_dir}")


if __name__ == "__main__":
    main()
