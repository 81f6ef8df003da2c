"""Run the full selection experiment and print the aggregate table.

Usage:
    python3 scripts/run_experiment.py --config configs/tsp_desk.toml
    python3 scripts/run_experiment.py --kind CVRP --seeds 0 1 2 --out runs/cvrp

Without --config this uses the desk-scale defaults (2000/500/500 instances,
N in [50, 150]) and the full builtin zoo for the chosen problem kind.
"""

import argparse
import time

import psel.pipeline as pl


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", help="TOML experiment config")
    ap.add_argument("--kind", default="TSP", choices=["TSP", "CVRP"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default=None)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--strategies", nargs="+",
                    default=["greedy", "topk:2", "topk:3"])
    return ap.parse_args()


def main():
    args = parse_args()
    if args.config:
        cfg = pl.load_config(args.config)
    else:
        cfg = pl.ExperimentConfig(
            kind=args.kind, seeds=args.seeds, jobs=args.jobs,
            strategies=args.strategies,
            out_dir=args.out or f"runs/{args.kind.lower()}_desk")
    if args.out:
        cfg.out_dir = args.out
    t0 = time.perf_counter()
    result = pl.run_pipeline(cfg)
    minutes = (time.perf_counter() - t0) / 60.0

    print(f"\n{cfg.kind} aggregate over seeds {cfg.seeds} "
          f"({minutes:.1f} min, reports in {cfg.out_dir})")
    print(f"{'method':>28s} {'gap%':>9s} {'std':>8s} {'time_s':>8s} {'acc%':>6s}")
    for row in result["aggregate"]:
        print(f"{row['method']:>28s} {row['mean_gap_pct']:9.4f} "
              f"{row['std_gap_pct']:8.4f} {row['mean_time_s']:8.4f} "
              f"{row['accuracy_pct']:6.1f}")


if __name__ == "__main__":
    main()
