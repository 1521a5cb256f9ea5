#!/usr/bin/env python3
"""Run the desk-scale OU study and print the summary table path."""

import argparse

from psml.study import ou_study_config, run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--replicates", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=4)
    ap.add_argument("--out", default="results/ou-study")
    args = ap.parse_args()

    config = ou_study_config(n_replicates=args.replicates, seed=args.seed)
    report, timings = run_study(config, workers=args.threads, out_dir=args.out)
    for name, cell in report["summary"]["methods"].items():
        print(name, "bias:", cell["bias"], "rmse:", cell["rmse"])
    print(f"total fit time: {timings['total_seconds']:.1f}s")
    print(f"report written under {args.out}")


if __name__ == "__main__":
    main()
