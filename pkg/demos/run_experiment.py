"""Full seeds x folds comparison of all methods, written to an output directory.

    python3 demos/run_experiment.py --config configs/benchmark.json --out runs/benchmark

The quick config finishes in seconds; the benchmark takes a minute or two.
"""

import argparse
from pathlib import Path

from annomap.harness import ExperimentConfig, load_report, run_experiment, write_report

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default=ROOT / "configs" / "quick.json")
    parser.add_argument("--out", default="runs/demo")
    args = parser.parse_args()

    cfg = ExperimentConfig.load(args.config)
    report = run_experiment(cfg)
    write_report(report, args.out)
    body, _ = load_report(args.out)

    print(f"{'method':<16}{'dim':<12}{'CCC_ind':>16}{'CCC_agg':>16}")
    for row in body["summary"]:
        ind = f"{row['ccc_ind_mean']:.3f} +- {row['ccc_ind_sd'] or 0:.3f}"
        agg = f"{row['ccc_agg_mean']:.3f} +- {row['ccc_agg_sd'] or 0:.3f}"
        print(f"{row['method']:<16}{row['dimension']:<12}{ind:>16}{agg:>16}")
    print("\nenrollment sweep (CCC_ind of the mapped heads):")
    for row in body["rq3"]:
        print(f"  N={row['n']!s:<5}{row['dimension']:<12}{row['ccc_ind_mean']:.3f}")
    rq4 = body["rq4"]
    print(f"\nselection entropy over {rq4['repetitions']} runs (max {rq4['max_entropy_reference']:.3f} bits):")
    for dim, stats in rq4["mapped"].items():
        print(f"  {dim:<12} mapped {stats['mean']:.3f}  random {rq4['random'][dim]['mean']:.3f}")
    if report.errors:
        print(f"\n{len(report.errors)} cell(s) failed; see report.json")
    print(f"\nwritten to {args.out}")


if __name__ == "__main__":
    main()
