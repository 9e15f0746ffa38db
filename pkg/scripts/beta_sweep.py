"""Sensitivity of SBR to beta (and optionally alpha) at one sampling rate.

    python scripts/beta_sweep.py --rate 0.3 --betas 1e-4,3.16e-4,1e-3,3.16e-3,1e-2 --alphas 0.1,1.0
"""
import argparse

from sbr_lab import benchmark
from sbr_lab.sweep import format_table, sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rate", type=float, default=0.15)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--measure", default="squared_euclidean")
    p.add_argument("--betas", default="1e-4,3.16e-4,1e-3,3.16e-3,1e-2")
    p.add_argument("--alphas", default="0.1")
    args = p.parse_args()

    bench = benchmark.prepare()
    betas = [float(b) for b in args.betas.split(",")]
    for alpha in (float(a) for a in args.alphas.split(",")):
        template = benchmark.sbr_config(sampling_rate=args.rate, seeds_for_report=args.seeds,
                                        measure=args.measure, alpha=alpha)
        print(f"alpha={alpha}")
        print(format_table(sweep(template, "beta_grid", betas, bench)))


if __name__ == "__main__":
    main()
