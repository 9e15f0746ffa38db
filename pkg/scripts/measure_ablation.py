"""Compare the three SBR dissimilarity measures, each at its best beta.

    SBR_LAB_THREADS=4 python scripts/measure_ablation.py --rate 0.15
"""
import argparse
import warnings

from sbr_lab import benchmark
from sbr_lab.sweep import format_table, sweep, write_table


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rate", type=float, default=0.15)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    args = p.parse_args()

    # large inner-product betas blow up; those cells are reported as failed
    warnings.filterwarnings("ignore", category=RuntimeWarning)
    bench = benchmark.prepare()
    template = benchmark.sbr_config(sampling_rate=args.rate, seeds_for_report=args.seeds)
    cells = sweep(template, "measure", list(benchmark.BETA_GRIDS), bench, beta_grids=benchmark.BETA_GRIDS)
    print(format_table(cells))
    for c in cells:
        tried = ", ".join(f"{b:g}->{'nan' if m is None else f'{m:.4f}'}" for b, m in c.tried)
        print(f"  {c.value}: {tried}")
    if args.out:
        write_table(cells, args.out)


if __name__ == "__main__":
    main()
