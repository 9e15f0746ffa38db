"""SBR vs. conventional fine-tuning across target sampling rates.

    python scripts/sampling_rate_comparison.py --seeds 5 --out runs/rates.jsonl
"""
import argparse
import json
import os

from sbr_lab import benchmark
from sbr_lab.train import run_seeds


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--rates", default=",".join(str(r) for r in benchmark.SAMPLING_RATES))
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--out", help="optional JSONL with one row per (rate, method)")
    args = p.parse_args()

    bench = benchmark.prepare()
    print(f"source model train accuracy {bench.source_train_acc:.4f}")
    rows = []
    print(f"{'rate':>6}  {'baseline':>15}  {'sbr':>15}  {'gain':>7}")
    for rate in (float(r) for r in args.rates.split(",")):
        res = {}
        for name, make in (("baseline", benchmark.baseline_config), ("sbr", benchmark.sbr_config)):
            cfg = make(sampling_rate=rate, seeds_for_report=args.seeds, epochs=args.epochs)
            rep = run_seeds(cfg, bench.source, bench.train, bench.test)
            res[name] = rep.final
            rows.append({"rate": rate, "method": name, **rep.final})
        b, s = res["baseline"], res["sbr"]
        print(f"{rate:>6}  {b['test_acc_mean']:.4f}±{b['test_acc_std']:.4f}  "
              f"{s['test_acc_mean']:.4f}±{s['test_acc_std']:.4f}  "
              f"{s['test_acc_mean'] - b['test_acc_mean']:+.4f}")

    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in rows)


if __name__ == "__main__":
    main()
