"""Detection precision of Loss, GradNorm, SI, IF_train and BCSI on the toy data.

    python3 scripts/detection_precision.py --r 0.01 0.05 --seeds 5 --out detection.csv
"""
import argparse

from bcsi.datagen import GenConfig, generate_synthetic
from bcsi.evaluation import DETECTORS, compare_detectors, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--r", type=float, nargs="+", default=[0.01, 0.05])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--hidden", type=int, nargs="+", default=[100, 100])
    ap.add_argument("--out", default="detection.csv")
    args = ap.parse_args()

    rows = []
    for r in args.r:
        per_seed = []
        for seed in range(args.seeds):
            gen = GenConfig(r=r, seed=seed)
            ds = generate_synthetic(gen)
            per_seed.append(compare_detectors(ds, [gen.d, *args.hidden, gen.C], seeds=(seed,)))
        for method in DETECTORS:
            vals = [table[method]["mean"] for table in per_seed]
            mean = sum(vals) / len(vals)
            rows.append({"r": r, "method": method, "precision": mean, "n_seeds": len(vals)})
            print(f"r={r:<5} {method:<14} {mean:.3f}")
    write_csv(rows, args.out)


if __name__ == "__main__":
    main()
