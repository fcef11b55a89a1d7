"""ERM vs fine-tuned unbiased accuracy across bias-conflicting ratios.

    python3 scripts/bias_ratio_sweep.py --config configs/toy.cfg --r 0.005 0.01 0.05 0.2 0.8 --out sweep.csv
"""
import argparse

from bcsi.config import PipelineConfig, load_config
from bcsi.evaluation import bias_ratio_sweep, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--r", type=float, nargs="+", default=[0.005, 0.01, 0.02, 0.05, 0.2, 0.5, 0.8])
    ap.add_argument("--seeds", type=int, nargs="+", help="defaults to eval.seeds of the config")
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else PipelineConfig()
    cfg.validate()
    rows = bias_ratio_sweep(args.r, cfg, args.seeds)
    for row in rows:
        print(f"r={row['r']:<6} ERM {row['erm_acc']:.3f}  fine-tuned {row['finetuned_acc']:.3f}  "
              f"pivotal precision {row['pivotal_precision']:.3f}  |Z_P| {row['pivotal_size']:.1f}")
    write_csv(rows, args.out)


if __name__ == "__main__":
    main()
