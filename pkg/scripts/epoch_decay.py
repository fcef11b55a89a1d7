"""SI and IF_train detection precision as the CE model trains longer.

    python3 scripts/epoch_decay.py --r 0.05 --epochs 1 5 10 20 50 100 --out decay.csv
"""
import argparse

from bcsi.datagen import GenConfig, generate_synthetic
from bcsi.evaluation import precision_vs_epoch, write_csv
from bcsi.influence import ScoreConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--r", type=float, default=0.05)
    ap.add_argument("--epochs", type=int, nargs="+", default=[1, 5, 10, 20, 50, 100])
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, default=3, help="model seeds per dataset")
    ap.add_argument("--out", default="decay.csv")
    args = ap.parse_args()

    gen = GenConfig(r=args.r, seed=args.data_seed)
    ds = generate_synthetic(gen)
    rows = precision_vs_epoch(ds, [gen.d, 100, 100, gen.C], args.epochs, ScoreConfig(loss="ce"), seeds=range(args.seeds))
    for row in rows:
        print(f"epoch {row['epoch']:>4}  SI {row['SelfInfluence']:.3f}  IF_train {row['IFTrain']:.3f}")
    write_csv(rows, args.out)


if __name__ == "__main__":
    main()
