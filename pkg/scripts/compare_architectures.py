"""CNN-A, CNN-B at kernel sizes 2, 4 and 6, and the random forest on one synthetic dataset.

Each model is cross-validated on the same split; the table is written to
``--out``/comparison.csv. Epoch and tree counts default to reduced values so
the sweep finishes on a laptop; raise them for full-length runs.

    python3 scripts/compare_architectures.py --max-epochs 60 --out runs/compare
"""
import argparse
import csv
import logging
from pathlib import Path

from facestutter.data import SynthConfig, generate_synthetic, stack
from facestutter.models import ModelConfig
from facestutter.training import TrainConfig, cross_validate, stratified_split

VARIANTS = [
    ("CNN-A", dict(architecture="CNN_A")),
    ("CNN-B k=2", dict(architecture="CNN_B", cnn_b_kernel=2)),
    ("CNN-B k=4", dict(architecture="CNN_B", cnn_b_kernel=4)),
    ("CNN-B k=6", dict(architecture="CNN_B", cnn_b_kernel=6)),
    ("RF", dict(architecture="RF")),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-trials", type=int, default=3704)
    ap.add_argument("--max-epochs", type=int, default=60)
    ap.add_argument("--rf-trees", type=int, default=500)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--only", nargs="*", help="subset of variant names, e.g. RF 'CNN-B k=2'")
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    trials, oracle = generate_synthetic(SynthConfig(n_trials=args.n_trials, seed=args.seed))
    X, y = stack(trials)
    train_cfg = TrainConfig(max_epochs=args.max_epochs, folds=args.folds, seed=args.seed)
    plan = stratified_split(y, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, kw in VARIANTS:
        if args.only and name not in args.only:
            continue
        cfg = ModelConfig(**kw, rf_trees=args.rf_trees, seed=args.seed)
        rep = cross_validate(X, y, cfg, train_cfg, plan=plan).report
        rows.append([name] + [f"{rep.mean(m):.4f}" for m in ("accuracy", "auc_roc", "f1")]
                    + [f"{rep.std('auc_roc'):.4f}"])
        print(f"{name:10s} acc {rows[-1][1]} auc {rows[-1][2]} +/- {rows[-1][4]} f1 {rows[-1][3]}")
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "accuracy", "auc_roc", "f1", "auc_std"])
        w.writerows(rows)
        w.writerow(["bayes_oracle", "", f"{oracle.bayes_auc:.4f}", "", ""])


if __name__ == "__main__":
    main()
